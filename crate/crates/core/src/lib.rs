//! Compositional human-object interaction learning on cascade set-prediction
//! decoders.
//!
//! Numerical code is generic over [`scalar::Real`]; the aliases below fix the
//! `f64` instantiation used by training and the command line tool.

pub mod autodiff;
pub mod boxes;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod matching;
pub mod model;
pub mod optim;
pub mod param;
pub mod recompose;
pub mod report;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = param::ParamStore<f64>;
pub type AdamW = optim::AdamW<f64>;
pub type Model = model::HoiModel<f64>;
