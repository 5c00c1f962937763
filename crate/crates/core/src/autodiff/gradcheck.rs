//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this norm a gradient counts as zero and errors are measured
/// absolutely, so that two vanishing gradients do not compare as different.
pub const ZERO_GRADIENT_NORM: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, ZERO_GRADIENT_NORM)`
    /// per input.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, for every entry of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { rel_errors })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    diff / scale.max(ZERO_GRADIENT_NORM)
}

/// Finite-difference check of parameter gradients. `f` builds a scalar from
/// the parameters in `store`; the listed parameters are perturbed in place
/// and restored afterwards.
pub fn check_params<F>(store: &mut ParamStore<f64>, ids: &[ParamId], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    let mut grads = store.clone();
    grads.zero_grad();
    tape.accumulate_param_grads(&mut grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.scalar(out))
    };

    let mut rel_errors = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).value.numel();
        let analytic = match &grads.get(id).grad {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { rel_errors })
}
