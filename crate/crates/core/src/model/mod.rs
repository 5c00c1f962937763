//! Encoder, cascade decoders and prediction heads.
//!
//! A shared encoder turns the flattened feature grid into global memory.
//! The HO-pair decoder turns learned queries into pair representations;
//! the interaction decoder starts from those representations (row `n` of
//! its output belongs to query `n`) and produces interaction
//! representations. Box and object heads read pair representations; the
//! action head reads either the row-wise concatenation of both sets or the
//! interaction representations alone.

mod layers;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

use layers::{BoxHead, DecoderLayer, EncoderLayer, Linear, Norm};

/// Standard deviation of the query embedding initialization.
pub const QUERY_INIT_STD: f64 = 0.02;

/// Parameter name prefix of everything owned by the encoder.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureGrid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Input to the action classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionHeadInput {
    /// Interaction representations only.
    Interaction,
    /// Pair representations concatenated with interaction representations.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub query_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub num_object_classes: usize,
    pub num_action_classes: usize,
    pub feature_grid: FeatureGrid,
    pub action_head: ActionHeadInput,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk(num_object_classes: usize, num_action_classes: usize) -> Self {
        Self {
            num_queries: 8,
            query_dim: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            num_object_classes,
            num_action_classes,
            feature_grid: FeatureGrid {
                height: 6,
                width: 6,
                channels: 32,
            },
            action_head: ActionHeadInput::Concat,
        }
    }

    /// Published full-size settings (64 queries, 256 channels, 6/3 layers).
    pub fn full_scale(num_object_classes: usize, num_action_classes: usize) -> Self {
        Self {
            num_queries: 64,
            query_dim: 256,
            encoder_layers: 6,
            decoder_layers: 3,
            attention_heads: 8,
            num_object_classes,
            num_action_classes,
            feature_grid: FeatureGrid {
                height: 16,
                width: 16,
                channels: 256,
            },
            action_head: ActionHeadInput::Concat,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_queries == 0 || self.query_dim == 0 || self.attention_heads == 0 {
            return bad("num_queries, query_dim and attention_heads must be positive".into());
        }
        if self.query_dim % self.attention_heads != 0 {
            return bad(format!(
                "query_dim {} not divisible by attention_heads {}",
                self.query_dim, self.attention_heads
            ));
        }
        if self.feature_grid.channels != self.query_dim {
            return bad(format!(
                "feature channels {} must equal query_dim {}",
                self.feature_grid.channels, self.query_dim
            ));
        }
        if self.query_dim % 4 != 0 {
            return bad(format!("query_dim {} must be a multiple of 4", self.query_dim));
        }
        if self.feature_grid.height == 0 || self.feature_grid.width == 0 {
            return bad("feature grid must be non-empty".into());
        }
        if self.num_object_classes == 0 || self.num_action_classes == 0 {
            return bad("class counts must be positive".into());
        }
        Ok(())
    }

    fn action_input_dim(&self) -> usize {
        match self.action_head {
            ActionHeadInput::Interaction => self.query_dim,
            ActionHeadInput::Concat => 2 * self.query_dim,
        }
    }
}

/// Backbone-equivalent feature map `[H', W', C']`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub grid: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        if grid.shape().len() != 3 {
            return Err(Error::shape("feature_map", grid.shape(), &[0, 0, 0]));
        }
        Ok(Self { grid })
    }

    /// `[H'·W', C']`, row index `i·W' + j`.
    pub fn flattened(&self) -> Tensor<T> {
        let s = self.grid.shape();
        self.grid.clone().reshape(vec![s[0] * s[1], s[2]]).expect("same element count")
    }
}

/// Fixed 2-D sinusoidal encoding: the first `C'/2` channels encode the row,
/// the rest the column.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding<T> {
    pub sequence: Tensor<T>,
}

impl<T: Real> PositionalEncoding<T> {
    pub fn sinusoidal(grid: FeatureGrid) -> Result<Self> {
        let FeatureGrid {
            height,
            width,
            channels,
        } = grid;
        if channels % 4 != 0 {
            return Err(Error::Config(format!("positional channels {channels} must be a multiple of 4")));
        }
        let half = channels / 2;
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                let y = (i + 1) as f64 / height as f64 * two_pi;
                let x = (j + 1) as f64 / width as f64 * two_pi;
                for coord in [y, x] {
                    for k in 0..half {
                        let freq = 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
                        let arg = coord / freq;
                        data.push(T::lit(if k % 2 == 0 { arg.sin() } else { arg.cos() }));
                    }
                }
            }
        }
        Ok(Self {
            sequence: Tensor::new(vec![height * width, channels], data)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepresentationKind {
    HoPair,
    Interaction,
}

/// `[N_q, C_q]` decoder output living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct RepresentationSet {
    pub kind: RepresentationKind,
    pub rows: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub human_boxes: Var,
    pub object_boxes: Var,
    pub object_logits: Var,
    pub action_logits: Var,
}

/// Detached per-query predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T> {
    /// `[N_q, 4]` as `(cx, cy, w, h)` in `(0, 1)`.
    pub human_boxes: Tensor<T>,
    pub object_boxes: Tensor<T>,
    /// `[N_q, N_o + 1]`; the last column is "no object".
    pub object_logits: Tensor<T>,
    /// `[N_q, N_a]` raw multi-label logits.
    pub action_logits: Tensor<T>,
}

impl<T: Real> PredictionSet<T> {
    pub fn from_tape(tape: &Tape<T>, vars: &PredictionVars) -> Self {
        Self {
            human_boxes: tape.value(vars.human_boxes).clone(),
            object_boxes: tape.value(vars.object_boxes).clone(),
            object_logits: tape.value(vars.object_logits).clone(),
            action_logits: tape.value(vars.action_logits).clone(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.human_boxes.rows()
    }

    pub fn human_box(&self, q: usize) -> [T; 4] {
        row4(&self.human_boxes, q)
    }

    pub fn object_box(&self, q: usize) -> [T; 4] {
        row4(&self.object_boxes, q)
    }
}

fn row4<T: Real>(t: &Tensor<T>, q: usize) -> [T; 4] {
    let r = t.row(q);
    [r[0], r[1], r[2], r[3]]
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub memory: Var,
    pub ho_reps: RepresentationSet,
    pub int_reps: RepresentationSet,
    pub preds: PredictionVars,
}

#[derive(Clone, Debug)]
pub struct HoiModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    pos: PositionalEncoding<T>,
    queries: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<Norm>,
    ho_decoder: Vec<DecoderLayer>,
    ho_norm: Option<Norm>,
    int_decoder: Vec<DecoderLayer>,
    int_norm: Option<Norm>,
    human_box: BoxHead,
    object_box: BoxHead,
    object_class: Linear,
    action: Linear,
}

impl<T: Real> HoiModel<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dim = config.query_dim;
        let heads = config.attention_heads;
        let mut store = ParamStore::new();

        let normal = Normal::new(0.0, QUERY_INIT_STD).expect("positive std");
        let q_data = (0..config.num_queries * dim).map(|_| T::lit(normal.sample(rng))).collect();
        let queries = store.add("queries", Tensor::new(vec![config.num_queries, dim], q_data)?)?;

        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            encoder.push(EncoderLayer::new(&mut store, &format!("encoder.{l}"), dim, heads, rng)?);
        }
        let encoder_norm = (config.encoder_layers > 0)
            .then(|| Norm::new(&mut store, "encoder.final_norm", dim))
            .transpose()?;
        let mut ho_decoder = Vec::new();
        for l in 0..config.decoder_layers {
            ho_decoder.push(DecoderLayer::new(&mut store, &format!("ho_decoder.{l}"), dim, heads, rng)?);
        }
        let ho_norm = (config.decoder_layers > 0)
            .then(|| Norm::new(&mut store, "ho_decoder.final_norm", dim))
            .transpose()?;
        let mut int_decoder = Vec::new();
        for l in 0..config.decoder_layers {
            int_decoder.push(DecoderLayer::new(&mut store, &format!("int_decoder.{l}"), dim, heads, rng)?);
        }
        let int_norm = (config.decoder_layers > 0)
            .then(|| Norm::new(&mut store, "int_decoder.final_norm", dim))
            .transpose()?;

        let human_box = BoxHead::new(&mut store, "head.human_box", dim, rng)?;
        let object_box = BoxHead::new(&mut store, "head.object_box", dim, rng)?;
        let object_class = Linear::new(&mut store, "head.object_class", dim, config.num_object_classes + 1, rng)?;
        let action = Linear::new(
            &mut store,
            "head.action",
            config.action_input_dim(),
            config.num_action_classes,
            rng,
        )?;
        let pos = PositionalEncoding::sinusoidal(config.feature_grid)?;
        Ok(Self {
            config,
            store,
            pos,
            queries,
            encoder,
            encoder_norm,
            ho_decoder,
            ho_norm,
            int_decoder,
            int_norm,
            human_box,
            object_box,
            object_class,
            action,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn positional_encoding(&self) -> &PositionalEncoding<T> {
        &self.pos
    }

    pub fn query_param(&self) -> ParamId {
        self.queries
    }

    /// Loads parameter values saved from a model with the same config.
    pub fn load_parameters(&mut self, checkpoint: &ParamStore<T>) -> Result<()> {
        self.store.copy_values_from(checkpoint)
    }

    fn check_feature_map(&self, fmap: &FeatureMap<T>) -> Result<()> {
        let g = self.config.feature_grid;
        let want = [g.height, g.width, g.channels];
        if fmap.grid.shape() != want {
            return Err(Error::shape("feature_map", fmap.grid.shape(), &want));
        }
        Ok(())
    }

    /// Places the flattened feature map and positional encoding on the tape.
    pub fn inputs(&self, tape: &mut Tape<T>, fmap: &FeatureMap<T>) -> Result<(Var, Var)> {
        self.check_feature_map(fmap)?;
        let x = tape.constant(fmap.flattened());
        let pos = tape.constant(self.pos.sequence.clone());
        Ok((x, pos))
    }

    /// Global memory `[H'·W', C']`.
    pub fn encode(&self, tape: &mut Tape<T>, features: Var, pos: Var) -> Result<Var> {
        let cells = self.config.feature_grid.cells();
        let want = [cells, self.config.query_dim];
        if tape.shape(features) != want || tape.shape(pos) != want {
            return Err(Error::shape("encode", tape.shape(features), &want));
        }
        let mut x = features;
        for layer in &self.encoder {
            x = layer.forward(tape, &self.store, x, pos)?;
        }
        if let Some(norm) = &self.encoder_norm {
            x = norm.forward(tape, &self.store, x)?;
        }
        Ok(x)
    }

    fn run_decoder(
        &self,
        tape: &mut Tape<T>,
        layers: &[DecoderLayer],
        norm: &Option<Norm>,
        target: Var,
        memory: Var,
        pos: Var,
    ) -> Result<Var> {
        let want = [self.config.num_queries, self.config.query_dim];
        if tape.shape(target) != want {
            return Err(Error::shape("decode", tape.shape(target), &want));
        }
        if tape.shape(memory) != tape.shape(pos) {
            return Err(Error::shape("decode", tape.shape(memory), tape.shape(pos)));
        }
        let keys = tape.add(memory, pos)?;
        let mut t = target;
        for layer in layers {
            t = layer.forward(tape, &self.store, t, memory, keys, true)?;
        }
        if let Some(norm) = norm {
            t = norm.forward(tape, &self.store, t)?;
        }
        Ok(t)
    }

    /// Learned HO-pair queries on the tape.
    pub fn queries(&self, tape: &mut Tape<T>) -> Var {
        tape.param(&self.store, self.queries)
    }

    pub fn decode_ho_pairs(&self, tape: &mut Tape<T>, queries: Var, memory: Var, pos: Var) -> Result<RepresentationSet> {
        let rows = self.run_decoder(tape, &self.ho_decoder, &self.ho_norm, queries, memory, pos)?;
        Ok(RepresentationSet {
            kind: RepresentationKind::HoPair,
            rows,
        })
    }

    /// Interaction queries are the pair representations themselves.
    pub fn decode_interactions(
        &self,
        tape: &mut Tape<T>,
        ho_reps: RepresentationSet,
        memory: Var,
        pos: Var,
    ) -> Result<RepresentationSet> {
        let rows = self.run_decoder(tape, &self.int_decoder, &self.int_norm, ho_reps.rows, memory, pos)?;
        Ok(RepresentationSet {
            kind: RepresentationKind::Interaction,
            rows,
        })
    }

    /// Human boxes, object boxes and object logits from pair representations.
    pub fn predict_ho(&self, tape: &mut Tape<T>, reps: RepresentationSet) -> Result<(Var, Var, Var)> {
        let hb = self.human_box.forward(tape, &self.store, reps.rows)?;
        let ob = self.object_box.forward(tape, &self.store, reps.rows)?;
        let ol = self.object_class.forward(tape, &self.store, reps.rows)?;
        Ok((hb, ob, ol))
    }

    /// Action logits for query-aligned representation sets.
    pub fn predict_actions(
        &self,
        tape: &mut Tape<T>,
        ho_reps: RepresentationSet,
        int_reps: RepresentationSet,
    ) -> Result<Var> {
        let input = match self.config.action_head {
            ActionHeadInput::Interaction => int_reps.rows,
            ActionHeadInput::Concat => {
                let (a, b) = (tape.shape(ho_reps.rows)[0], tape.shape(int_reps.rows)[0]);
                if a != b {
                    return Err(Error::shape("predict_actions", tape.shape(ho_reps.rows), tape.shape(int_reps.rows)));
                }
                tape.concat(&[ho_reps.rows, int_reps.rows], 1)?
            }
        };
        self.action_logits(tape, input)
    }

    /// Applies the action classifier to ready-made input rows; this is the
    /// path re-composed samples take.
    pub fn action_logits(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let want = self.config.action_input_dim();
        if tape.shape(input).len() != 2 || tape.shape(input)[1] != want {
            return Err(Error::shape("action_head", tape.shape(input), &[0, want]));
        }
        self.action.forward(tape, &self.store, input)
    }

    pub fn forward(&self, tape: &mut Tape<T>, fmap: &FeatureMap<T>) -> Result<ForwardVars> {
        let (x, pos) = self.inputs(tape, fmap)?;
        let memory = self.encode(tape, x, pos)?;
        let q = self.queries(tape);
        let ho_reps = self.decode_ho_pairs(tape, q, memory, pos)?;
        let int_reps = self.decode_interactions(tape, ho_reps, memory, pos)?;
        let (human_boxes, object_boxes, object_logits) = self.predict_ho(tape, ho_reps)?;
        let action_logits = self.predict_actions(tape, ho_reps, int_reps)?;
        Ok(ForwardVars {
            memory,
            ho_reps,
            int_reps,
            preds: PredictionVars {
                human_boxes,
                object_boxes,
                object_logits,
                action_logits,
            },
        })
    }

    /// Forward pass returning detached predictions.
    pub fn predict(&self, fmap: &FeatureMap<T>) -> Result<PredictionSet<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, fmap)?;
        Ok(PredictionSet::from_tape(&tape, &out.preds))
    }

    #[cfg(test)]
    pub(crate) fn zero_cross_attention_outputs(&mut self) {
        let layers: Vec<&layers::Attention> = self
            .ho_decoder
            .iter()
            .chain(&self.int_decoder)
            .map(|l| &l.cross_attn)
            .collect();
        let ids: Vec<ParamId> = layers.iter().flat_map(|a| std::iter::once(a.out.w).chain(a.out.b)).collect();
        for id in ids {
            for v in self.store.get_mut(id).value.data_mut() {
                *v = T::zero();
            }
        }
    }

    /// Decoder pass that skips cross-attention entirely.
    #[cfg(test)]
    pub(crate) fn decode_ho_pairs_without_memory(&self, tape: &mut Tape<T>, queries: Var, memory: Var, pos: Var) -> Result<Var> {
        let keys = tape.add(memory, pos)?;
        let mut t = queries;
        for layer in &self.ho_decoder {
            t = layer.forward(tape, &self.store, t, memory, keys, false)?;
        }
        if let Some(norm) = &self.ho_norm {
            t = norm.forward(tape, &self.store, t)?;
        }
        Ok(t)
    }
}
