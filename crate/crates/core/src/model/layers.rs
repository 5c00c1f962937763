//! Transformer building blocks. Every block is pre-norm: the residual
//! stream is normalized on the way into each sublayer, never on the way out.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Xavier-uniform weight `[fan_in, fan_out]`, zero bias.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut l = Self::without_bias(store, name, fan_in, fan_out, rng)?;
        l.b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?);
        Ok(l)
    }

    /// [`Linear::new`] without the bias.
    pub fn without_bias<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let data = (0..fan_in * fan_out).map(|_| T::lit(dist.sample(rng))).collect();
        let w = store.add(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], data)?)?;
        Ok(Self { w, b: None })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[dim], T::one()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    pub out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            // A key bias shifts every score of a row equally, which softmax
            // ignores.
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// Multi-head scaled dot-product attention of `query` rows over
    /// `key`/`value` rows.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var> {
        let head_dim = self.dim / self.heads;
        let q = self.q.forward(tape, store, query)?;
        let q = tape.scale(q, T::one() / T::from_usize(head_dim).unwrap().sqrt());
        let k = self.k.forward(tape, store, key)?;
        let v = self.v.forward(tape, store, value)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * head_dim, head_dim)?,
                    tape.slice(k, 1, h * head_dim, head_dim)?,
                    tape.slice(v, 1, h * head_dim, head_dim)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let weights = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        self.out.forward(tape, store, merged)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, hidden, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.l2.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng)?,
        })
    }

    /// Positional encoding offsets queries and keys, not values.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, pos: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let qk = tape.add(h, pos)?;
        let a = self.attn.forward(tape, store, qk, qk, h)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    pub cross_attn: Attention,
    norm3: Norm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dim)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm3: Norm::new(store, &format!("{name}.norm3"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng)?,
        })
    }

    /// `memory_keys` is the memory already offset by the positional encoding.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        target: Var,
        memory: Var,
        memory_keys: Var,
        with_cross_attention: bool,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, store, target)?;
        let a = self.self_attn.forward(tape, store, h, h, h)?;
        let mut t = tape.add(target, a)?;
        if with_cross_attention {
            let h = self.norm2.forward(tape, store, t)?;
            let c = self.cross_attn.forward(tape, store, h, memory_keys, memory)?;
            t = tape.add(t, c)?;
        }
        let h = self.norm3.forward(tape, store, t)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(t, f)
    }
}

/// Three linear layers with ReLU between, sigmoid on the way out.
#[derive(Clone, Debug)]
pub(crate) struct BoxHead {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl BoxHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, dim, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), dim, dim, rng)?,
            l3: Linear::new(store, &format!("{name}.l3"), dim, 4, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.l2.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.l3.forward(tape, store, h)?;
        Ok(tape.sigmoid(h))
    }
}
