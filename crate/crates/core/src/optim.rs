//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub learning_rate: T,
    pub weight_decay: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: T, weight_decay: T) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: T::lit(BETA1),
            beta2: T::lit(BETA2),
            eps: T::lit(EPSILON),
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step_where(store, |_| true)
    }

    /// Updates only parameters whose name satisfies `trainable`; the others
    /// keep their values and moments.
    pub fn step_where(&mut self, store: &mut ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Result<()> {
        if store.len() != self.first_moment.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        for p in store.params_mut().iter().filter(|p| trainable(&p.name)) {
            if p.grad.is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let one = T::one();
        let bias1 = one - self.beta1.powi(t);
        let bias2 = one - self.beta2.powi(t);
        let lr = self.learning_rate;
        let decay = lr * self.weight_decay;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !trainable(&p.name) {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above").data();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w = *w - decay * *w;
                *w = *w - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
