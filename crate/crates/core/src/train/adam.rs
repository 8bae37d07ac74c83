use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moments are kept per parameter in store
/// order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("optimizer tracks {} tensors, store has {}", self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (((x, mi), vi), &gi) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                let gf = gi.as_f64();
                let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
                *mi = T::from_f64_lossy(mf);
                *vi = T::from_f64_lossy(vf);
                let upd = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *x = T::from_f64_lossy(x.as_f64() - upd);
            }
        }
        Ok(())
    }
}
