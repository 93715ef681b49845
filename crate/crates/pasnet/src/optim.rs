//! First/second-moment adaptive optimizer with bias correction, a geometric
//! learning-rate schedule, and optional global-norm gradient clipping.
//!
//! Moments are kept in `f64` regardless of the training element type so the
//! update rule itself never loses precision; parameters are rounded back to
//! the store's element type after each step.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient for {param} has a non-finite value at index {index}")]
    NonFinite { param: String, index: usize },
    #[error("gradient slot count {got} does not match the store's {want} parameters")]
    SlotCount { got: usize, want: usize },
    #[error("gradient for {param} has {got} values, parameter has {want}")]
    SlotLen { param: String, got: usize, want: usize },
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Learning rate after `epoch` whole-epoch decays: `lr0 · decay^epoch`.
pub fn lr_schedule(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. A `max_norm` of zero disables clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g {
                *v *= scale;
            }
        }
    }
    norm
}

/// Optimizer state: one moment pair per store entry (frozen entries keep
/// empty zeros and are never touched).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps; bias correction uses `t` after incrementing.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<E: Scalar>(store: &ParamStore<E>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect::<Vec<_>>();
        let v = m.clone();
        Adam { beta1, beta2, eps, t: 0, m, v }
    }

    /// One bias-corrected update. `grads` is aligned with store order; `None`
    /// slots (and non-trainable entries) are skipped. Any non-finite gradient
    /// aborts before any state is touched.
    pub fn step<E: Scalar>(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(OptimError::SlotCount { got: grads.len(), want: store.len() });
        }
        for (slot, (_, p)) in grads.iter().zip(store.iter()) {
            let Some(g) = slot else { continue };
            if !p.trainable {
                continue;
            }
            if g.len() != p.data.len() {
                return Err(OptimError::SlotLen {
                    param: p.name.clone(),
                    got: g.len(),
                    want: p.data.len(),
                });
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFinite { param: p.name.clone(), index });
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (slot, (_, p))) in grads.iter().zip(store.iter_mut()).enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = slot else { continue };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let cur = Scalar::to_f64(p.data[j]);
                p.data[j] = E::from_f64(cur - lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}
