//! Batch normalization over `[N, C, H, W]` composed from tape primitives,
//! so the backward pass through the batch statistics comes for free.

use super::Fwd;
use crate::params::{ParamId, Scope};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

const BN_EPS: f64 = 1e-5;

/// Per-channel affine batch norm with running statistics.
///
/// Training mode normalizes with biased batch statistics and folds them into
/// the running mean/variance buffers (`new = (1-momentum)*old + momentum*batch`).
/// Eval mode normalizes with the stored buffers and records no statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new<E: Scalar>(
        scope: &mut Scope<E>,
        name: &str,
        channels: usize,
        momentum: f64,
    ) -> Self {
        let mut s = scope.child(name);
        BatchNorm2d {
            gamma: s.param("gamma", &[channels], crate::params::Init::Ones),
            beta: s.param("beta", &[channels], crate::params::Init::Zeros),
            running_mean: s.buffer("running_mean", &[channels], 0.0),
            running_var: s.buffer("running_var", &[channels], 1.0),
            momentum,
            channels,
        }
    }

    pub fn forward<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("expected [N,{},H,W], got {shape:?}", self.channels),
            });
        }
        if f.train {
            self.forward_train(f, x, &shape)
        } else {
            self.forward_eval(f, x)
        }
    }

    fn forward_train<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        x: Tensor,
        shape: &[usize],
    ) -> Result<Tensor> {
        let per_channel = shape[0] * shape[2] * shape[3];
        if per_channel < 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!(
                    "needs at least 2 values per channel to estimate variance, got {per_channel}"
                ),
            });
        }
        let mu = f.tape.mean_channels(x)?;
        let neg_mu = f.tape.neg(mu)?;
        let centered = f.tape.add_channels(x, neg_mu)?;
        let sq = f.tape.mul(centered, centered)?;
        let var = f.tape.mean_channels(sq)?;
        // Fold batch statistics into the buffers before normalizing; the
        // update itself stays off the tape.
        {
            let mu_v: Vec<f64> = f.tape.data(mu).iter().map(|v| Scalar::to_f64(*v)).collect();
            let var_v: Vec<f64> = f.tape.data(var).iter().map(|v| Scalar::to_f64(*v)).collect();
            let m = self.momentum;
            let rm = f.store.get_mut(self.running_mean);
            for (old, new) in rm.data.iter_mut().zip(&mu_v) {
                *old = E::from_f64((1.0 - m) * old.to_f64() + m * new);
            }
            let rv = f.store.get_mut(self.running_var);
            for (old, new) in rv.data.iter_mut().zip(&var_v) {
                *old = E::from_f64((1.0 - m) * old.to_f64() + m * new);
            }
        }
        let var_eps = f.tape.add_scalar(var, BN_EPS)?;
        let std = f.tape.sqrt(var_eps)?;
        let rstd = f.tape.recip(std)?;
        let scale = f.tape.mul(f.p(self.gamma), rstd)?;
        let y = f.tape.mul_channels(centered, scale)?;
        f.tape.add_channels(y, f.p(self.beta))
    }

    fn forward_eval<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        // y = x*s + (beta - mean*s) with s = gamma / sqrt(var + eps).
        let rm = f.p(self.running_mean);
        let rv = f.p(self.running_var);
        let var_eps = f.tape.add_scalar(rv, BN_EPS)?;
        let std = f.tape.sqrt(var_eps)?;
        let rstd = f.tape.recip(std)?;
        let scale = f.tape.mul(f.p(self.gamma), rstd)?;
        let shift_sub = f.tape.mul(rm, scale)?;
        let shift = f.tape.sub(f.p(self.beta), shift_sub)?;
        let y = f.tape.mul_channels(x, scale)?;
        f.tape.add_channels(y, shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn fresh(channels: usize, momentum: f64) -> (ParamStore<f64>, BatchNorm2d) {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut scope = Scope::new(&mut store, &mut rng);
        let bn = BatchNorm2d::new(&mut scope, "bn", channels, momentum);
        (store, bn)
    }

    #[test]
    fn training_pass_normalizes_each_channel() {
        let (mut store, bn) = fresh(2, 0.1);
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: true };
        // Channel 0: 1..=8 scaled; channel 1: constant offset pattern.
        let data: Vec<f64> = (0..16).map(|i| if i < 8 { i as f64 } else { 3.0 * i as f64 + 1.0 }).collect();
        let x = f.tape.leaf(&[2, 2, 2, 1], {
            // interleave channels per sample: [n0c0(2), n0c1(2), n1c0(2), n1c1(2)]
            let mut v = Vec::new();
            v.extend_from_slice(&data[0..2]);
            v.extend_from_slice(&data[8..10]);
            v.extend_from_slice(&data[2..4]);
            v.extend_from_slice(&data[10..12]);
            v
        })
        .unwrap();
        let y = bn.forward(&mut f, x).unwrap();
        let out = tape.data(y);
        // Per channel the normalized values must have ~zero mean and ~unit
        // variance (biased), since gamma=1 beta=0.
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..2).map(move |h| out[n * 4 + c * 2 + h]))
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let (mut store, bn) = fresh(1, 0.5);
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: true };
        let x = f.tape.leaf(&[1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        bn.forward(&mut f, x).unwrap();
        // batch mean 3, biased var 5; buffers start at (0, 1).
        let rm = store.get(bn.running_mean).data[0];
        let rv = store.get(bn.running_var).data[0];
        assert!((rm - 1.5).abs() < 1e-12, "running mean {rm}");
        assert!((rv - 3.0).abs() < 1e-12, "running var {rv}");
    }

    #[test]
    fn eval_uses_stored_statistics() {
        let (mut store, bn) = fresh(1, 0.1);
        store.get_mut(bn.running_mean).data[0] = 2.0;
        store.get_mut(bn.running_var).data[0] = 4.0;
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        let x = f.tape.leaf(&[1, 1, 1, 1], vec![4.0]).unwrap();
        let y = bn.forward(&mut f, x).unwrap();
        // (4 - 2) / sqrt(4 + 1e-5) ~= 1.0
        let got = tape.data(y)[0];
        assert!((got - 1.0).abs() < 1e-5, "expected ~1.0, got {got}");
    }

    #[test]
    fn gradients_flow_through_batch_statistics() {
        // Training-mode batch norm backpropagates through the mean and
        // variance of the batch itself; verify against central differences.
        let (mut store, bn) = fresh(3, 0.1);
        crate::nn::fdtest::fd_block(&mut store, &[2, 3, 3, 2], 31, true, 48, &|f, x| {
            bn.forward(f, x)
        });
    }

    #[test]
    fn eval_mode_gradients_treat_statistics_as_constants() {
        let (mut store, bn) = fresh(2, 0.1);
        store.get_mut(bn.running_mean).data.copy_from_slice(&[0.3, -0.2]);
        store.get_mut(bn.running_var).data.copy_from_slice(&[1.4, 0.6]);
        crate::nn::fdtest::fd_block(&mut store, &[1, 2, 2, 2], 32, false, 32, &|f, x| {
            bn.forward(f, x)
        });
    }

    #[test]
    fn training_rejects_single_value_channels() {
        let (mut store, bn) = fresh(1, 0.1);
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: true };
        let x = f.tape.leaf(&[1, 1, 1, 1], vec![4.0]).unwrap();
        assert!(bn.forward(&mut f, x).is_err());
    }
}
