//! Neural building blocks assembled from tape primitives.
//!
//! Blocks are plain structs holding [`ParamId`]s; they are constructed once
//! through a [`Scope`] (which fixes names, shapes and initial values) and
//! then applied any number of times through a [`Fwd`] pass context.

mod attention;
mod batchnorm;
mod channel_attention;
mod daspp;

pub use attention::{LayerNormP, Mhsa, TransformerBlock};
pub use batchnorm::BatchNorm2d;
pub use channel_attention::ChannelAttention;
pub use daspp::Daspp;

use crate::params::{Binding, Init, ParamId, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// Mutable state for one forward pass: the tape being built, the parameter
/// binding for this pass, and the store (written only for running-statistic
/// updates in training mode).
pub struct Fwd<'a, E: Scalar> {
    pub tape: &'a mut Tape<E>,
    pub bound: &'a Binding,
    pub store: &'a mut ParamStore<E>,
    pub train: bool,
}

impl<'a, E: Scalar> Fwd<'a, E> {
    pub fn p(&self, id: ParamId) -> Tensor {
        self.bound.get(id)
    }
}

/// 2-D convolution layer with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Scalar>(
        scope: &mut Scope<E>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        let mut s = scope.child(name);
        let w = s.param(
            "w",
            &[cout, cin, kernel, kernel],
            Init::KaimingUniform { fan_in: cin * kernel * kernel },
        );
        let b = Some(s.param("b", &[cout], Init::Zeros));
        Conv2dLayer { w, b, stride, padding, dilation }
    }

    /// All-zero weights and bias; used as the tail of additive residual
    /// branches so a fresh branch contributes nothing until trained.
    #[allow(clippy::too_many_arguments)]
    pub fn zeroed<E: Scalar>(
        scope: &mut Scope<E>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        let mut s = scope.child(name);
        let w = s.param("w", &[cout, cin, kernel, kernel], Init::Zeros);
        let b = Some(s.param("b", &[cout], Init::Zeros));
        Conv2dLayer { w, b, stride, padding, dilation }
    }

    pub fn forward<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.bound.get(b));
        f.tape.conv2d(x, w, b, self.stride, self.padding, self.dilation)
    }
}

/// Fully connected layer, weights stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Scalar>(scope: &mut Scope<E>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = scope.child(name);
        let w = s.param("w", &[in_dim, out_dim], Init::KaimingUniform { fan_in: in_dim });
        let b = s.param("b", &[out_dim], Init::Zeros);
        Linear { w, b, in_dim, out_dim }
    }

    /// All-zero variant for residual-branch tails.
    pub fn zeroed<E: Scalar>(scope: &mut Scope<E>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = scope.child(name);
        let w = s.param("w", &[in_dim, out_dim], Init::Zeros);
        let b = s.param("b", &[out_dim], Init::Zeros);
        Linear { w, b, in_dim, out_dim }
    }

    /// Apply to a `[M, in]` matrix.
    pub fn forward2d<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        let y = f.tape.matmul(x, f.p(self.w))?;
        f.tape.add_bias_cols(y, f.p(self.b))
    }

    /// Apply along the last axis of `[N, T, in]` token batches.
    pub fn forward_tokens<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.in_dim {
            return Err(TensorError::Invalid {
                op: "linear",
                msg: format!("expected [N,T,{}], got {shape:?}", self.in_dim),
            });
        }
        let (n, t) = (shape[0], shape[1]);
        let flat = f.tape.reshape(x, &[n * t, self.in_dim])?;
        let y = self.forward2d(f, flat)?;
        f.tape.reshape(y, &[n, t, self.out_dim])
    }
}

#[cfg(test)]
pub(crate) mod fdtest {
    use super::*;
    use crate::gradcheck::{FD_STEP, FD_TOL};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    /// Finite-difference check of `d sum(out * r) / d(input, params)` for a
    /// composed block, sampling up to `max_coords` coordinates. Panics with
    /// the offending coordinate on mismatch.
    pub fn fd_block(
        store: &mut crate::params::ParamStore<f64>,
        x_shape: &[usize],
        seed: u64,
        train: bool,
        max_coords: usize,
        forward: &dyn Fn(&mut Fwd<f64>, Tensor) -> Result<Tensor>,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x_len: usize = x_shape.iter().product();
        let x_data: Vec<f64> = (0..x_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let out_len = {
            let mut tape: Tape<f64> = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut *store, train };
            let x = f.tape.leaf(x_shape, x_data.clone()).unwrap();
            let y = forward(&mut f, x).unwrap();
            tape.numel(y)
        };
        let r: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Scalar objective for a given parameter state and input.
        let value = |store: &mut crate::params::ParamStore<f64>, xs: &[f64]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut *store, train };
            let x = f.tape.leaf(x_shape, xs.to_vec()).unwrap();
            let y = forward(&mut f, x).unwrap();
            let flat = f.tape.reshape(y, &[out_len]).unwrap();
            let rr = f.tape.leaf(&[out_len], r.clone()).unwrap();
            let prod = f.tape.mul(flat, rr).unwrap();
            let root = f.tape.sum_all(prod).unwrap();
            tape.data(root)[0]
        };

        // Analytic gradients for the input and every trainable parameter.
        let (x_grad, param_grads) = {
            let mut tape: Tape<f64> = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let trainable: Vec<_> =
                store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
            let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut *store, train };
            let x = f.tape.var(x_shape, x_data.clone()).unwrap();
            let y = forward(&mut f, x).unwrap();
            let flat = f.tape.reshape(y, &[out_len]).unwrap();
            let rr = f.tape.leaf(&[out_len], r.clone()).unwrap();
            let prod = f.tape.mul(flat, rr).unwrap();
            let root = f.tape.sum_all(prod).unwrap();
            tape.backward(root).unwrap();
            let xg = tape.grad(x).unwrap().to_vec();
            let pgs: Vec<(crate::params::ParamId, Vec<f64>)> = trainable
                .into_iter()
                .map(|pid| (pid, tape.grad(bound.get(pid)).unwrap().to_vec()))
                .collect();
            (xg, pgs)
        };

        // Candidate coordinates: slot usize::MAX is the input, others index
        // into `param_grads`.
        let mut coords: Vec<(usize, usize)> = Vec::new();
        for i in 0..x_len {
            coords.push((usize::MAX, i));
        }
        for (slot, (pid, _)) in param_grads.iter().enumerate() {
            for i in 0..store.get(*pid).data.len() {
                coords.push((slot, i));
            }
        }
        // Fisher-Yates prefix shuffle to sample without replacement.
        let take = max_coords.min(coords.len());
        for i in 0..take {
            let j = rng.gen_range(i..coords.len());
            coords.swap(i, j);
        }

        let mut checked = 0usize;
        for &(slot, idx) in coords.iter().take(take) {
            let (analytic, base) = if slot == usize::MAX {
                (x_grad[idx], x_data[idx])
            } else {
                let (pid, ref g) = param_grads[slot];
                (g[idx], store.get(pid).data[idx])
            };
            let h = FD_STEP * base.abs().max(1.0);
            let eval = |store: &mut crate::params::ParamStore<f64>, v: f64| -> f64 {
                if slot == usize::MAX {
                    let mut xs = x_data.clone();
                    xs[idx] = v;
                    value(store, &xs)
                } else {
                    let pid = param_grads[slot].0;
                    store.get_mut(pid).data[idx] = v;
                    let out = value(store, &x_data);
                    store.get_mut(pid).data[idx] = base;
                    out
                }
            };
            let plus = eval(store, base + h);
            let minus = eval(store, base - h);
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic, numeric);
            assert!(
                err <= FD_TOL,
                "slot {slot} coord {idx}: analytic {analytic} vs numeric {numeric} (rel {err})"
            );
            checked += 1;
        }
        assert!(checked > 0, "no coordinates checked");
    }
}
