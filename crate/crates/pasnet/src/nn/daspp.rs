//! Densely connected dilated-convolution pyramid.
//!
//! Each 3x3 branch sees the block input concatenated with every earlier
//! branch output, runs at its own dilation rate with matching padding (so
//! spatial size never changes), and a final 1x1 projection maps the full
//! concatenation back to the input width.

use super::{Conv2dLayer, Fwd};
use crate::params::Scope;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct Daspp {
    branches: Vec<Conv2dLayer>,
    project: Conv2dLayer,
    pub in_channels: usize,
    pub branch_channels: usize,
    pub rates: Vec<usize>,
}

impl Daspp {
    pub fn new<E: Scalar>(
        scope: &mut Scope<E>,
        name: &str,
        in_channels: usize,
        branch_channels: usize,
        rates: &[usize],
    ) -> Result<Self> {
        Self::build(scope, name, in_channels, branch_channels, rates, false)
    }

    /// Variant for the tail position of an additive residual branch: the
    /// final projection starts at zero so the branch is initially silent.
    pub fn new_residual<E: Scalar>(
        scope: &mut Scope<E>,
        name: &str,
        in_channels: usize,
        branch_channels: usize,
        rates: &[usize],
    ) -> Result<Self> {
        Self::build(scope, name, in_channels, branch_channels, rates, true)
    }

    fn build<E: Scalar>(
        scope: &mut Scope<E>,
        name: &str,
        in_channels: usize,
        branch_channels: usize,
        rates: &[usize],
        zero_project: bool,
    ) -> Result<Self> {
        if rates.is_empty() || rates.contains(&0) {
            return Err(TensorError::Invalid {
                op: "daspp",
                msg: format!("dilation rates must be non-empty and positive, got {rates:?}"),
            });
        }
        let mut s = scope.child(name);
        let mut branches = Vec::with_capacity(rates.len());
        for (k, &rate) in rates.iter().enumerate() {
            let cin = in_channels + k * branch_channels;
            branches.push(Conv2dLayer::new(
                &mut s,
                &format!("branch{k}"),
                cin,
                branch_channels,
                3,
                1,
                rate,
                rate,
            ));
        }
        let cat_channels = in_channels + rates.len() * branch_channels;
        let project = if zero_project {
            Conv2dLayer::zeroed(&mut s, "project", cat_channels, in_channels, 1, 1, 0, 1)
        } else {
            Conv2dLayer::new(&mut s, "project", cat_channels, in_channels, 1, 1, 0, 1)
        };
        Ok(Daspp { branches, project, in_channels, branch_channels, rates: rates.to_vec() })
    }

    pub fn forward<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(TensorError::Invalid {
                op: "daspp",
                msg: format!("expected [N,{},H,W], got {shape:?}", self.in_channels),
            });
        }
        let mut acc = x;
        for conv in &self.branches {
            let y = conv.forward(f, acc)?;
            let y = f.tape.relu(y)?;
            acc = f.tape.concat_channels(&[acc, y])?;
        }
        self.project.forward(f, acc)
    }
}
