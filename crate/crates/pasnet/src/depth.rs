//! Depth branch: estimates a depth map from RGB, or featurizes an externally
//! supplied depth map, and fuses the resulting deep features into the
//! coarsest saliency stream.
//!
//! The trunk is a four-level strided conv encoder whose deepest features sit
//! on the same 1/16 grid as the coarsest saliency stream; a mirrored
//! upsample+conv decoder recovers a full-resolution sigmoid depth map for
//! supervision-free estimation. Both the estimated and the provided paths
//! share the trunk, the latter replicating its single channel to three so
//! the first conv sees the same arity.

use crate::nn::{BatchNorm2d, Conv2dLayer, Fwd};
use crate::params::Scope;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct DepthBranch {
    enc: Vec<(Conv2dLayer, BatchNorm2d)>,
    dec: Vec<Conv2dLayer>,
    out_conv: Conv2dLayer,
    channels: usize,
}

impl DepthBranch {
    pub fn new<E: Scalar>(scope: &mut Scope<E>, name: &str, channels: usize, momentum: f64) -> Self {
        let mut s = scope.child(name);
        let c = channels;
        let widths = [(3, c), (c, 2 * c), (2 * c, 4 * c), (4 * c, 4 * c)];
        let enc = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                (
                    Conv2dLayer::new(&mut s, &format!("enc{i}"), cin, cout, 3, 2, 1, 1),
                    BatchNorm2d::new(&mut s, &format!("enc_bn{i}"), cout, momentum),
                )
            })
            .collect();
        // Each level consumes the upsampled previous output concatenated
        // with the matching trunk level; the last level has no skip left.
        let dec_widths = [(4 * c + 4 * c, 2 * c), (2 * c + 2 * c, c), (c + c, c), (c, c)];
        let dec = dec_widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Conv2dLayer::new(&mut s, &format!("dec{i}"), cin, cout, 3, 1, 1, 1))
            .collect();
        let out_conv = Conv2dLayer::new(&mut s, "out", c, 1, 1, 1, 0, 1);
        DepthBranch { enc, dec, out_conv, channels }
    }

    /// Channel count of the deepest trunk features.
    pub fn feat_channels(&self) -> usize {
        4 * self.channels
    }

    fn trunk_levels<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Vec<Tensor>> {
        let mut y = x;
        let mut outs = Vec::with_capacity(self.enc.len());
        for (conv, bn) in &self.enc {
            y = conv.forward(f, y)?;
            y = bn.forward(f, y)?;
            y = f.tape.relu(y)?;
            outs.push(y);
        }
        Ok(outs)
    }

    fn trunk<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        Ok(*self.trunk_levels(f, x)?.last().expect("trunk has levels"))
    }

    /// Estimate depth from RGB: deepest trunk features on the 1/16 grid plus
    /// a full-resolution depth map in (0, 1).
    pub fn estimate<E: Scalar>(&self, f: &mut Fwd<E>, rgb: Tensor) -> Result<(Tensor, Tensor)> {
        let shape = f.tape.shape(rgb).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % 16 != 0 || shape[3] % 16 != 0 {
            return Err(TensorError::Invalid {
                op: "depth",
                msg: format!("expected [N,3,H,W] with H,W divisible by 16, got {shape:?}"),
            });
        }
        let levels = self.trunk_levels(f, rgb)?;
        let feat = *levels.last().expect("trunk has levels");
        let mut y = feat;
        for (i, conv) in self.dec.iter().enumerate() {
            let s = f.tape.shape(y).to_vec();
            y = f.tape.upsample_bilinear(y, 2 * s[2], 2 * s[3])?;
            if i + 2 <= levels.len() {
                // Skip connection from the trunk level at this resolution.
                y = f.tape.concat_channels(&[y, levels[levels.len() - 2 - i]])?;
            }
            y = conv.forward(f, y)?;
            y = f.tape.relu(y)?;
        }
        let logits = self.out_conv.forward(f, y)?;
        let map = f.tape.sigmoid(logits)?;
        Ok((feat, map))
    }

    /// Featurize an externally supplied depth map in [0, 1]: the single
    /// channel is replicated to three and sent through the shared trunk.
    pub fn featurize_provided<E: Scalar>(&self, f: &mut Fwd<E>, depth: Tensor) -> Result<Tensor> {
        let shape = f.tape.shape(depth).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(TensorError::Invalid {
                op: "depth",
                msg: format!("expected [N,1,H,W], got {shape:?}"),
            });
        }
        let bad = f
            .tape
            .data(depth)
            .iter()
            .map(|v| Scalar::to_f64(*v))
            .find(|v| !(0.0..=1.0).contains(v));
        if let Some(v) = bad {
            return Err(TensorError::Invalid {
                op: "depth",
                msg: format!("provided depth value {v} is outside [0, 1]"),
            });
        }
        let rep = f.tape.concat_channels(&[depth, depth, depth])?;
        self.trunk(f, rep)
    }
}

/// Concatenates the coarsest saliency stream with the depth features and
/// projects back to the stream width with a 1x1 conv.
#[derive(Debug, Clone)]
pub struct DepthFuse {
    conv: Conv2dLayer,
}

impl DepthFuse {
    pub fn new<E: Scalar>(scope: &mut Scope<E>, name: &str, d_feat: usize, depth_feat: usize) -> Self {
        let mut s = scope.child(name);
        DepthFuse { conv: Conv2dLayer::new(&mut s, "proj", d_feat + depth_feat, d_feat, 1, 1, 0, 1) }
    }

    pub fn forward<E: Scalar>(&self, f: &mut Fwd<E>, sigma: Tensor, depth_feat: Tensor) -> Result<Tensor> {
        let a = f.tape.shape(sigma).to_vec();
        let b = f.tape.shape(depth_feat).to_vec();
        if a.len() != 4 || b.len() != 4 || a[2] != b[2] || a[3] != b[3] {
            return Err(TensorError::Invalid {
                op: "depth_fuse",
                msg: format!("stream {a:?} and depth features {b:?} must share a grid"),
            });
        }
        let cat = f.tape.concat_channels(&[sigma, depth_feat])?;
        self.conv.forward(f, cat)
    }
}
