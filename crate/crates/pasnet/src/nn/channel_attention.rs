//! Residual channel attention: a squeeze-excite gate added back onto the
//! input, `out = x + x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)`.

use super::{Fwd, Linear};
use crate::params::{ParamId, Scope};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new<E: Scalar>(
        scope: &mut Scope<E>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(TensorError::Invalid {
                op: "channel_attention",
                msg: format!("channels {channels} and reduction {reduction} must be positive"),
            });
        }
        // Bottleneck width rounds down but never collapses to zero.
        let hidden = (channels / reduction).max(1);
        let mut s = scope.child(name);
        Ok(ChannelAttention {
            fc1: Linear::new(&mut s, "fc1", channels, hidden),
            fc2: Linear::new(&mut s, "fc2", hidden, channels),
            channels,
        })
    }

    /// Parameter id of the second-layer bias (exposed for tests that force
    /// the gate towards zero).
    pub fn gate_bias(&self) -> ParamId {
        self.fc2.b
    }

    pub fn forward<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(TensorError::Invalid {
                op: "channel_attention",
                msg: format!("expected [N,{},H,W], got {shape:?}", self.channels),
            });
        }
        let pooled = f.tape.mean_spatial(x)?; // [N, C]
        let h = self.fc1.forward2d(f, pooled)?;
        let h = f.tape.relu(h)?;
        let gate = self.fc2.forward2d(f, h)?;
        let gate = f.tape.sigmoid(gate)?; // per-sample, per-channel in (0,1)
        let gated = f.tape.mul_channels(x, gate)?;
        f.tape.add(x, gated)
    }
}
