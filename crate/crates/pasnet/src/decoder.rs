//! Saliency decoder: walks the feature pyramid coarse-to-fine, fusing each
//! deeper stage into the next shallower stream through a balance projection
//! and a residual channel-attention refinement, then maps to a
//! full-resolution sigmoid saliency map.

use crate::config::Config;
use crate::encoder::FeaturePyramid;
use crate::nn::{ChannelAttention, Conv2dLayer, Fwd};
use crate::params::Scope;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// One fusion step: upsample the deep features 2x, concatenate the shallow
/// stream, project back to `d_feat` and refine with channel attention.
#[derive(Debug, Clone)]
pub struct DecodeStage {
    balance: Conv2dLayer,
    theta: ChannelAttention,
}

impl DecodeStage {
    fn new<E: Scalar>(scope: &mut Scope<E>, name: &str, d_feat: usize, reduction: usize) -> Result<Self> {
        let mut s = scope.child(name);
        Ok(DecodeStage {
            balance: Conv2dLayer::new(&mut s, "balance", 2 * d_feat, d_feat, 1, 1, 0, 1),
            theta: ChannelAttention::new(&mut s, "theta", d_feat, reduction)?,
        })
    }

    pub fn forward<E: Scalar>(&self, f: &mut Fwd<E>, deep: Tensor, shallow: Tensor) -> Result<Tensor> {
        let d = f.tape.shape(deep).to_vec();
        let s = f.tape.shape(shallow).to_vec();
        if d.len() != 4 || s.len() != 4 || s[2] != 2 * d[2] || s[3] != 2 * d[3] {
            return Err(TensorError::Invalid {
                op: "decode_stage",
                msg: format!("shallow {s:?} must be exactly twice the deep grid {d:?}"),
            });
        }
        let up = f.tape.upsample_bilinear(deep, s[2], s[3])?;
        let cat = f.tape.concat_channels(&[up, shallow])?;
        let bal = self.balance.forward(f, cat)?;
        self.theta.forward(f, bal)
    }
}

/// Initial logit of the prediction head, `ln(p/(1-p))` for a foreground
/// prior of `p = 0.2`.  Salient regions cover a minority of most frames;
/// starting at the base rate instead of 0.5 keeps the first optimizer steps
/// from saturating every sigmoid toward the background class.
const HEAD_PRIOR_LOGIT: f64 = -1.3862943611198906;

#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<DecodeStage>,
    final_conv: Conv2dLayer,
}

impl Decoder {
    pub fn new<E: Scalar>(scope: &mut Scope<E>, cfg: &Config) -> Result<Self> {
        let mut s = scope.child("decoder");
        let stages = (0..3)
            .map(|i| DecodeStage::new(&mut s, &format!("stage{i}"), cfg.d_feat, cfg.reduction_ratio))
            .collect::<Result<Vec<_>>>()?;
        let final_conv = Conv2dLayer::new(&mut s, "final", cfg.d_feat, 1, 1, 1, 0, 1);
        if let Some(b) = final_conv.b {
            s.set_const(b, HEAD_PRIOR_LOGIT);
        }
        Ok(Decoder { stages, final_conv })
    }

    /// Fuse stage `i` of the walk; exposed so the composition contract can
    /// be exercised piecewise.
    pub fn stage<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        i: usize,
        deep: Tensor,
        shallow: Tensor,
    ) -> Result<Tensor> {
        self.stages[i].forward(f, deep, shallow)
    }

    /// Map fused half-resolution features to a `[N,1,out_h,out_w]` saliency
    /// map in (0, 1).
    pub fn finalize<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        fused: Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let logits = self.final_conv.forward(f, fused)?;
        let up = f.tape.upsample_bilinear(logits, out_h, out_w)?;
        f.tape.sigmoid(up)
    }

    pub fn decode<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        pyr: &FeaturePyramid,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let x = self.stage(f, 0, pyr.sigma, pyr.gamma)?;
        let x = self.stage(f, 1, x, pyr.beta)?;
        let x = self.stage(f, 2, x, pyr.alpha)?;
        self.finalize(f, x, out_h, out_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.d_feat = 3;
        cfg.reduction_ratio = 2;
        cfg
    }

    fn build(cfg: &Config, seed: u64) -> (ParamStore<f64>, Decoder) {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut scope = Scope::new(&mut store, &mut rng);
        let dec = Decoder::new(&mut scope, cfg).unwrap();
        (store, dec)
    }

    fn pyramid(tape: &mut Tape<f64>, d_feat: usize, base: usize, rng: &mut ChaCha20Rng) -> FeaturePyramid {
        let mut mk = |h: usize, w: usize| {
            let data: Vec<f64> = (0..d_feat * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            tape.leaf(&[1, d_feat, h, w], data).unwrap()
        };
        FeaturePyramid {
            alpha: mk(base / 2, base / 2),
            beta: mk(base / 4, base / 4),
            gamma: mk(base / 8, base / 8),
            sigma: mk(base / 16, base / 16),
        }
    }

    #[test]
    fn zero_parameters_emit_a_constant_half_map() {
        let cfg = small_cfg();
        let (mut store, dec) = build(&cfg, 1);
        store.fill_trainable(0.0);
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let pyr = pyramid(&mut tape, cfg.d_feat, 32, &mut rng);
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        let s = dec.decode(&mut f, &pyr, 32, 32).unwrap();
        assert!(
            tape.data(s).iter().all(|v| *v == 0.5),
            "zero logits must map to exactly one half"
        );
    }

    #[test]
    fn fresh_head_bias_encodes_the_foreground_prior() {
        // With the final weights silenced, a fresh decoder must emit exactly
        // the prior rate everywhere: sigmoid(ln(0.2/0.8)) = 0.2.
        let cfg = small_cfg();
        let (mut store, dec) = build(&cfg, 21);
        let wid = store.find("decoder.final.w").expect("head weight name");
        store.get_mut(wid).data.iter_mut().for_each(|v| *v = 0.0);
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let pyr = pyramid(&mut tape, cfg.d_feat, 32, &mut rng);
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        let s = dec.decode(&mut f, &pyr, 32, 32).unwrap();
        for v in tape.data(s) {
            assert!((v - 0.2).abs() < 1e-12, "prior rate, got {v}");
        }
    }

    #[test]
    fn saliency_is_full_resolution_and_strictly_inside_unit_range() {
        let cfg = small_cfg();
        let (mut store, dec) = build(&cfg, 3);
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let pyr = pyramid(&mut tape, cfg.d_feat, 32, &mut rng);
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        let s = dec.decode(&mut f, &pyr, 32, 32).unwrap();
        assert_eq!(f.tape.shape(s), &[1, 1, 32, 32]);
        assert!(tape.data(s).iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn stage_rejects_streams_off_the_two_to_one_ladder() {
        let cfg = small_cfg();
        let (mut store, dec) = build(&cfg, 5);
        let mut tape: Tape<f64> = Tape::new();
        let deep = tape.leaf(&[1, 3, 4, 4], vec![0.0; 48]).unwrap();
        let shallow = tape.leaf(&[1, 3, 12, 12], vec![0.0; 3 * 144]).unwrap();
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        assert!(dec.stage(&mut f, 0, deep, shallow).is_err());
    }

    #[test]
    fn decode_equals_the_piecewise_stage_composition() {
        let cfg = small_cfg();
        let (mut store, dec) = build(&cfg, 6);
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let pyr = pyramid(&mut tape, cfg.d_feat, 32, &mut rng);
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        let whole = dec.decode(&mut f, &pyr, 32, 32).unwrap();
        let x = dec.stage(&mut f, 0, pyr.sigma, pyr.gamma).unwrap();
        let x = dec.stage(&mut f, 1, x, pyr.beta).unwrap();
        let x = dec.stage(&mut f, 2, x, pyr.alpha).unwrap();
        let pieces = dec.finalize(&mut f, x, 32, 32).unwrap();
        assert_eq!(tape.data(whole), tape.data(pieces));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let (mut store, dec) = build(&cfg, 8);
        let d = cfg.d_feat;
        // Feed one leaf and slice it into the four pyramid levels so the
        // finite-difference harness can perturb a single input tensor.
        let lens = [16 * 16, 8 * 8, 4 * 4, 2 * 2].map(|hw: usize| d * hw);
        let total: usize = lens.iter().sum();
        crate::nn::fdtest::fd_block(&mut store, &[1, total, 1, 1], 9, false, 12, &move |f, x| {
            let mut offset = 0;
            let mut parts = Vec::new();
            for (hw, len) in [(16, lens[0]), (8, lens[1]), (4, lens[2]), (2, lens[3])] {
                let part = f.tape.slice_channels(x, offset, offset + len)?;
                parts.push(f.tape.reshape(part, &[1, d, hw, hw])?);
                offset += len;
            }
            let pyr = FeaturePyramid { alpha: parts[0], beta: parts[1], gamma: parts[2], sigma: parts[3] };
            dec.decode(f, &pyr, 32, 32)
        });
    }
}
