//! Full saliency model: encoder, optional pyramid refinement, optional
//! depth branch with fusion into the coarsest stream, and the decoder.
//!
//! Which sub-modules exist is decided by the run mode at build time, so a
//! checkpoint's parameter set is itself a record of the mode: rgb-only
//! builds carry no depth parameters, the no-pyramid ablation carries no
//! pyramid parameters.

use crate::config::{Config, Mode};
use crate::decoder::Decoder;
use crate::depth::{DepthBranch, DepthFuse};
use crate::encoder::{Encoder, FeaturePyramid, PyramidAttend, PyramidTrace};
use crate::nn::Fwd;
use crate::params::{Binding, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// Saliency map `[N,1,H,W]` in (0, 1).
    pub saliency: Tensor,
    /// Estimated depth `[N,1,H,W]`, present only when the mode estimates it.
    pub depth_map: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: Config,
    encoder: Encoder,
    pyramid: Option<PyramidAttend>,
    depth: Option<DepthBranch>,
    fuse: Option<DepthFuse>,
    decoder: Decoder,
}

impl Model {
    /// Build all parameters into `store`, seeded from the config. The same
    /// config and an empty store always produce the same initialization.
    pub fn build<E: Scalar>(cfg: &Config, store: &mut ParamStore<E>) -> Result<Model> {
        cfg.validate().map_err(|e| TensorError::Invalid { op: "model", msg: e.to_string() })?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut scope = Scope::new(store, &mut rng);
        let encoder = Encoder::new(&mut scope, cfg)?;
        let pyramid =
            if cfg.mode.uses_pyramid() { Some(PyramidAttend::new(&mut scope, cfg)?) } else { None };
        let (depth, fuse) = if cfg.mode.uses_depth() {
            let d = DepthBranch::new(&mut scope, "depth", cfg.depth_channels, cfg.bn_momentum);
            let fu = DepthFuse::new(&mut scope, "fuse", cfg.d_feat, d.feat_channels());
            (Some(d), Some(fu))
        } else {
            (None, None)
        };
        let decoder = Decoder::new(&mut scope, cfg)?;
        if cfg.depth_frozen {
            store.freeze_prefix("depth.");
        }
        Ok(Model { cfg: cfg.clone(), encoder, pyramid, depth, fuse, decoder })
    }

    /// Encoder plus (when present) pyramid refinement.
    pub fn encode<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        rgb: Tensor,
        trace: Option<&mut PyramidTrace>,
    ) -> Result<FeaturePyramid> {
        let pyr = self.encoder.forward(f, rgb)?;
        match (&self.pyramid, trace) {
            (Some(p), Some(t)) => p.forward_traced(f, pyr, t),
            (Some(p), None) => p.forward(f, pyr),
            (None, _) => Ok(pyr),
        }
    }

    /// Depth stage: returns the (possibly) fused coarse stream and the
    /// estimated depth map if this mode produces one. Without a depth
    /// branch this is a pure bypass — the returned stream IS `sigma`.
    pub fn fuse_stage<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        sigma: Tensor,
        rgb: Tensor,
        depth_in: Option<Tensor>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        match self.cfg.mode {
            Mode::RgbOnly | Mode::M3NoPyramid => Ok((sigma, None)),
            Mode::M1ProvidedDepth => {
                let d = depth_in.ok_or_else(|| TensorError::Invalid {
                    op: "model",
                    msg: "mode m1_provided_depth needs a depth map per sample".into(),
                })?;
                let branch = self.depth.as_ref().expect("depth branch exists in m1");
                let feat = branch.featurize_provided(f, d)?;
                let fused = self.fuse.as_ref().expect("fuse exists in m1").forward(f, sigma, feat)?;
                Ok((fused, None))
            }
            Mode::M2EstimatedDepth => {
                let branch = self.depth.as_ref().expect("depth branch exists in m2");
                let (feat, map) = branch.estimate(f, rgb)?;
                let fused = self.fuse.as_ref().expect("fuse exists in m2").forward(f, sigma, feat)?;
                Ok((fused, Some(map)))
            }
        }
    }

    pub fn forward<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        rgb: Tensor,
        depth_in: Option<Tensor>,
    ) -> Result<ModelOutput> {
        self.forward_traced(f, rgb, depth_in, None)
    }

    pub fn forward_traced<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        rgb: Tensor,
        depth_in: Option<Tensor>,
        trace: Option<&mut PyramidTrace>,
    ) -> Result<ModelOutput> {
        let shape = f.tape.shape(rgb).to_vec();
        let pyr = self.encode(f, rgb, trace)?;
        let (sigma, depth_map) = self.fuse_stage(f, pyr.sigma, rgb, depth_in)?;
        let pyr = FeaturePyramid { sigma, ..pyr };
        let saliency = self.decoder.decode(f, &pyr, shape[2], shape[3])?;
        Ok(ModelOutput { saliency, depth_map })
    }
}

/// Names of trainable parameters whose gradient is missing after a backward
/// pass; empty means every trainable parameter was populated.
pub fn gradient_audit<E: Scalar>(
    tape: &Tape<E>,
    bound: &Binding,
    store: &ParamStore<E>,
) -> Vec<String> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter(|(id, _)| tape.grad(bound.get(*id)).is_none())
        .map(|(_, p)| p.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_cfg(mode: Mode) -> Config {
        let mut cfg = Config::default();
        cfg.mode = mode;
        cfg.image_size = 32;
        cfg.stem_channels = 2;
        cfg.d_feat = 4;
        cfg.token_dim = 4;
        cfg.transformer_depth = 2;
        cfg.tap_i = 1;
        cfg.tap_j = 2;
        cfg.mhsa_heads = 2;
        cfg.daspp_rates = vec![1, 2];
        cfg.daspp_branch_channels = 2;
        cfg.reduction_ratio = 2;
        cfg.depth_channels = 2;
        cfg
    }

    fn rand_rgb(seed: u64, n: usize, size: usize) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n * 3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn run_forward(mode: Mode, seed: u64) -> (Vec<f64>, bool) {
        let cfg = tiny_cfg(mode);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::build(&cfg, &mut store).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        let x = f.tape.leaf(&[1, 3, 32, 32], rand_rgb(seed, 1, 32)).unwrap();
        let depth_in = if mode == Mode::M1ProvidedDepth {
            Some(f.tape.leaf(&[1, 1, 32, 32], vec![0.4; 32 * 32]).unwrap())
        } else {
            None
        };
        let out = model.forward(&mut f, x, depth_in).unwrap();
        assert_eq!(f.tape.shape(out.saliency), &[1, 1, 32, 32]);
        (tape.data(out.saliency).to_vec(), out.depth_map.is_some())
    }

    #[test]
    fn every_mode_yields_a_full_resolution_unit_range_map() {
        for mode in [Mode::RgbOnly, Mode::M1ProvidedDepth, Mode::M2EstimatedDepth, Mode::M3NoPyramid] {
            let (s, has_depth) = run_forward(mode, 7);
            assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0), "{mode:?} saliency out of range");
            assert_eq!(has_depth, mode == Mode::M2EstimatedDepth, "{mode:?} depth output");
        }
    }

    #[test]
    fn provided_depth_mode_requires_the_depth_input() {
        let cfg = tiny_cfg(Mode::M1ProvidedDepth);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::build(&cfg, &mut store).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        let x = f.tape.leaf(&[1, 3, 32, 32], rand_rgb(1, 1, 32)).unwrap();
        let err = model.forward(&mut f, x, None).unwrap_err();
        assert!(err.to_string().contains("depth map"), "got: {err}");
    }

    #[test]
    fn parameter_sets_mirror_the_mode() {
        let count = |mode: Mode, prefix: &str| {
            let cfg = tiny_cfg(mode);
            let mut store: ParamStore<f64> = ParamStore::new();
            Model::build(&cfg, &mut store).unwrap();
            store.iter().filter(|(_, p)| p.name.starts_with(prefix)).count()
        };
        assert!(count(Mode::RgbOnly, "pyramid.") > 0);
        assert_eq!(count(Mode::M3NoPyramid, "pyramid."), 0, "ablation must drop pyramid weights");
        assert_eq!(count(Mode::RgbOnly, "depth."), 0);
        assert!(count(Mode::M1ProvidedDepth, "depth.") > 0);
        assert!(count(Mode::M2EstimatedDepth, "fuse.") > 0);
    }

    #[test]
    fn bypass_returns_the_same_tensor_as_the_pyramid_only_forward() {
        let cfg = tiny_cfg(Mode::RgbOnly);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::build(&cfg, &mut store).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: false };
        let x = f.tape.leaf(&[1, 3, 32, 32], rand_rgb(2, 1, 32)).unwrap();
        let pyr = model.encode(&mut f, x, None).unwrap();
        let (sigma, map) = model.fuse_stage(&mut f, pyr.sigma, x, None).unwrap();
        assert_eq!(sigma, pyr.sigma, "bypass must hand back the identical tensor");
        assert!(map.is_none());
    }

    #[test]
    fn identical_seeds_build_identical_parameters_and_modes_differ() {
        let flat = |mode: Mode| {
            let cfg = tiny_cfg(mode);
            let mut store: ParamStore<f64> = ParamStore::new();
            Model::build(&cfg, &mut store).unwrap();
            let mut all = Vec::new();
            for (_, p) in store.iter() {
                all.extend_from_slice(&p.data);
            }
            all
        };
        assert_eq!(flat(Mode::RgbOnly), flat(Mode::RgbOnly));
        assert_ne!(
            flat(Mode::RgbOnly),
            flat(Mode::M2EstimatedDepth),
            "depth modes add parameters, so the flattened store must differ"
        );
    }

    #[test]
    fn frozen_depth_flag_removes_depth_weights_from_the_trainable_set() {
        let mut cfg = tiny_cfg(Mode::M2EstimatedDepth);
        cfg.depth_frozen = true;
        let mut store: ParamStore<f64> = ParamStore::new();
        Model::build(&cfg, &mut store).unwrap();
        let frozen_trainables = store
            .iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with("depth."))
            .count();
        assert_eq!(frozen_trainables, 0);
        // The fuse projection stays trainable so fusion can still adapt.
        assert!(store.iter().any(|(_, p)| p.trainable && p.name.starts_with("fuse.")));
    }

    #[test]
    fn backward_populates_every_trainable_parameter_in_each_mode() {
        for mode in [Mode::RgbOnly, Mode::M1ProvidedDepth, Mode::M2EstimatedDepth, Mode::M3NoPyramid] {
            let cfg = tiny_cfg(mode);
            let mut store: ParamStore<f64> = ParamStore::new();
            let model = Model::build(&cfg, &mut store).unwrap();
            let mut tape: Tape<f64> = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: true };
            let x = f.tape.leaf(&[2, 3, 32, 32], rand_rgb(3, 2, 32)).unwrap();
            let depth_in = if mode == Mode::M1ProvidedDepth {
                let mut rng = ChaCha20Rng::seed_from_u64(4);
                let d: Vec<f64> = (0..2 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
                Some(f.tape.leaf(&[2, 1, 32, 32], d).unwrap())
            } else {
                None
            };
            let out = model.forward(&mut f, x, depth_in).unwrap();
            let root = f.tape.mean_all(out.saliency).unwrap();
            tape.backward(root).unwrap();
            let missing = gradient_audit(&tape, &bound, &store);
            assert!(missing.is_empty(), "{mode:?} left gradients unpopulated: {missing:?}");
            if cfg.mode.uses_depth() {
                let moved = store.iter().any(|(id, p)| {
                    p.trainable
                        && p.name.starts_with("depth.")
                        && tape.grad(bound.get(id)).unwrap().iter().any(|g| *g != 0.0)
                });
                assert!(moved, "{mode:?} must push nonzero gradients into the depth branch");
            }
        }
    }
}
