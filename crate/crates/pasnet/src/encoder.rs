//! Four-stream feature encoder.
//!
//! A two-block convolutional stem yields half- and quarter-resolution
//! features; both are pooled onto the 1/16 token grid and run through
//! transformer blocks with a dense re-concatenation between the two tap
//! points, producing 1/8 and 1/16 streams. A three-layer conv+BN+ReLU head
//! equalizes every stream to `d_feat` channels, and an optional pyramid
//! block refines each stream with dilated-conv/self-attention chains behind
//! an additive skip.

use crate::config::Config;
use crate::nn::{BatchNorm2d, Conv2dLayer, Daspp, Fwd, Mhsa, TransformerBlock};
use crate::params::Scope;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// The four feature streams at 1/2, 1/4, 1/8 and 1/16 of the input
/// resolution, each with `d_feat` channels once the heads have run.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub gamma: Tensor,
    pub sigma: Tensor,
}

impl FeaturePyramid {
    pub fn streams(&self) -> [Tensor; 4] {
        [self.alpha, self.beta, self.gamma, self.sigma]
    }
}

/// Flatten `[N, C, H, W]` into `[N, H*W, C]` token sequences.
pub fn to_tokens<E: Scalar>(tape: &mut Tape<E>, x: Tensor) -> Result<Tensor> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(TensorError::Invalid { op: "to_tokens", msg: format!("expected rank 4, got {s:?}") });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let x = tape.reshape(x, &[n, c, h * w, 1])?;
    let x = tape.permute_0213(x)?; // [n, h*w, c, 1]
    tape.reshape(x, &[n, h * w, c])
}

/// Restore `[N, T, C]` tokens onto their `[N, C, gh, gw]` grid.
pub fn from_tokens<E: Scalar>(
    tape: &mut Tape<E>,
    x: Tensor,
    gh: usize,
    gw: usize,
) -> Result<Tensor> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != gh * gw {
        return Err(TensorError::Invalid {
            op: "from_tokens",
            msg: format!("expected [N,{},C], got {s:?}", gh * gw),
        });
    }
    let (n, t, c) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[n, t, c, 1])?;
    let x = tape.permute_0213(x)?; // [n, c, t, 1]
    tape.reshape(x, &[n, c, gh, gw])
}

/// Downsampling residual unit: strided conv+BN+ReLU, then a two-conv
/// residual refinement at the new resolution.
#[derive(Debug, Clone)]
struct StemBlock {
    down: Conv2dLayer,
    bn_down: BatchNorm2d,
    res1: Conv2dLayer,
    bn1: BatchNorm2d,
    res2: Conv2dLayer,
    bn2: BatchNorm2d,
}

impl StemBlock {
    fn new<E: Scalar>(scope: &mut Scope<E>, name: &str, cin: usize, cout: usize, momentum: f64) -> Self {
        let mut s = scope.child(name);
        StemBlock {
            down: Conv2dLayer::new(&mut s, "down", cin, cout, 3, 2, 1, 1),
            bn_down: BatchNorm2d::new(&mut s, "bn_down", cout, momentum),
            res1: Conv2dLayer::new(&mut s, "res1", cout, cout, 3, 1, 1, 1),
            bn1: BatchNorm2d::new(&mut s, "bn1", cout, momentum),
            res2: Conv2dLayer::new(&mut s, "res2", cout, cout, 3, 1, 1, 1),
            bn2: BatchNorm2d::new(&mut s, "bn2", cout, momentum),
        }
    }

    fn forward<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        let y = self.down.forward(f, x)?;
        let y = self.bn_down.forward(f, y)?;
        let y = f.tape.relu(y)?;
        let r = self.res1.forward(f, y)?;
        let r = self.bn1.forward(f, r)?;
        let r = f.tape.relu(r)?;
        let r = self.res2.forward(f, r)?;
        let r = self.bn2.forward(f, r)?;
        let out = f.tape.add(y, r)?;
        f.tape.relu(out)
    }
}

/// Three conv+BN+ReLU layers (kernels 3, 1, 1) mapping any channel count to
/// `d_feat` at unchanged resolution.
#[derive(Debug, Clone)]
struct TransHead {
    layers: Vec<(Conv2dLayer, BatchNorm2d)>,
}

impl TransHead {
    fn new<E: Scalar>(scope: &mut Scope<E>, name: &str, cin: usize, d_feat: usize, momentum: f64) -> Self {
        let mut s = scope.child(name);
        let specs = [(cin, 3usize, 1usize), (d_feat, 1, 0), (d_feat, 1, 0)];
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &(ci, k, p))| {
                (
                    Conv2dLayer::new(&mut s, &format!("conv{i}"), ci, d_feat, k, 1, p, 1),
                    BatchNorm2d::new(&mut s, &format!("bn{i}"), d_feat, momentum),
                )
            })
            .collect();
        TransHead { layers }
    }

    fn forward<E: Scalar>(&self, f: &mut Fwd<E>, x: Tensor) -> Result<Tensor> {
        let mut y = x;
        for (conv, bn) in &self.layers {
            y = conv.forward(f, y)?;
            y = bn.forward(f, y)?;
            y = f.tape.relu(y)?;
        }
        Ok(y)
    }
}

/// Per-invocation counters for the pyramid block, indexed by stream.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PyramidTrace {
    pub daspp: [usize; 4],
    pub mhsa: [usize; 4],
}

/// One refinement chain: dilated-conv pyramids followed by self-attention
/// rounds, added back onto the stream input.
#[derive(Debug, Clone)]
struct StreamChain {
    daspps: Vec<Daspp>,
    mhsas: Vec<Mhsa>,
}

/// Pyramid refinement over all four streams with the fixed per-stream
/// schedule (3,1), (2,1), (1,1), (1,0) of (dilated-conv, attention) rounds.
#[derive(Debug, Clone)]
pub struct PyramidAttend {
    streams: Vec<StreamChain>,
}

/// (DASPP rounds, MHSA rounds) for streams alpha, beta, gamma, sigma.
pub const PYRAMID_SCHEDULE: [(usize, usize); 4] = [(3, 1), (2, 1), (1, 1), (1, 0)];

impl PyramidAttend {
    pub fn new<E: Scalar>(scope: &mut Scope<E>, cfg: &Config) -> Result<Self> {
        let mut s = scope.child("pyramid");
        let mut streams = Vec::with_capacity(4);
        for (n, &(n_daspp, n_mhsa)) in PYRAMID_SCHEDULE.iter().enumerate() {
            let mut sc = s.child(&format!("stream{n}"));
            // The last op of each chain is zero-initialised so the whole
            // refinement starts as an identity over its skip connection;
            // anything else lets the untrained chain drown the stream in
            // normalised noise before the decoder can use it.
            let daspps = (0..n_daspp)
                .map(|k| {
                    let name = format!("daspp{k}");
                    if n_mhsa == 0 && k + 1 == n_daspp {
                        Daspp::new_residual(
                            &mut sc,
                            &name,
                            cfg.d_feat,
                            cfg.daspp_branch_channels,
                            &cfg.daspp_rates,
                        )
                    } else {
                        Daspp::new(
                            &mut sc,
                            &name,
                            cfg.d_feat,
                            cfg.daspp_branch_channels,
                            &cfg.daspp_rates,
                        )
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mhsas = (0..n_mhsa)
                .map(|k| {
                    let name = format!("mhsa{k}");
                    if k + 1 == n_mhsa {
                        Mhsa::new_residual(&mut sc, &name, cfg.d_feat, cfg.mhsa_heads)
                    } else {
                        Mhsa::new(&mut sc, &name, cfg.d_feat, cfg.mhsa_heads)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            streams.push(StreamChain { daspps, mhsas });
        }
        Ok(PyramidAttend { streams })
    }

    pub fn forward<E: Scalar>(&self, f: &mut Fwd<E>, pyr: FeaturePyramid) -> Result<FeaturePyramid> {
        let mut trace = PyramidTrace::default();
        self.forward_traced(f, pyr, &mut trace)
    }

    pub fn forward_traced<E: Scalar>(
        &self,
        f: &mut Fwd<E>,
        pyr: FeaturePyramid,
        trace: &mut PyramidTrace,
    ) -> Result<FeaturePyramid> {
        let ins = pyr.streams();
        let mut outs = [pyr.alpha; 4];
        for (n, (chain, &x)) in self.streams.iter().zip(ins.iter()).enumerate() {
            let mut y = x;
            for d in &chain.daspps {
                y = d.forward(f, y)?;
                trace.daspp[n] += 1;
            }
            for m in &chain.mhsas {
                let s = f.tape.shape(y).to_vec();
                let tokens = to_tokens(f.tape, y)?;
                let attended = m.forward(f, tokens)?;
                y = from_tokens(f.tape, attended, s[2], s[3])?;
                trace.mhsa[n] += 1;
            }
            // Additive skip: zeroed chain parameters leave the stream as-is.
            outs[n] = f.tape.add(x, y)?;
        }
        Ok(FeaturePyramid { alpha: outs[0], beta: outs[1], gamma: outs[2], sigma: outs[3] })
    }
}

/// Stem, token stages and heads; the pyramid block is owned by the model so
/// ablations can drop it without touching the encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem1: StemBlock,
    stem2: StemBlock,
    proj1: Conv2dLayer,
    blocks_a: Vec<TransformerBlock>,
    proj2: Conv2dLayer,
    blocks_b: Vec<TransformerBlock>,
    head_alpha: TransHead,
    head_beta: TransHead,
    head_gamma: TransHead,
    head_sigma: TransHead,
    d_feat: usize,
}

impl Encoder {
    pub fn new<E: Scalar>(scope: &mut Scope<E>, cfg: &Config) -> Result<Self> {
        // Streams must land on 1/2 .. 1/16 of the input; the token grid is
        // the 1/16 grid, which pins the patch size.
        if cfg.patch_size != 16 {
            return Err(TensorError::Invalid {
                op: "encoder",
                msg: format!(
                    "the four-stream resolution contract places tokens on the 1/16 grid; \
                     patch_size must be 16, got {}",
                    cfg.patch_size
                ),
            });
        }
        if cfg.image_size % 16 != 0 {
            return Err(TensorError::Invalid {
                op: "encoder",
                msg: format!("image_size {} is not divisible by 16", cfg.image_size),
            });
        }
        let mut s = scope.child("encoder");
        let c = cfg.stem_channels;
        let m = cfg.bn_momentum;
        let stem1 = StemBlock::new(&mut s, "stem.block1", 3, c, m);
        let stem2 = StemBlock::new(&mut s, "stem.block2", c, 2 * c, m);
        // Token path: pooled stem features (c + 2c channels) projected to
        // token_dim, then re-concatenated with the first-tap tokens.
        let proj1 = Conv2dLayer::new(&mut s, "proj1", 3 * c, cfg.token_dim, 1, 1, 0, 1);
        let blocks_a = (0..cfg.tap_i)
            .map(|i| TransformerBlock::new(&mut s, &format!("block{}", i + 1), cfg.token_dim, cfg.mhsa_heads))
            .collect::<Result<Vec<_>>>()?;
        let proj2 = Conv2dLayer::new(&mut s, "proj2", 3 * c + cfg.token_dim, cfg.token_dim, 1, 1, 0, 1);
        let blocks_b = (cfg.tap_i..cfg.tap_j)
            .map(|i| TransformerBlock::new(&mut s, &format!("block{}", i + 1), cfg.token_dim, cfg.mhsa_heads))
            .collect::<Result<Vec<_>>>()?;
        let head_alpha = TransHead::new(&mut s, "head_alpha", c, cfg.d_feat, m);
        let head_beta = TransHead::new(&mut s, "head_beta", 2 * c, cfg.d_feat, m);
        let head_gamma = TransHead::new(&mut s, "head_gamma", cfg.token_dim, cfg.d_feat, m);
        let head_sigma = TransHead::new(&mut s, "head_sigma", cfg.token_dim, cfg.d_feat, m);
        Ok(Encoder {
            stem1,
            stem2,
            proj1,
            blocks_a,
            proj2,
            blocks_b,
            head_alpha,
            head_beta,
            head_gamma,
            head_sigma,
            d_feat: cfg.d_feat,
        })
    }

    pub fn forward<E: Scalar>(&self, f: &mut Fwd<E>, rgb: Tensor) -> Result<FeaturePyramid> {
        let shape = f.tape.shape(rgb).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::Invalid {
                op: "encoder",
                msg: format!("expected [N,3,H,W], got {shape:?}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(TensorError::Invalid {
                op: "encoder",
                msg: format!("input {h}x{w} is not divisible by 16"),
            });
        }
        let (gh, gw) = (h / 16, w / 16);

        let alpha_raw = self.stem1.forward(f, rgb)?; // [N, c, h/2, w/2]
        let beta_raw = self.stem2.forward(f, alpha_raw)?; // [N, 2c, h/4, w/4]

        // Pool both CNN streams onto the token grid and concatenate.
        let pa = f.tape.avg_pool2d(alpha_raw, 8, 8, 0)?;
        let pb = f.tape.avg_pool2d(beta_raw, 4, 4, 0)?;
        let cat1 = f.tape.concat_channels(&[pa, pb])?;
        let emb1 = self.proj1.forward(f, cat1)?;
        let mut tokens = to_tokens(f.tape, emb1)?;
        for blk in &self.blocks_a {
            tokens = blk.forward(f, tokens)?;
        }
        let gamma_tokens = from_tokens(f.tape, tokens, gh, gw)?;
        let gamma_raw = f.tape.upsample_bilinear(gamma_tokens, 2 * gh, 2 * gw)?;

        // Dense second stage: original pooled streams plus first-tap tokens.
        let cat2 = f.tape.concat_channels(&[pa, pb, gamma_tokens])?;
        let emb2 = self.proj2.forward(f, cat2)?;
        let mut tokens = to_tokens(f.tape, emb2)?;
        for blk in &self.blocks_b {
            tokens = blk.forward(f, tokens)?;
        }
        let sigma_raw = from_tokens(f.tape, tokens, gh, gw)?;

        let pyr = FeaturePyramid {
            alpha: self.head_alpha.forward(f, alpha_raw)?,
            beta: self.head_beta.forward(f, beta_raw)?,
            gamma: self.head_gamma.forward(f, gamma_raw)?,
            sigma: self.head_sigma.forward(f, sigma_raw)?,
        };
        self.check_contract(f, &pyr, h, w)?;
        Ok(pyr)
    }

    /// Stream `n` (1-based) must sit at input/2^n with `d_feat` channels.
    fn check_contract<E: Scalar>(
        &self,
        f: &Fwd<E>,
        pyr: &FeaturePyramid,
        h: usize,
        w: usize,
    ) -> Result<()> {
        for (n, t) in pyr.streams().iter().enumerate() {
            let s = f.tape.shape(*t);
            let div = 1 << (n + 1);
            if s[1] != self.d_feat || s[2] != h / div || s[3] != w / div {
                return Err(TensorError::Invalid {
                    op: "encoder",
                    msg: format!(
                        "stream {} violates the resolution contract: got {:?}, want [N,{},{},{}]",
                        n + 1,
                        s,
                        self.d_feat,
                        h / div,
                        w / div
                    ),
                });
            }
        }
        Ok(())
    }
}
