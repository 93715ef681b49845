//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown or duplicate keys are rejected by name
//! so typos cannot silently fall back to defaults. `render` produces a
//! canonical text form (fixed key order) that checkpoints embed, making
//! config round-trips byte-stable.

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { key: String, line: usize },
    #[error("line {line}: `{key}` expects {expected}, got `{value}`")]
    BadValue { key: String, value: String, expected: &'static str, line: usize },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { text: String, line: usize },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Which input/architecture variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Color input only; full pyramid attention.
    RgbOnly,
    /// Dataset depth maps fused into the deepest stream.
    M1ProvidedDepth,
    /// Depth estimated from the color image by the built-in branch.
    M2EstimatedDepth,
    /// Color input only and the pyramid attention block removed.
    M3NoPyramid,
}

impl Mode {
    pub fn uses_depth(self) -> bool {
        matches!(self, Mode::M1ProvidedDepth | Mode::M2EstimatedDepth)
    }

    pub fn uses_pyramid(self) -> bool {
        !matches!(self, Mode::M3NoPyramid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::RgbOnly => "rgb_only",
            Mode::M1ProvidedDepth => "m1_provided_depth",
            Mode::M2EstimatedDepth => "m2_estimated_depth",
            Mode::M3NoPyramid => "m3_no_pyramid",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "rgb_only" => Ok(Mode::RgbOnly),
            "m1_provided_depth" => Ok(Mode::M1ProvidedDepth),
            "m2_estimated_depth" => Ok(Mode::M2EstimatedDepth),
            "m3_no_pyramid" => Ok(Mode::M3NoPyramid),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the `l2` loss term is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2Variant {
    /// Mean squared error between prediction and ground truth (default).
    Prediction,
    /// Mean squared parameter norm (weight-decay style regularizer).
    Parameters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // Run
    pub seed: u64,
    pub mode: Mode,
    pub train_manifest: String,
    pub out_dir: String,
    // Model
    pub image_size: usize,
    pub patch_size: usize,
    pub stem_channels: usize,
    pub d_feat: usize,
    pub token_dim: usize,
    pub transformer_depth: usize,
    pub tap_i: usize,
    pub tap_j: usize,
    pub mhsa_heads: usize,
    pub daspp_rates: Vec<usize>,
    pub daspp_branch_channels: usize,
    pub reduction_ratio: usize,
    pub depth_channels: usize,
    pub depth_frozen: bool,
    pub bn_momentum: f64,
    // Loss
    pub eps_st: f64,
    pub eps_ssim: f64,
    pub eps_l2: f64,
    pub eps_se: f64,
    pub psi: f64,
    pub structure_window: usize,
    pub ssim_window: usize,
    pub l2_variant: L2Variant,
    // Optimizer
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub max_steps: usize,
    pub grad_clip: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            mode: Mode::RgbOnly,
            train_manifest: String::new(),
            out_dir: "out".into(),
            image_size: 64,
            patch_size: 16,
            stem_channels: 16,
            d_feat: 256,
            token_dim: 128,
            transformer_depth: 4,
            tap_i: 3,
            tap_j: 4,
            mhsa_heads: 4,
            daspp_rates: vec![1, 2, 4],
            daspp_branch_channels: 64,
            reduction_ratio: 4,
            depth_channels: 16,
            depth_frozen: false,
            bn_momentum: 0.1,
            eps_st: 0.2,
            eps_ssim: 0.3,
            eps_l2: 0.2,
            eps_se: 0.3,
            psi: 5.0,
            structure_window: 7,
            ssim_window: 7,
            l2_variant: L2Variant::Prediction,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 25,
            batch_size: 6,
            lr_decay: 0.9,
            max_steps: 0,
            grad_clip: 0.0,
        }
    }
}

macro_rules! parse_value {
    ($cfg:ident, $key:expr, $value:expr, $line:expr, { $($name:literal => $field:ident : $kind:tt),+ $(,)? }) => {
        match $key {
            $($name => {
                $cfg.$field = parse_kind!($kind, $key, $value, $line)?;
            })+
            _ => {
                return Err(ConfigError::UnknownKey { key: $key.to_string(), line: $line });
            }
        }
    };
}

macro_rules! parse_kind {
    (usize, $key:expr, $value:expr, $line:expr) => {
        $value.parse::<usize>().map_err(|_| ConfigError::BadValue {
            key: $key.into(),
            value: $value.into(),
            expected: "a non-negative integer",
            line: $line,
        })
    };
    (u64, $key:expr, $value:expr, $line:expr) => {
        $value.parse::<u64>().map_err(|_| ConfigError::BadValue {
            key: $key.into(),
            value: $value.into(),
            expected: "a non-negative integer",
            line: $line,
        })
    };
    (f64, $key:expr, $value:expr, $line:expr) => {
        $value.parse::<f64>().map_err(|_| ConfigError::BadValue {
            key: $key.into(),
            value: $value.into(),
            expected: "a number",
            line: $line,
        })
    };
    (bool, $key:expr, $value:expr, $line:expr) => {
        match $value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(ConfigError::BadValue {
                key: $key.into(),
                value: $value.into(),
                expected: "true or false",
                line: $line,
            }),
        }
    };
    (string, $key:expr, $value:expr, $line:expr) => {
        Ok::<String, ConfigError>($value.to_string())
    };
    (mode, $key:expr, $value:expr, $line:expr) => {
        $value.parse::<Mode>().map_err(|_| ConfigError::BadValue {
            key: $key.into(),
            value: $value.into(),
            expected: "rgb_only, m1_provided_depth, m2_estimated_depth or m3_no_pyramid",
            line: $line,
        })
    };
    (l2, $key:expr, $value:expr, $line:expr) => {
        match $value {
            "prediction" => Ok(L2Variant::Prediction),
            "parameters" => Ok(L2Variant::Parameters),
            _ => Err(ConfigError::BadValue {
                key: $key.into(),
                value: $value.into(),
                expected: "prediction or parameters",
                line: $line,
            }),
        }
    };
    (rates, $key:expr, $value:expr, $line:expr) => {
        $value
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| ConfigError::BadValue {
                key: $key.into(),
                value: $value.into(),
                expected: "a comma-separated list of positive integers",
                line: $line,
            })
    };
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => {
                    return Err(ConfigError::BadLine { text: line.to_string(), line: line_no })
                }
            };
            if seen.iter().any(|s| s == key) {
                return Err(ConfigError::DuplicateKey { key: key.to_string(), line: line_no });
            }
            seen.push(key.to_string());
            parse_value!(cfg, key, value, line_no, {
                "seed" => seed: u64,
                "mode" => mode: mode,
                "train_manifest" => train_manifest: string,
                "out_dir" => out_dir: string,
                "image_size" => image_size: usize,
                "patch_size" => patch_size: usize,
                "stem_channels" => stem_channels: usize,
                "d_feat" => d_feat: usize,
                "token_dim" => token_dim: usize,
                "transformer_depth" => transformer_depth: usize,
                "tap_i" => tap_i: usize,
                "tap_j" => tap_j: usize,
                "mhsa_heads" => mhsa_heads: usize,
                "daspp_rates" => daspp_rates: rates,
                "daspp_branch_channels" => daspp_branch_channels: usize,
                "reduction_ratio" => reduction_ratio: usize,
                "depth_channels" => depth_channels: usize,
                "depth_frozen" => depth_frozen: bool,
                "bn_momentum" => bn_momentum: f64,
                "eps_st" => eps_st: f64,
                "eps_ssim" => eps_ssim: f64,
                "eps_l2" => eps_l2: f64,
                "eps_se" => eps_se: f64,
                "psi" => psi: f64,
                "structure_window" => structure_window: usize,
                "ssim_window" => ssim_window: usize,
                "l2_variant" => l2_variant: l2,
                "lr" => lr: f64,
                "beta1" => beta1: f64,
                "beta2" => beta2: f64,
                "adam_eps" => adam_eps: f64,
                "epochs" => epochs: usize,
                "batch_size" => batch_size: usize,
                "lr_decay" => lr_decay: f64,
                "max_steps" => max_steps: usize,
                "grad_clip" => grad_clip: f64,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return fail(format!("image_size {} must be a positive multiple of 16", self.image_size));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.stem_channels == 0 || self.d_feat == 0 || self.token_dim == 0 {
            return fail("stem_channels, d_feat and token_dim must be positive".into());
        }
        if self.transformer_depth == 0 {
            return fail("transformer_depth must be positive".into());
        }
        if !(1 <= self.tap_i && self.tap_i < self.tap_j && self.tap_j <= self.transformer_depth) {
            return fail(format!(
                "taps must satisfy 1 <= tap_i < tap_j <= transformer_depth, got ({}, {}) with depth {}",
                self.tap_i, self.tap_j, self.transformer_depth
            ));
        }
        if self.mhsa_heads == 0
            || self.token_dim % self.mhsa_heads != 0
            || self.d_feat % self.mhsa_heads != 0
        {
            return fail(format!(
                "mhsa_heads {} must divide token_dim {} and d_feat {}",
                self.mhsa_heads, self.token_dim, self.d_feat
            ));
        }
        if self.daspp_rates.is_empty() || self.daspp_rates.contains(&0) {
            return fail(format!("daspp_rates must be non-empty and positive, got {:?}", self.daspp_rates));
        }
        if self.daspp_branch_channels == 0 {
            return fail("daspp_branch_channels must be positive".into());
        }
        if self.reduction_ratio == 0 {
            return fail("reduction_ratio must be positive".into());
        }
        if self.depth_channels == 0 {
            return fail("depth_channels must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum {} must lie in [0, 1]", self.bn_momentum));
        }
        for (name, v) in
            [("eps_st", self.eps_st), ("eps_ssim", self.eps_ssim), ("eps_l2", self.eps_l2), ("eps_se", self.eps_se)]
        {
            if !(v >= 0.0) {
                return fail(format!("{name} {v} must be >= 0"));
            }
        }
        if self.psi < 0.0 {
            return fail(format!("psi {} must be >= 0", self.psi));
        }
        if self.structure_window % 2 == 0 || self.structure_window == 0 {
            return fail(format!("structure_window {} must be odd", self.structure_window));
        }
        if self.ssim_window % 2 == 0 || self.ssim_window == 0 {
            return fail(format!("ssim_window {} must be odd", self.ssim_window));
        }
        if self.ssim_window > self.image_size {
            return fail(format!(
                "ssim_window {} exceeds image_size {}",
                self.ssim_window, self.image_size
            ));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr {} must be > 0", self.lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} {v} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps {} must be > 0", self.adam_eps));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        if self.grad_clip < 0.0 {
            return fail(format!("grad_clip {} must be >= 0", self.grad_clip));
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, parseable by `parse`.
    pub fn render(&self) -> String {
        let rates =
            self.daspp_rates.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
        let l2 = match self.l2_variant {
            L2Variant::Prediction => "prediction",
            L2Variant::Parameters => "parameters",
        };
        format!(
            "seed = {}\nmode = {}\ntrain_manifest = {}\nout_dir = {}\nimage_size = {}\npatch_size = {}\nstem_channels = {}\nd_feat = {}\ntoken_dim = {}\ntransformer_depth = {}\ntap_i = {}\ntap_j = {}\nmhsa_heads = {}\ndaspp_rates = {}\ndaspp_branch_channels = {}\nreduction_ratio = {}\ndepth_channels = {}\ndepth_frozen = {}\nbn_momentum = {}\neps_st = {}\neps_ssim = {}\neps_l2 = {}\neps_se = {}\npsi = {}\nstructure_window = {}\nssim_window = {}\nl2_variant = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\nepochs = {}\nbatch_size = {}\nlr_decay = {}\nmax_steps = {}\ngrad_clip = {}\n",
            self.seed,
            self.mode,
            self.train_manifest,
            self.out_dir,
            self.image_size,
            self.patch_size,
            self.stem_channels,
            self.d_feat,
            self.token_dim,
            self.transformer_depth,
            self.tap_i,
            self.tap_j,
            self.mhsa_heads,
            rates,
            self.daspp_branch_channels,
            self.reduction_ratio,
            self.depth_channels,
            self.depth_frozen,
            self.bn_momentum,
            self.eps_st,
            self.eps_ssim,
            self.eps_l2,
            self.eps_se,
            self.psi,
            self.structure_window,
            self.ssim_window,
            l2,
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.epochs,
            self.batch_size,
            self.lr_decay,
            self.max_steps,
            self.grad_clip,
        )
    }
}
