//! Training-state persistence: a little-endian binary holding a config
//! snapshot, every named parameter, optimizer moments, and the shuffle RNG
//! state, so a resumed run continues bit-for-bit where it stopped.
//!
//! Layout: magic `PASN`, format version, length-prefixed config text, epoch,
//! step, RNG (seed, word position, stream), parameter records, then moment
//! records. All integers little-endian; all arrays length-prefixed; floats
//! stored as `f64` bits (lossless for narrower training precisions).

use crate::config::Config;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PASN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Last completed epoch (0-based).
    pub epoch: u32,
    /// Optimizer steps completed.
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
    pub params: Vec<SavedParam>,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture<E: Scalar>(
        cfg: &Config,
        store: &ParamStore<E>,
        adam: &Adam,
        epoch: u32,
        step: u64,
        rng: &ChaCha20Rng,
    ) -> Checkpoint {
        let params = store
            .iter()
            .map(|(_, p)| SavedParam {
                name: p.name.clone(),
                shape: p.shape.clone(),
                trainable: p.trainable,
                data: p.data.iter().map(|v| Scalar::to_f64(*v)).collect(),
            })
            .collect();
        Checkpoint {
            config_text: cfg.render(),
            epoch,
            step,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
            params,
            adam_t: adam.t,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    /// Rebuild the shuffle RNG exactly where it was captured.
    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Copy saved values into a freshly built store. Entries must match
    /// one-for-one in order, name, and shape.
    pub fn restore_params<E: Scalar>(&self, store: &mut ParamStore<E>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(CheckpointError::Incompatible(format!(
                "model has {} parameters, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        for (saved, (_, p)) in self.params.iter().zip(store.iter_mut()) {
            if saved.name != p.name || saved.shape != p.shape {
                return Err(CheckpointError::Incompatible(format!(
                    "parameter {} {:?} vs checkpoint {} {:?}",
                    p.name, p.shape, saved.name, saved.shape
                )));
            }
            p.data = saved.data.iter().map(|v| E::from_f64(*v)).collect();
            p.trainable = saved.trainable;
        }
        Ok(())
    }

    /// Copy saved moments into an optimizer built for the same store.
    pub fn restore_adam(&self, adam: &mut Adam) -> Result<()> {
        if adam.m.len() != self.adam_m.len() {
            return Err(CheckpointError::Incompatible(format!(
                "optimizer tracks {} parameters, checkpoint has {}",
                adam.m.len(),
                self.adam_m.len()
            )));
        }
        adam.t = self.adam_t;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        Ok(())
    }
}

/// Architecture-shaping config keys that must agree between a checkpoint's
/// snapshot and the runtime config; differing keys are returned by name.
pub fn architecture_mismatches(a: &Config, b: &Config) -> Vec<&'static str> {
    let mut out = Vec::new();
    if a.mode != b.mode {
        out.push("mode");
    }
    if a.image_size != b.image_size {
        out.push("image_size");
    }
    if a.patch_size != b.patch_size {
        out.push("patch_size");
    }
    if a.stem_channels != b.stem_channels {
        out.push("stem_channels");
    }
    if a.d_feat != b.d_feat {
        out.push("d_feat");
    }
    if a.token_dim != b.token_dim {
        out.push("token_dim");
    }
    if a.transformer_depth != b.transformer_depth {
        out.push("transformer_depth");
    }
    if a.tap_i != b.tap_i {
        out.push("tap_i");
    }
    if a.tap_j != b.tap_j {
        out.push("tap_j");
    }
    if a.mhsa_heads != b.mhsa_heads {
        out.push("mhsa_heads");
    }
    if a.daspp_rates != b.daspp_rates {
        out.push("daspp_rates");
    }
    if a.daspp_branch_channels != b.daspp_branch_channels {
        out.push("daspp_branch_channels");
    }
    if a.reduction_ratio != b.reduction_ratio {
        out.push("reduction_ratio");
    }
    if a.depth_channels != b.depth_channels {
        out.push("depth_channels");
    }
    out
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, ck.config_text.as_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&ck.rng_seed);
    out.extend_from_slice(&ck.rng_word_pos.to_le_bytes());
    out.extend_from_slice(&ck.rng_stream.to_le_bytes());
    out.extend_from_slice(&(ck.params.len() as u64).to_le_bytes());
    for p in &ck.params {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.push(p.trainable as u8);
        put_f64s(&mut out, &p.data);
    }
    out.extend_from_slice(&ck.adam_t.to_le_bytes());
    out.extend_from_slice(&(ck.adam_m.len() as u64).to_le_bytes());
    for (m, v) in ck.adam_m.iter().zip(&ck.adam_v) {
        put_f64s(&mut out, m);
        put_f64s(&mut out, v);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
    fn counted(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        // Sanity bound: no field can be longer than the file itself.
        if n as usize > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{what} length {n} exceeds file size")));
        }
        Ok(n as usize)
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.counted(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.counted(what)?;
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let config_text = c.string("config")?;
    let epoch = c.u32("epoch")?;
    let step = c.u64("step")?;
    let rng_seed: [u8; 32] = c.take(32, "rng seed")?.try_into().unwrap();
    let rng_word_pos = c.u128("rng word position")?;
    let rng_stream = c.u64("rng stream")?;
    let n_params = c.counted("parameter count")?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = c.string("parameter name")?;
        let ndim = c.u32("shape rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("shape dim")? as usize);
        }
        let trainable = c.take(1, "trainable flag")?[0] != 0;
        let data = c.f64s("parameter data")?;
        params.push(SavedParam { name, shape, trainable, data });
    }
    let adam_t = c.u64("optimizer step count")?;
    let n_moments = c.counted("moment count")?;
    let mut adam_m = Vec::with_capacity(n_moments);
    let mut adam_v = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        adam_m.push(c.f64s("first moment")?);
        adam_v.push(c.f64s("second moment")?);
    }
    if c.at != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after the last record",
            bytes.len() - c.at
        )));
    }
    Ok(Checkpoint {
        config_text,
        epoch,
        step,
        rng_seed,
        rng_word_pos,
        rng_stream,
        params,
        adam_t,
        adam_m,
        adam_v,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck))
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    decode(&bytes)
}
