//! Training loop: manifest loading, seeded per-epoch shuffling, batched
//! forward/backward passes, moment-based updates on the geometric learning
//! rate schedule, JSONL step logs, and per-epoch checkpoints that resume
//! bit-for-bit.
//!
//! The loop is single-pipeline: one batch is assembled, run, and applied at
//! a time, so a fixed seed fully determines every float in the run.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{Config, L2Variant, Mode};
use crate::data::{manifest, pnm, resize, DataError, PlanarImage};
use crate::loss::{self, LossCfg, LossReport};
use crate::model::{self, Model};
use crate::nn::Fwd;
use crate::optim::{clip_global_norm, lr_schedule, Adam, OptimError};
use crate::params::ParamStore;
use crate::tensor::{Tape, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("gradient audit failed; unpopulated trainable parameters: {}", .0.join(", "))]
    Audit(Vec<String>),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs_completed: u32,
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Logged totals in step order for this run (excludes pre-resume steps).
    pub step_losses: Vec<f64>,
}

/// One training sample, flattened to planar rows at the configured size.
struct Sample {
    rgb: Vec<f32>,
    gt: Vec<f32>,
    depth: Option<Vec<f32>>,
}

fn fit(img: PlanarImage, size: usize) -> PlanarImage {
    if img.height == size && img.width == size {
        img
    } else {
        resize::bilinear(&img, size, size)
    }
}

fn load_samples(cfg: &Config) -> Result<Vec<Sample>> {
    if cfg.train_manifest.is_empty() {
        return Err(TrainError::Config("train_manifest: no manifest path configured".into()));
    }
    let path = Path::new(&cfg.train_manifest);
    let entries = manifest::read_file(path)
        .map_err(|e| TrainError::Config(format!("train_manifest: {e}")))?;
    if entries.is_empty() {
        return Err(TrainError::Config(format!(
            "train_manifest: {} lists no samples",
            path.display()
        )));
    }
    let size = cfg.image_size;
    let mut samples = Vec::with_capacity(entries.len());
    for entry in &entries {
        let rgb = fit(pnm::read_file(&entry.rgb)?, size);
        if rgb.channels != 3 {
            return Err(TrainError::Config(format!(
                "{}: expected a 3-channel image, got {} channels",
                entry.rgb.display(),
                rgb.channels
            )));
        }
        let mut gt = fit(pnm::read_file(&entry.gt)?, size);
        if gt.channels != 1 {
            return Err(TrainError::Config(format!(
                "{}: ground truth must be single-channel",
                entry.gt.display()
            )));
        }
        // Binarize after resizing: interpolation blurs mask edges.
        gt.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
        let depth = match (&entry.depth, cfg.mode) {
            (Some(dp), _) => {
                let d = fit(pnm::read_file(dp)?, size);
                Some(d.data)
            }
            (None, Mode::M1ProvidedDepth) => {
                return Err(TrainError::Config(format!(
                    "depth: sample {} has no depth column, which mode m1_provided_depth requires",
                    entry.rgb.display()
                )));
            }
            (None, _) => None,
        };
        samples.push(Sample { rgb: rgb.data, gt: gt.data, depth });
    }
    Ok(samples)
}

/// Gather per-parameter gradients in store order as `f64`, zero-filling
/// trainable parameters the backward pass never reached.
fn collect_grads(
    tape: &Tape<f32>,
    bound: &crate::params::Binding,
    store: &ParamStore<f32>,
) -> Vec<Option<Vec<f64>>> {
    store
        .iter()
        .map(|(id, p)| {
            if !p.trainable {
                return None;
            }
            Some(match tape.grad(bound.get(id)) {
                Some(g) => g.iter().map(|v| *v as f64).collect(),
                None => vec![0.0; p.data.len()],
            })
        })
        .collect()
}

pub fn train(cfg: &Config, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let samples = load_samples(cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| TrainError::Io { path: out_dir.display().to_string(), source: e })?;

    let mut store: ParamStore<f32> = ParamStore::new();
    let model = Model::build(cfg, &mut store)?;
    let mut adam = Adam::new(&store, cfg.beta1, cfg.beta2, cfg.adam_eps);
    // The shuffle stream is separate from the init stream so adding a layer
    // never perturbs the data order.
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut start_epoch: u32 = 0;
    let mut global_step: u64 = 0;
    if let Some(path) = resume {
        let ck = checkpoint::load(path)?;
        let snap = Config::parse(&ck.config_text)
            .map_err(|e| CheckpointError::Corrupt(format!("config snapshot: {e}")))?;
        let diffs = checkpoint::architecture_mismatches(&snap, cfg);
        if !diffs.is_empty() {
            return Err(CheckpointError::Incompatible(format!(
                "config keys differ from the checkpoint snapshot: {}",
                diffs.join(", ")
            ))
            .into());
        }
        ck.restore_params(&mut store)?;
        ck.restore_adam(&mut adam)?;
        shuffle_rng = ck.rng();
        start_epoch = ck.epoch + 1;
        global_step = ck.step;
        log::info!("resumed from {} at epoch {start_epoch}, step {global_step}", path.display());
    }

    let log_path = out_dir.join("train_log.jsonl");
    let log_file = if resume.is_some() {
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        std::fs::File::create(&log_path)
    }
    .map_err(|e| TrainError::Io { path: log_path.display().to_string(), source: e })?;
    let mut log_out = std::io::BufWriter::new(log_file);

    let loss_cfg = LossCfg::from(cfg);
    let eps = loss_cfg.eps;
    let size = cfg.image_size;
    let mut step_losses = Vec::new();
    let mut final_loss = f64::NAN;
    let mut audited = false;
    let mut capped = false;
    let mut epochs_completed = start_epoch;

    for epoch in start_epoch..cfg.epochs as u32 {
        let lr = lr_schedule(cfg.lr, cfg.lr_decay, epoch as usize);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(cfg.batch_size) {
            global_step += 1;
            let b = chunk.len();
            let mut rgb = Vec::with_capacity(b * 3 * size * size);
            let mut gt = Vec::with_capacity(b * size * size);
            let mut depth = Vec::new();
            for &i in chunk {
                rgb.extend_from_slice(&samples[i].rgb);
                gt.extend_from_slice(&samples[i].gt);
                if cfg.mode == Mode::M1ProvidedDepth {
                    depth.extend_from_slice(samples[i].depth.as_ref().expect("checked at load"));
                }
            }

            let mut tape: Tape<f32> = Tape::new();
            let bound = store.bind(&mut tape)?;
            let rgb_t = tape.leaf(&[b, 3, size, size], rgb)?;
            let gt_t = tape.leaf(&[b, 1, size, size], gt)?;
            let depth_t = if cfg.mode == Mode::M1ProvidedDepth {
                Some(tape.leaf(&[b, 1, size, size], depth)?)
            } else {
                None
            };

            let mut f = Fwd { tape: &mut tape, bound: &bound, store: &mut store, train: true };
            let out = model.forward(&mut f, rgb_t, depth_t)?;
            if f.tape.data(out.saliency).iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Diverged {
                    step: global_step,
                    detail: "prediction contains non-finite values".into(),
                });
            }
            let terms = match cfg.l2_variant {
                L2Variant::Prediction => {
                    loss::total_loss(f.tape, out.saliency, gt_t, rgb_t, &loss_cfg)?
                }
                L2Variant::Parameters => {
                    let l2 = loss::param_l2(f.tape, f.bound, f.store)?;
                    loss::total_loss_with_l2(f.tape, out.saliency, gt_t, rgb_t, l2, &loss_cfg)?
                }
            };
            let report = terms.report(f.tape, &eps);
            if !report.total.is_finite() {
                return Err(TrainError::Diverged {
                    step: global_step,
                    detail: format!("total loss is {}", report.total),
                });
            }
            tape.backward(terms.total)?;
            if !audited {
                let missing = model::gradient_audit(&tape, &bound, &store);
                if !missing.is_empty() {
                    return Err(TrainError::Audit(missing));
                }
                audited = true;
            }

            let mut grads = collect_grads(&tape, &bound, &store);
            drop(tape);
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut store, &grads, lr).map_err(|e| match e {
                OptimError::NonFinite { .. } => {
                    TrainError::Diverged { step: global_step, detail: e.to_string() }
                }
                other => TrainError::Optim(other),
            })?;

            write_log_line(&mut log_out, &log_path, global_step, epoch, lr, &report)?;
            step_losses.push(report.total);
            final_loss = report.total;
            if cfg.max_steps > 0 && global_step >= cfg.max_steps as u64 {
                capped = true;
                break;
            }
        }

        if !capped {
            let ck = Checkpoint::capture(cfg, &store, &adam, epoch, global_step, &shuffle_rng);
            let path = out_dir.join(format!("ckpt_epoch_{epoch:04}.bin"));
            checkpoint::save(&path, &ck)?;
            epochs_completed = epoch + 1;
        }
        if capped {
            break;
        }
    }

    log_out
        .flush()
        .map_err(|e| TrainError::Io { path: log_path.display().to_string(), source: e })?;
    let final_path = out_dir.join("ckpt_final.bin");
    let last_epoch = epochs_completed.saturating_sub(1);
    let ck = Checkpoint::capture(cfg, &store, &adam, last_epoch, global_step, &shuffle_rng);
    checkpoint::save(&final_path, &ck)?;

    Ok(TrainSummary {
        steps: global_step,
        epochs_completed,
        final_loss,
        final_checkpoint: final_path,
        log_path,
        step_losses,
    })
}

fn write_log_line(
    out: &mut impl std::io::Write,
    path: &Path,
    step: u64,
    epoch: u32,
    lr: f64,
    report: &LossReport,
) -> Result<()> {
    // Key order is part of the log contract; floats print in shortest
    // round-trip form so the totals can be re-audited from the file.
    writeln!(
        out,
        "{{\"step\":{step},\"epoch\":{epoch},\"lr\":{lr},\"st\":{},\"ssim\":{},\"l2\":{},\"se\":{},\"total\":{}}}",
        report.st, report.ssim, report.l2, report.se, report.total
    )
    .and_then(|_| out.flush())
    .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
}
