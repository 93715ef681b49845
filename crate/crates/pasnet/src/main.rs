//! Command-line front end: train, infer, eval, gradcheck and synth
//! subcommands over a flat key=value config file.
//!
//! Exit codes are stable: 0 success, 1 generic failure (including eval runs
//! with unmatched files), 2 config/data errors, 3 training divergence,
//! 4 checkpoint errors, 5 gradient-check failures. Log verbosity comes from
//! the `RUST_LOG` environment variable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pasnet::checkpoint;
use pasnet::config::{Config, Mode};
use pasnet::data::{pnm, resize, synth, PlanarImage};
use pasnet::gradcheck;
use pasnet::metrics;
use pasnet::model::Model;
use pasnet::nn::Fwd;
use pasnet::params::ParamStore;
use pasnet::tensor::Tape;
use pasnet::trainer::{self, TrainError};

const EXIT_GENERIC: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "pasnet", about = "Salient-object detection: training, inference, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a manifest of rgb/ground-truth(/depth) files.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write one saliency map (P5, round(255·S)) per input image.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of P6 images; in m1 mode each `rgb*` file needs a
        /// matching `depth*` P5 sibling.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score predictions against ground truth; writes metrics.csv and
    /// summary.json next to the printed table.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report directory (defaults to the working directory).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Only used for its seed; architecture checks use fixed shapes.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated op names (default: every op plus the composite).
        #[arg(long)]
        ops: Option<String>,
    },
    /// Render a synthetic scene set plus manifest for desk-scale runs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene difficulty: `plain` (high figure/ground contrast) or
        /// `subtle` (overlapping palettes, clutter and noise).
        #[arg(long, default_value = "plain")]
        style: String,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Cmd::Infer { config, ckpt, input, output } => cmd_infer(&config, &ckpt, &input, &output),
        Cmd::Eval { pred, gt, out } => cmd_eval(&pred, &gt, &out),
        Cmd::Gradcheck { config, ops } => cmd_gradcheck(config.as_deref(), ops.as_deref()),
        Cmd::Synth { out, count, size, seed, style } => cmd_synth(&out, count, size, seed, &style),
    };
    ExitCode::from(code)
}

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    code
}

fn load_config(path: &Path) -> Result<Config, u8> {
    Config::from_file(path).map_err(|e| fail(EXIT_CONFIG, e))
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> u8 {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    match trainer::train(&cfg, resume) {
        Ok(summary) => {
            println!(
                "trained {} steps over {} epochs; final loss {:.6}; checkpoint {}",
                summary.steps,
                summary.epochs_completed,
                summary.final_loss,
                summary.final_checkpoint.display()
            );
            0
        }
        Err(e @ (TrainError::Config(_) | TrainError::Data(_))) => fail(EXIT_CONFIG, e),
        Err(e @ TrainError::Diverged { .. }) => fail(EXIT_DIVERGED, e),
        Err(e @ TrainError::Checkpoint(_)) => fail(EXIT_CHECKPOINT, e),
        Err(e) => fail(EXIT_GENERIC, e),
    }
}

/// Locate the depth sibling for an rgb input: `rgb*` → `depth*`, else
/// `<stem>.depth.pgm`.
fn depth_sibling(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    if name.contains("rgb") {
        let cand = path.with_file_name(name.replacen("rgb", "depth", 1)).with_extension("pgm");
        if cand.is_file() {
            return Some(cand);
        }
    }
    let cand = path.with_extension("depth.pgm");
    cand.is_file().then_some(cand)
}

fn cmd_infer(config: &Path, ckpt: &Path, input: &Path, output: &Path) -> u8 {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let ck = match checkpoint::load(ckpt) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CHECKPOINT, e),
    };
    let snap = match Config::parse(&ck.config_text) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CHECKPOINT, format!("checkpoint config snapshot: {e}")),
    };
    let diffs = checkpoint::architecture_mismatches(&snap, &cfg);
    if !diffs.is_empty() {
        return fail(
            EXIT_CHECKPOINT,
            format!("checkpoint is incompatible with the config; differing keys: {}", diffs.join(", ")),
        );
    }
    let mut store: ParamStore<f32> = ParamStore::new();
    let model = match Model::build(&cfg, &mut store) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = ck.restore_params(&mut store) {
        return fail(EXIT_CHECKPOINT, e);
    }

    let mut inputs: Vec<PathBuf> = match std::fs::read_dir(input) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file() && p.extension().map(|x| x == "ppm").unwrap_or(false)
            })
            .collect(),
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", input.display())),
    };
    inputs.sort();
    if inputs.is_empty() {
        return fail(EXIT_CONFIG, format!("{}: no .ppm inputs found", input.display()));
    }
    if let Err(e) = std::fs::create_dir_all(output) {
        return fail(EXIT_GENERIC, format!("{}: {e}", output.display()));
    }

    let size = cfg.image_size;
    for path in &inputs {
        let img = match pnm::read_file(path) {
            Ok(i) => i,
            Err(e) => return fail(EXIT_CONFIG, e),
        };
        if img.channels != 3 {
            return fail(EXIT_CONFIG, format!("{}: expected a 3-channel image", path.display()));
        }
        let (src_h, src_w) = (img.height, img.width);
        let net_in = if (src_h, src_w) == (size, size) {
            img
        } else {
            resize::bilinear(&img, size, size)
        };
        let depth_plane = if cfg.mode == Mode::M1ProvidedDepth {
            let Some(dp) = depth_sibling(path) else {
                return fail(
                    EXIT_CONFIG,
                    format!("{}: no depth sibling found (required by m1_provided_depth)", path.display()),
                );
            };
            match pnm::read_file(&dp) {
                Ok(d) => Some(resize::bilinear(&d, size, size).data),
                Err(e) => return fail(EXIT_CONFIG, e),
            }
        } else {
            None
        };

        let mut tape: Tape<f32> = Tape::new();
        let bound = match store.bind(&mut tape) {
            Ok(b) => b,
            Err(e) => return fail(EXIT_GENERIC, e),
        };
        let run = || -> pasnet::tensor::Result<Vec<f32>> {
            let mut t = tape;
            let rgb_t = t.leaf(&[1, 3, size, size], net_in.data)?;
            let depth_t = match depth_plane {
                Some(d) => Some(t.leaf(&[1, 1, size, size], d)?),
                None => None,
            };
            let mut f = Fwd { tape: &mut t, bound: &bound, store: &mut store, train: false };
            let out = model.forward(&mut f, rgb_t, depth_t)?;
            Ok(t.data(out.saliency).to_vec())
        };
        let saliency = match run() {
            Ok(s) => s,
            Err(e) => return fail(EXIT_GENERIC, e),
        };
        // Map the prediction back onto the source geometry before writing.
        let map = PlanarImage { channels: 1, height: size, width: size, data: saliency };
        let map = if (src_h, src_w) == (size, size) {
            map
        } else {
            resize::bilinear(&map, src_h, src_w)
        };
        let out_path = output.join(path.with_extension("pgm").file_name().unwrap());
        if let Err(e) = pnm::write_gray_file(&out_path, map.height, map.width, &map.data) {
            return fail(EXIT_GENERIC, e);
        }
    }
    println!("wrote {} saliency maps to {}", inputs.len(), output.display());
    0
}

fn cmd_eval(pred: &Path, gt: &Path, out: &Path) -> u8 {
    let report = match metrics::evaluate_dir(pred, gt) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = metrics::write_reports(out, &report) {
        return fail(EXIT_GENERIC, e);
    }
    println!("{:<24} {:>8} {:>8} {:>9} {:>9}", "image", "mae", "f_beta", "e_measure", "s_measure");
    for (name, r) in &report.rows {
        println!(
            "{:<24} {:>8.3} {:>8.3} {:>9.3} {:>9.3}",
            name, r.mae, r.f_beta, r.e_measure, r.s_measure
        );
    }
    let m = &report.mean;
    println!(
        "{:<24} {:>8.3} {:>8.3} {:>9.3} {:>9.3}",
        "mean", m.mae, m.f_beta, m.e_measure, m.s_measure
    );
    if !report.unmatched.is_empty() {
        eprintln!("unmatched files skipped: {}", report.unmatched.join(", "));
        return EXIT_GENERIC;
    }
    0
}

fn cmd_gradcheck(config: Option<&Path>, ops: Option<&str>) -> u8 {
    let seed = match config {
        Some(path) => match load_config(path) {
            Ok(c) => c.seed,
            Err(code) => return code,
        },
        None => 7,
    };
    let selected: Vec<String> = match ops {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => {
            let mut names: Vec<String> =
                gradcheck::default_op_names().iter().map(|s| s.to_string()).collect();
            names.push(gradcheck::COMPOSITE.into());
            names
        }
    };
    let mut reports = Vec::new();
    for name in &selected {
        if name == gradcheck::COMPOSITE {
            reports.push(gradcheck::run_composite_check(seed, 24));
        } else {
            reports.extend(gradcheck::run_op_checks(&[name.as_str()], seed));
        }
    }
    println!("{:<28} {:>12} {:>8}  result", "op", "max_rel_err", "coords");
    let mut failing = Vec::new();
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<28} {:>12.3e} {:>8}  {status}", r.name, r.max_rel, r.checked);
        if !r.passed() {
            failing.push(r.name.clone());
        }
    }
    if failing.is_empty() {
        0
    } else {
        fail(EXIT_GRADCHECK, format!("gradient checks failed: {}", failing.join(", ")))
    }
}

fn cmd_synth(out: &Path, count: usize, size: usize, seed: u64, style: &str) -> u8 {
    let style = match style {
        "plain" => synth::SceneStyle::Plain,
        "subtle" => synth::SceneStyle::Subtle,
        other => return fail(EXIT_CONFIG, format!("unknown style {other:?}; use plain or subtle")),
    };
    match synth::write_set_styled(out, seed, count, size, style) {
        Ok(manifest) => {
            println!("wrote {count} scenes; manifest at {}", manifest.display());
            0
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}
