//! Saliency evaluation metrics: MAE, thresholded F-measure, enhanced
//! alignment (E) and structure (S) measures, plus directory-level
//! aggregation with CSV/JSON reporting.
//!
//! All metrics consume host-side single-channel images: predictions in
//! [0, 1], ground truth strictly binary. Aggregation uses a fixed summation
//! order so repeated runs produce identical reports.

use crate::data::PlanarImage;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    Shape { pred: (usize, usize, usize), gt: (usize, usize, usize) },
    #[error("{what} must be single-channel, got {channels}")]
    Channels { what: &'static str, channels: usize },
    #[error("prediction value {0} is outside [0, 1]")]
    PredRange(f64),
    #[error("ground truth must be binary, found {0}")]
    NotBinary(f64),
    #[error("ground truth has no foreground: recall is undefined")]
    EmptyGt,
    #[error("no filename appears in both directories")]
    NoPairs,
    #[error("{path}: {source}")]
    Data {
        path: String,
        #[source]
        source: crate::data::DataError,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricError>;

pub const DEFAULT_BETA2: f64 = 0.3;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub f_beta: f64,
    pub e_measure: f64,
    pub s_measure: f64,
}

fn checked<'a>(pred: &'a PlanarImage, gt: &'a PlanarImage) -> Result<(&'a [f32], &'a [f32], usize, usize)> {
    if pred.channels != 1 {
        return Err(MetricError::Channels { what: "prediction", channels: pred.channels });
    }
    if gt.channels != 1 {
        return Err(MetricError::Channels { what: "ground truth", channels: gt.channels });
    }
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricError::Shape {
            pred: (pred.channels, pred.height, pred.width),
            gt: (gt.channels, gt.height, gt.width),
        });
    }
    for v in &pred.data {
        if !(0.0..=1.0).contains(v) {
            return Err(MetricError::PredRange(*v as f64));
        }
    }
    for v in &gt.data {
        if *v != 0.0 && *v != 1.0 {
            return Err(MetricError::NotBinary(*v as f64));
        }
    }
    Ok((&pred.data, &gt.data, pred.height, pred.width))
}

/// Mean absolute error.
pub fn mae(pred: &PlanarImage, gt: &PlanarImage) -> Result<f64> {
    let (p, g, _, _) = checked(pred, gt)?;
    let sum: f64 = p.iter().zip(g).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(sum / p.len() as f64)
}

/// F_β at each threshold τ = t/255, t ∈ 1..=255. Binarization is
/// `pred ≥ τ`; a threshold that empties the prediction scores 0.
pub fn f_measure_curve(pred: &PlanarImage, gt: &PlanarImage, beta2: f64) -> Result<Vec<f64>> {
    let (p, g, _, _) = checked(pred, gt)?;
    let positives = g.iter().filter(|v| **v == 1.0).count();
    if positives == 0 {
        return Err(MetricError::EmptyGt);
    }
    let mut curve = Vec::with_capacity(255);
    for t in 1..=255u32 {
        let tau = t as f64 / 255.0;
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (pv, gv) in p.iter().zip(g) {
            if *pv as f64 >= tau {
                if *gv == 1.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp + fp == 0 {
            curve.push(0.0);
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            (1.0 + beta2) * precision * recall / (beta2 * precision + recall)
        };
        curve.push(f);
    }
    Ok(curve)
}

/// Maximum F_β over the threshold sweep with β² = 0.3.
pub fn f_measure(pred: &PlanarImage, gt: &PlanarImage) -> Result<f64> {
    let curve = f_measure_curve(pred, gt, DEFAULT_BETA2)?;
    Ok(curve.into_iter().fold(0.0, f64::max))
}

/// Mean F_β over the threshold sweep with β² = 0.3.
pub fn mean_f_measure(pred: &PlanarImage, gt: &PlanarImage) -> Result<f64> {
    let curve = f_measure_curve(pred, gt, DEFAULT_BETA2)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Enhanced-alignment measure. The prediction is binarized at twice its
/// mean (capped at 1); the alignment of mean-centered signals is enhanced
/// quadratically. Constant ground truth falls back to agreement with the
/// binarized map instead of dividing by zero.
pub fn e_measure(pred: &PlanarImage, gt: &PlanarImage) -> Result<f64> {
    let (p, g, _, _) = checked(pred, gt)?;
    let n = p.len() as f64;
    let mean_p: f64 = p.iter().map(|v| *v as f64).sum::<f64>() / n;
    let thr = (2.0 * mean_p).min(1.0);
    // A zero-mass prediction binarizes to the empty map; `>= 0` would
    // otherwise promote every pixel.
    let dm: Vec<f64> = if mean_p == 0.0 {
        vec![0.0; p.len()]
    } else {
        p.iter().map(|v| if *v as f64 >= thr { 1.0 } else { 0.0 }).collect()
    };
    let mean_g: f64 = g.iter().map(|v| *v as f64).sum::<f64>() / n;
    if mean_g == 0.0 {
        return Ok(dm.iter().map(|d| 1.0 - d).sum::<f64>() / n);
    }
    if mean_g == 1.0 {
        return Ok(dm.iter().sum::<f64>() / n);
    }
    let mean_dm: f64 = dm.iter().sum::<f64>() / n;
    let mut total = 0.0;
    for (d, gv) in dm.iter().zip(g) {
        let fg = *gv as f64 - mean_g;
        let fd = d - mean_dm;
        let align = 2.0 * fg * fd / (fg * fg + fd * fd + f64::EPSILON);
        let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
        total += enhanced;
    }
    Ok(total / n)
}

/// Sample standard deviation (N−1 normalization; 0 for N ≤ 1).
fn sample_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n <= 1 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let x = values.clone().sum::<f64>() / n as f64;
    let sigma = sample_std(values);
    2.0 * x / (x * x + 1.0 + sigma + 1e-12)
}

/// Similarity of one region pair: means, (N−1)-normalized second moments,
/// and the published alpha/beta ratio with its zero-cases.
fn region_similarity(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    if p.is_empty() {
        return 1.0;
    }
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let denom = n - 1.0 + f64::EPSILON;
    let sx2: f64 = p.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / denom;
    let sy2: f64 = g.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / denom;
    let sxy: f64 = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + 1e-12)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure `α·S_object + (1−α)·S_region` with α = 0.5.
/// Degenerate ground truth (all background / all foreground) falls back to
/// `1 − mean(pred)` / `mean(pred)`.
pub fn s_measure(pred: &PlanarImage, gt: &PlanarImage) -> Result<f64> {
    let (p, g, h, w) = checked(pred, gt)?;
    let pd: Vec<f64> = p.iter().map(|v| *v as f64).collect();
    let gd: Vec<f64> = g.iter().map(|v| *v as f64).collect();
    let area: f64 = gd.iter().sum();
    let n = pd.len() as f64;
    let mu = area / n;
    if mu == 0.0 {
        return Ok(1.0 - pd.iter().sum::<f64>() / n);
    }
    if mu == 1.0 {
        return Ok(pd.iter().sum::<f64>() / n);
    }

    // Object-aware half: foreground compared as-is, background inverted.
    let fg = pd.iter().zip(&gd).filter(|(_, g)| **g == 1.0).map(|(p, _)| *p);
    let bg = pd.iter().zip(&gd).filter(|(_, g)| **g == 0.0).map(|(p, _)| 1.0 - *p);
    let s_object = mu * object_score(fg) + (1.0 - mu) * object_score(bg);

    // Region-aware half: quadrants around the foreground centroid, scored
    // by the similarity ratio and weighted by area.
    let mut row_sum = 0.0;
    let mut col_sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gd[r * w + c] == 1.0 {
                row_sum += r as f64;
                col_sum += c as f64;
            }
        }
    }
    let cy = (row_sum / area).round() as usize;
    let cx = (col_sum / area).round() as usize;
    // The centroid row/column belongs to the top/left blocks.
    let (hy, wx) = (cy + 1, cx + 1);
    let mut s_region = 0.0;
    for (r0, r1, c0, c1) in [(0, hy, 0, wx), (0, hy, wx, w), (hy, h, 0, wx), (hy, h, wx, w)] {
        let mut pq = Vec::new();
        let mut gq = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                pq.push(pd[r * w + c]);
                gq.push(gd[r * w + c]);
            }
        }
        let weight = pq.len() as f64 / n;
        s_region += weight * region_similarity(&pq, &gq);
    }

    Ok(0.5 * s_object + 0.5 * s_region)
}

/// All four metrics for one prediction/ground-truth pair.
pub fn evaluate_pair(pred: &PlanarImage, gt: &PlanarImage) -> Result<MetricReport> {
    Ok(MetricReport {
        mae: mae(pred, gt)?,
        f_beta: f_measure(pred, gt)?,
        e_measure: e_measure(pred, gt)?,
        s_measure: s_measure(pred, gt)?,
    })
}

#[derive(Debug, Serialize)]
pub struct DirReport {
    pub rows: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
    pub unmatched: Vec<String>,
}

/// Evaluate every filename present in both directories (sorted order).
/// Predictions are resized to the ground-truth grid when they differ.
/// Files present in only one directory are listed in `unmatched`.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<DirReport> {
    let list = |dir: &Path| -> Result<BTreeMap<String, std::path::PathBuf>> {
        let mut out = BTreeMap::new();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| MetricError::Write { path: dir.display().to_string(), source: e })?;
        for entry in entries {
            let entry =
                entry.map_err(|e| MetricError::Write { path: dir.display().to_string(), source: e })?;
            let path = entry.path();
            if path.is_file() {
                out.insert(entry.file_name().to_string_lossy().into_owned(), path);
            }
        }
        Ok(out)
    };
    let preds = list(pred_dir)?;
    let gts = list(gt_dir)?;

    let mut unmatched: Vec<String> = Vec::new();
    unmatched.extend(preds.keys().filter(|k| !gts.contains_key(*k)).cloned());
    unmatched.extend(gts.keys().filter(|k| !preds.contains_key(*k)).cloned());
    unmatched.sort();

    let mut rows = Vec::new();
    let mut sums = [0.0f64; 4];
    for (name, ppath) in &preds {
        let Some(gpath) = gts.get(name) else { continue };
        let load = |path: &Path| {
            crate::data::pnm::read_file(path)
                .map_err(|e| MetricError::Data { path: path.display().to_string(), source: e })
        };
        let pred = load(ppath)?;
        let mut gt = load(gpath)?;
        // Ground truth binarized exactly as the training loader does.
        gt.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
        let pred = if pred.height != gt.height || pred.width != gt.width {
            crate::data::resize::bilinear(&pred, gt.height, gt.width)
        } else {
            pred
        };
        let rep = evaluate_pair(&pred, &gt)?;
        sums[0] += rep.mae;
        sums[1] += rep.f_beta;
        sums[2] += rep.e_measure;
        sums[3] += rep.s_measure;
        rows.push((name.clone(), rep));
    }
    if rows.is_empty() {
        return Err(MetricError::NoPairs);
    }
    let n = rows.len() as f64;
    let mean = MetricReport {
        mae: sums[0] / n,
        f_beta: sums[1] / n,
        e_measure: sums[2] / n,
        s_measure: sums[3] / n,
    };
    Ok(DirReport { rows, mean, unmatched })
}

/// Write `metrics.csv` (one row per image) and `summary.json` into `out_dir`.
pub fn write_reports(out_dir: &Path, report: &DirReport) -> Result<()> {
    let wrap = |path: &Path, e: std::io::Error| MetricError::Write {
        path: path.display().to_string(),
        source: e,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| wrap(out_dir, e))?;
    let mut csv = String::from("image,mae,f_beta,e_measure,s_measure\n");
    for (name, r) in &report.rows {
        let _ = writeln!(csv, "{name},{},{},{},{}", r.mae, r.f_beta, r.e_measure, r.s_measure);
    }
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, csv).map_err(|e| wrap(&csv_path, e))?;

    #[derive(Serialize)]
    struct Summary<'a> {
        count: usize,
        mean: &'a MetricReport,
        unmatched: &'a [String],
    }
    let summary = Summary { count: report.rows.len(), mean: &report.mean, unmatched: &report.unmatched };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let json_path = out_dir.join("summary.json");
    std::fs::write(&json_path, json).map_err(|e| wrap(&json_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn img(h: usize, w: usize, data: Vec<f32>) -> PlanarImage {
        assert_eq!(data.len(), h * w);
        PlanarImage { channels: 1, height: h, width: w, data }
    }

    /// 4×4 ground truth: left half foreground.
    fn left_half() -> PlanarImage {
        let data = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        img(4, 4, data)
    }

    #[test]
    fn perfect_prediction_scores_the_ideal_tuple() {
        let gt = left_half();
        let pred = gt.clone();
        let rep = evaluate_pair(&pred, &gt).unwrap();
        assert!(rep.mae.abs() < 1e-6, "mae {}", rep.mae);
        assert!((rep.f_beta - 1.0).abs() < 1e-6, "f {}", rep.f_beta);
        assert!((rep.e_measure - 1.0).abs() < 1e-6, "e {}", rep.e_measure);
        assert!((rep.s_measure - 1.0).abs() < 1e-6, "s {}", rep.s_measure);
    }

    #[test]
    fn mae_of_inverted_binary_prediction_is_one() {
        let gt = left_half();
        let inv = img(4, 4, gt.data.iter().map(|v| 1.0 - v).collect());
        assert_eq!(mae(&inv, &gt).unwrap(), 1.0);
    }

    #[test]
    fn mae_complement_identity_holds_for_random_predictions() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let gt = left_half();
        for _ in 0..10 {
            let pred: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let a = mae(&img(4, 4, pred.clone()), &gt).unwrap();
            let b = mae(&img(4, 4, pred.iter().map(|v| 1.0 - v).collect()), &gt).unwrap();
            assert!((a + b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn f_measure_matches_the_exhaustive_threshold_sweep() {
        let gt = left_half();
        let pred = img(4, 4, gt.data.iter().map(|g| 0.8 * g + 0.3 * (1.0 - g)).collect());
        // Independent sweep: recount every threshold from scratch.
        let mut best = 0.0f64;
        for t in 1..=255u32 {
            let tau = t as f64 / 255.0;
            let mut tp = 0usize;
            let mut predicted = 0usize;
            for (p, g) in pred.data.iter().zip(&gt.data) {
                if *p as f64 >= tau {
                    predicted += 1;
                    if *g == 1.0 {
                        tp += 1;
                    }
                }
            }
            if predicted == 0 {
                continue;
            }
            let p = tp as f64 / predicted as f64;
            let r = tp as f64 / 8.0;
            if p + r > 0.0 {
                best = best.max(1.3 * p * r / (0.3 * p + r));
            }
        }
        let got = f_measure(&pred, &gt).unwrap();
        assert_eq!(got, best, "library f-measure must equal the sweep oracle");
        assert_eq!(got, 1.0, "thresholds between 0.3 and 0.8 isolate the mask exactly");
    }

    #[test]
    fn empty_prediction_scores_zero_f() {
        let gt = left_half();
        let pred = img(4, 4, vec![0.0; 16]);
        assert_eq!(f_measure(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn all_background_ground_truth_is_rejected_by_f() {
        let gt = img(4, 4, vec![0.0; 16]);
        let pred = img(4, 4, vec![0.5; 16]);
        assert!(matches!(f_measure(&pred, &gt), Err(MetricError::EmptyGt)));
    }

    #[test]
    fn f_improves_as_predictions_move_toward_the_mask() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let gt = left_half();
        for _ in 0..5 {
            let pred: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let halfway: Vec<f32> =
                pred.iter().zip(&gt.data).map(|(p, g)| p + 0.5 * (g - p)).collect();
            let before = f_measure(&img(4, 4, pred), &gt).unwrap();
            let after = f_measure(&img(4, 4, halfway), &gt).unwrap();
            assert!(after >= before - 1e-12, "moving toward the mask lowered F: {before} -> {after}");
        }
    }

    #[test]
    fn mae_and_f_are_invariant_under_joint_pixel_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let gt = left_half();
        let pred: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Fixed permutation applied to both maps.
        let perm: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 16).collect();
        let pp: Vec<f32> = perm.iter().map(|&i| pred[i]).collect();
        let pg: Vec<f32> = perm.iter().map(|&i| gt.data[i]).collect();
        let p1 = img(4, 4, pred);
        let g2 = img(4, 4, pg);
        let p2 = img(4, 4, pp);
        assert_eq!(mae(&p1, &gt).unwrap(), mae(&p2, &g2).unwrap());
        assert_eq!(f_measure(&p1, &gt).unwrap(), f_measure(&p2, &g2).unwrap());
    }

    #[test]
    fn e_measure_of_the_inverted_mask_collapses() {
        let gt = left_half();
        let inv = img(4, 4, gt.data.iter().map(|v| 1.0 - v).collect());
        // Straight-line oracle: mean(pred)=0.5 → threshold 1.0 → binarized
        // map equals the inverted mask; centered signals are exact
        // opposites, alignment is −1 everywhere, enhancement (1−1)²/4 = 0.
        let got = e_measure(&inv, &gt).unwrap();
        assert!(got < 0.5, "anti-aligned prediction must score below 0.5");
        assert!(got.abs() < 1e-12, "exact opposition scores zero, got {got}");
    }

    #[test]
    fn e_measure_constant_gt_fallbacks_agree_with_the_binarized_map() {
        let empty = img(2, 2, vec![0.0; 4]);
        let full = img(2, 2, vec![1.0; 4]);
        let zeros = img(2, 2, vec![0.0; 4]);
        let ones = img(2, 2, vec![1.0; 4]);
        assert_eq!(e_measure(&zeros, &empty).unwrap(), 1.0);
        assert_eq!(e_measure(&ones, &empty).unwrap(), 0.0);
        assert_eq!(e_measure(&ones, &full).unwrap(), 1.0);
        assert_eq!(e_measure(&zeros, &full).unwrap(), 0.0);
    }

    /// Independent straight-line restatement of the structure measure used
    /// as the dual-implementation oracle.
    fn s_measure_reference(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
        let n = (h * w) as f64;
        let area: f64 = gt.iter().sum();
        let mu = area / n;
        if mu == 0.0 {
            return 1.0 - pred.iter().sum::<f64>() / n;
        }
        if mu == 1.0 {
            return pred.iter().sum::<f64>() / n;
        }
        let object = |vals: &[f64]| -> f64 {
            if vals.is_empty() {
                return 0.0;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            2.0 * m / (m * m + 1.0 + sd + 1e-12)
        };
        let fg: Vec<f64> =
            pred.iter().zip(gt).filter(|(_, g)| **g == 1.0).map(|(p, _)| *p).collect();
        let bg: Vec<f64> =
            pred.iter().zip(gt).filter(|(_, g)| **g == 0.0).map(|(p, _)| 1.0 - *p).collect();
        let so = mu * object(&fg) + (1.0 - mu) * object(&bg);

        let mut rs = 0.0;
        let mut cs = 0.0;
        for r in 0..h {
            for c in 0..w {
                if gt[r * w + c] == 1.0 {
                    rs += r as f64;
                    cs += c as f64;
                }
            }
        }
        let cy = (rs / area).round() as usize + 1;
        let cx = (cs / area).round() as usize + 1;
        let mut sr = 0.0;
        for (rr, cc) in [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)] {
            let mut pq = Vec::new();
            let mut gq = Vec::new();
            for r in rr.clone() {
                for c in cc.clone() {
                    pq.push(pred[r * w + c]);
                    gq.push(gt[r * w + c]);
                }
            }
            if pq.is_empty() {
                sr += 1.0 * (0.0 / n);
                continue;
            }
            let nn = pq.len() as f64;
            let x = pq.iter().sum::<f64>() / nn;
            let y = gq.iter().sum::<f64>() / nn;
            let d = nn - 1.0 + f64::EPSILON;
            let sx2 = pq.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / d;
            let sy2 = gq.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / d;
            let sxy = pq.iter().zip(&gq).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
            let alpha = 4.0 * x * y * sxy;
            let beta = (x * x + y * y) * (sx2 + sy2);
            let q = if alpha != 0.0 {
                alpha / (beta + 1e-12)
            } else if beta == 0.0 {
                1.0
            } else {
                0.0
            };
            sr += q * (nn / n);
        }
        0.5 * so + 0.5 * sr
    }

    #[test]
    fn s_measure_matches_its_independent_reimplementation() {
        // 8×8 single rectangle, rows 2..5 × cols 1..4.
        let mut gt = vec![0.0f32; 64];
        for r in 2..5 {
            for c in 1..4 {
                gt[r * 8 + c] = 1.0;
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let pred: Vec<f32> = gt
            .iter()
            .map(|g| {
                let noise: f32 = rng.gen_range(-0.2..0.2);
                (0.8 * g + 0.15 + noise).clamp(0.0, 1.0)
            })
            .collect();
        let got = s_measure(&img(8, 8, pred.clone()), &img(8, 8, gt.clone())).unwrap();
        let pred64: Vec<f64> = pred.iter().map(|v| *v as f64).collect();
        let gt64: Vec<f64> = gt.iter().map(|v| *v as f64).collect();
        let want = s_measure_reference(&pred64, &gt64, 8, 8);
        assert!((got - want).abs() < 1e-6, "library {got} vs reference {want}");
    }

    #[test]
    fn s_measure_prefers_structure_over_mean_level_noise() {
        let mut gt = vec![0.0f32; 64];
        for r in 2..5 {
            for c in 1..4 {
                gt[r * 8 + c] = 1.0;
            }
        }
        let gt = img(8, 8, gt);
        let exact = s_measure(&gt.clone(), &gt).unwrap();
        let flat = img(8, 8, vec![9.0 / 64.0; 64]);
        let noisy = s_measure(&flat, &gt).unwrap();
        assert!(exact > noisy, "exact {exact} must beat flat {noisy}");
    }

    #[test]
    fn s_measure_degenerate_ground_truth_uses_the_documented_fallbacks() {
        let empty = img(2, 2, vec![0.0; 4]);
        let full = img(2, 2, vec![1.0; 4]);
        let pred = img(2, 2, vec![0.25; 4]);
        assert!((s_measure(&pred, &empty).unwrap() - 0.75).abs() < 1e-12);
        assert!((s_measure(&pred, &full).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn directory_evaluation_averages_per_image_reports() {
        let dir = tempfile::tempdir().unwrap();
        let pred_dir = dir.path().join("pred");
        let gt_dir = dir.path().join("gt");
        std::fs::create_dir_all(&pred_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();
        let gt = left_half();
        // Image a: perfect. Image b: inverted. Plus one unmatched file.
        let put = |path: &Path, im: &PlanarImage| {
            crate::data::pnm::write_gray_file(path, im.height, im.width, &im.data).unwrap();
        };
        put(&pred_dir.join("a.pgm"), &gt);
        put(&gt_dir.join("a.pgm"), &gt);
        let inv = img(4, 4, gt.data.iter().map(|v| 1.0 - v).collect());
        put(&pred_dir.join("b.pgm"), &inv);
        put(&gt_dir.join("b.pgm"), &gt);
        put(&pred_dir.join("only.pgm"), &gt);

        let report = evaluate_dir(&pred_dir, &gt_dir).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.unmatched, vec!["only.pgm".to_string()]);
        let a = &report.rows[0].1;
        let b = &report.rows[1].1;
        assert!(a.mae < 1e-6 && (a.f_beta - 1.0).abs() < 1e-6);
        assert_eq!(b.mae, 1.0);
        assert!((report.mean.mae - (a.mae + b.mae) / 2.0).abs() < 1e-12);

        write_reports(dir.path(), &report).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("image,mae,f_beta,e_measure,s_measure\n"));
        assert!(csv.contains("a.pgm,"));
        let json = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        assert!(json.contains("\"count\": 2"));
        assert!(json.contains("only.pgm"));
    }

    #[test]
    fn empty_directories_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let pred_dir = dir.path().join("pred");
        let gt_dir = dir.path().join("gt");
        std::fs::create_dir_all(&pred_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();
        assert!(matches!(evaluate_dir(&pred_dir, &gt_dir), Err(MetricError::NoPairs)));
    }
}
