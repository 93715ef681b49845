//! Deterministic synthetic scenes: bright geometric shapes over a textured
//! dark background, with per-shape constant disparity.
//!
//! Scene `index` under a given `seed` is always identical (the RNG runs on
//! its own stream per scene), shapes are sized so the foreground covers a
//! fraction strictly inside `(0, 0.6)` of the frame, and the rendered mask
//! equals the union of analytic shape membership — tests recompute it
//! directly from the scene description.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::manifest::ManifestEntry;
use super::{pnm, PlanarImage, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
    pub color: [f32; 3],
    /// Constant disparity in `(0, 1]`; larger means nearer to the camera.
    pub disparity: f32,
}

impl Shape {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.hx;
        let dy = (y as f64 + 0.5 - self.cy) / self.hy;
        match self.kind {
            ShapeKind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub size: usize,
    /// Background gradient endpoint colors (dark palette).
    pub bg: ([f32; 3], [f32; 3]),
    /// Gradient direction, normalized.
    pub grad: (f64, f64),
    pub noise: f32,
    pub shapes: Vec<Shape>,
    rng_tail: ChaCha20Rng,
}

/// Rendered sample: color image, binary mask, disparity map.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub rgb: PlanarImage,
    pub gt: PlanarImage,
    pub depth: PlanarImage,
}

/// Scene difficulty.  `Plain` keeps a few bright shapes on a dark background,
/// so local color alone separates figure from ground.  `Subtle` overlaps the
/// palettes — each shape stands out on a single color channel while the rest
/// blend in — and packs many small noisy shapes into the frame, so saliency
/// needs cross-channel comparison and fine spatial detail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SceneStyle {
    #[default]
    Plain,
    Subtle,
}

/// Draw the scene description for `(seed, index)`.
pub fn sample_scene(seed: u64, index: u64, size: usize) -> Scene {
    sample_scene_styled(seed, index, size, SceneStyle::Plain)
}

/// [`sample_scene`] with an explicit difficulty style.
pub fn sample_scene_styled(seed: u64, index: u64, size: usize, style: SceneStyle) -> Scene {
    assert!(size >= 10, "scenes below 10x10 cannot honor the coverage bounds");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let bg_hi = match style {
        SceneStyle::Plain => 0.45,
        SceneStyle::Subtle => 0.55,
    };
    let dark = |rng: &mut ChaCha20Rng| -> [f32; 3] {
        [
            rng.gen_range(0.05..bg_hi),
            rng.gen_range(0.05..bg_hi),
            rng.gen_range(0.05..bg_hi),
        ]
    };
    let bg = (dark(&mut rng), dark(&mut rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let grad = (angle.cos(), angle.sin());
    let noise = match style {
        SceneStyle::Plain => rng.gen_range(0.01..0.04),
        SceneStyle::Subtle => rng.gen_range(0.05..0.10),
    };

    let count = match style {
        SceneStyle::Plain => rng.gen_range(1..=3usize),
        SceneStyle::Subtle => rng.gen_range(5..=8usize),
    };
    let s = size as f64;
    // Extent bounds keep the union coverage below 0.6 even when every shape
    // lands disjoint: count * (2 * max_h / s)^2 < 0.6.
    let (min_h, max_h) = match style {
        SceneStyle::Plain => (s / 10.0, s / 5.0),
        SceneStyle::Subtle => (s / 14.0, s / 8.0),
    };
    let margin = max_h / s; // center offset keeping shapes inside the frame
    let mut shapes = Vec::with_capacity(count);
    for k in 0..count {
        let kind = if rng.gen_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse };
        let hx = rng.gen_range(min_h..=max_h);
        let hy = rng.gen_range(min_h..=max_h);
        let cx = rng.gen_range(margin * s..=(1.0 - margin) * s);
        let cy = rng.gen_range(margin * s..=(1.0 - margin) * s);
        let color = match style {
            // Bright palette, well separated from the dark background.
            SceneStyle::Plain => [
                rng.gen_range(0.55..1.0),
                rng.gen_range(0.55..1.0),
                rng.gen_range(0.55..1.0),
            ],
            // One channel pops above the background ceiling, the others sit
            // inside the background range.
            SceneStyle::Subtle => {
                let pop = rng.gen_range(0..3usize);
                let mut c = [0.0f32; 3];
                for (ch, v) in c.iter_mut().enumerate() {
                    *v = if ch == pop {
                        rng.gen_range(0.75..1.0)
                    } else {
                        rng.gen_range(0.15..0.55)
                    };
                }
                c
            }
        };
        // Distinct disparity per shape; deeper stack index is nearer.
        let base = 0.3 + 0.6 * (k as f32 + 1.0) / count as f32;
        let disparity = (base + rng.gen_range(-0.05..0.05f32)).clamp(0.05, 1.0);
        shapes.push(Shape { kind, cx, cy, hx, hy, color, disparity });
    }
    Scene { size, bg, grad, noise, shapes, rng_tail: rng }
}

impl Scene {
    /// Rasterize to planar images. Pixel ownership goes to the containing
    /// shape with the largest disparity (the nearest one).
    pub fn render(&self) -> SynthSample {
        let n = self.size;
        let mut rng = self.rng_tail.clone();
        let mut rgb = vec![0.0f32; 3 * n * n];
        let mut gt = vec![0.0f32; n * n];
        let mut depth = vec![0.0f32; n * n];
        let plane = n * n;
        let diag = (self.grad.0.abs() + self.grad.1.abs()).max(1e-9) * n as f64;
        for y in 0..n {
            for x in 0..n {
                let idx = y * n + x;
                let noise: f32 = rng.gen_range(-1.0..1.0f32) * self.noise;
                let owner = self
                    .shapes
                    .iter()
                    .filter(|s| s.contains(x, y))
                    .max_by(|a, b| a.disparity.total_cmp(&b.disparity));
                match owner {
                    Some(shape) => {
                        for c in 0..3 {
                            rgb[c * plane + idx] =
                                (shape.color[c] + 0.5 * noise).clamp(0.0, 1.0);
                        }
                        gt[idx] = 1.0;
                        depth[idx] = shape.disparity;
                    }
                    None => {
                        let t = ((x as f64 * self.grad.0 + y as f64 * self.grad.1) / diag + 1.0)
                            / 2.0;
                        let t = t.clamp(0.0, 1.0) as f32;
                        for c in 0..3 {
                            let base = self.bg.0[c] * (1.0 - t) + self.bg.1[c] * t;
                            rgb[c * plane + idx] = (base + noise).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        SynthSample {
            rgb: PlanarImage { channels: 3, height: n, width: n, data: rgb },
            gt: PlanarImage::gray(n, n, gt),
            depth: PlanarImage::gray(n, n, depth),
        }
    }
}

pub fn generate(seed: u64, index: u64, size: usize) -> SynthSample {
    sample_scene(seed, index, size).render()
}

pub fn generate_styled(seed: u64, index: u64, size: usize, style: SceneStyle) -> SynthSample {
    sample_scene_styled(seed, index, size, style).render()
}

/// Write `count` rendered scenes plus a manifest into `dir`.
///
/// Files are `rgb_NNNN.ppm`, `gt_NNNN.pgm`, `depth_NNNN.pgm`; the manifest
/// lists all three columns.
pub fn write_set(dir: &Path, seed: u64, count: usize, size: usize) -> Result<std::path::PathBuf> {
    write_set_styled(dir, seed, count, size, SceneStyle::Plain)
}

/// [`write_set`] with an explicit difficulty style.
pub fn write_set_styled(
    dir: &Path,
    seed: u64,
    count: usize,
    size: usize,
    style: SceneStyle,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| super::DataError::File {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let sample = generate_styled(seed, i as u64, size, style);
        let rgb = dir.join(format!("rgb_{i:04}.ppm"));
        let gt = dir.join(format!("gt_{i:04}.pgm"));
        let depth = dir.join(format!("depth_{i:04}.pgm"));
        pnm::write_rgb_file(&rgb, &sample.rgb)?;
        pnm::write_gray_file(&gt, size, size, &sample.gt.data)?;
        pnm::write_gray_file(&depth, size, size, &sample.depth.data)?;
        entries.push(ManifestEntry { rgb, gt, depth: Some(depth) });
    }
    let manifest_path = dir.join("manifest.tsv");
    let text = super::manifest::render(&entries, dir);
    std::fs::write(&manifest_path, text).map_err(|e| super::DataError::File {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    Ok(manifest_path)
}
