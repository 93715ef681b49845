//! Dataset handling: image codecs, manifests, resizing and the synthetic
//! scene generator used for self-contained training runs.

pub mod manifest;
pub mod pnm;
pub mod resize;
pub mod synth;

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    InFile { path: String, source: Box<DataError> },
    #[error("invalid image at byte {offset}: {msg}")]
    Pnm { offset: usize, msg: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{msg}")]
    Image { msg: String },
}

impl DataError {
    pub fn with_path(self, path: &Path) -> DataError {
        DataError::InFile { path: path.display().to_string(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Channel-planar float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl PlanarImage {
    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "plane length must match dimensions");
        PlanarImage { channels: 1, height, width, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// One training/eval example already resized to the working resolution.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    /// `[3, H, W]` color image.
    pub rgb: PlanarImage,
    /// `[1, H, W]` binary mask (exactly 0.0 or 1.0).
    pub gt: PlanarImage,
    /// `[1, H, W]` depth/disparity map if the manifest provides one.
    pub depth: Option<PlanarImage>,
}

/// Load and normalize one manifest entry to `size x size`.
///
/// Ground truth is binarized at 0.5 after nearest-neighbor resizing so masks
/// never contain interpolated gray values.
pub fn load_entry(entry: &manifest::ManifestEntry, size: usize) -> Result<LoadedSample> {
    let rgb = pnm::read_file(&entry.rgb)?;
    if rgb.channels != 3 {
        return Err(DataError::Image {
            msg: format!("{}: expected RGB image, got {} channel(s)", entry.rgb.display(), rgb.channels),
        });
    }
    let gt = pnm::read_file(&entry.gt)?;
    if gt.channels != 1 {
        return Err(DataError::Image {
            msg: format!("{}: expected grayscale mask, got {} channel(s)", entry.gt.display(), gt.channels),
        });
    }
    let rgb = resize::bilinear(&rgb, size, size);
    let mut gt = resize::nearest(&gt, size, size);
    for v in &mut gt.data {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    let depth = match &entry.depth {
        Some(path) => {
            let d = pnm::read_file(path)?;
            if d.channels != 1 {
                return Err(DataError::Image {
                    msg: format!("{}: expected grayscale depth, got {} channel(s)", path.display(), d.channels),
                });
            }
            Some(resize::bilinear(&d, size, size))
        }
        None => None,
    };
    Ok(LoadedSample { rgb, gt, depth })
}
