//! Binary PNM image I/O: 8-bit grayscale (P5) and RGB (P6).
//!
//! Readers work on byte slices and report the byte offset of the first
//! malformed token; file wrappers are thin. Pixel values are scaled by the
//! header's maxval into `[0, 1]` floats, and writers quantize back with
//! round-to-nearest at maxval 255.

use std::fs;
use std::path::Path;

use super::{DataError, PlanarImage, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(DataError::Pnm { offset: self.pos, msg: msg.into() })
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.bytes.get(self.pos).copied();
        if b.is_some() {
            self.pos += 1;
        }
        b
    }

    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(b) = self.bump() {
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((b - b'0') as usize))
                    .ok_or(DataError::Pnm {
                        offset: start,
                        msg: format!("{what} overflows"),
                    })?;
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return self.fail(format!("expected {what}"));
        }
        Ok(value)
    }
}

/// Decode a P5 or P6 image from raw bytes.
pub fn decode(bytes: &[u8]) -> Result<PlanarImage> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match (c.bump(), c.bump()) {
        (Some(b'P'), Some(b'5')) => 1,
        (Some(b'P'), Some(b'6')) => 3,
        _ => {
            c.pos = 0;
            return c.fail("expected magic P5 or P6");
        }
    };
    let width = c.read_uint("width")?;
    let height = c.read_uint("height")?;
    if width == 0 || height == 0 {
        return c.fail(format!("degenerate dimensions {width}x{height}"));
    }
    let maxval = c.read_uint("maxval")?;
    if maxval == 0 || maxval > 255 {
        return c.fail(format!("maxval {maxval} outside the supported 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match c.bump() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => {
            c.pos = c.pos.saturating_sub(1);
            return c.fail("expected single whitespace before pixel data");
        }
    }
    let need = width * height * channels;
    let payload = &bytes[c.pos.min(bytes.len())..];
    if payload.len() < need {
        c.pos = bytes.len();
        return c.fail(format!("payload truncated: need {need} bytes, have {}", payload.len()));
    }
    // Interleaved rows to planar channels. Dividing (not multiplying by a
    // rounded reciprocal) keeps values exactly on the k/maxval grid.
    let mut data = vec![0.0f32; need];
    let plane = width * height;
    for (i, &b) in payload[..need].iter().enumerate() {
        let ch = i % channels;
        let pix = i / channels;
        data[ch * plane + pix] = b as f32 / maxval as f32;
    }
    Ok(PlanarImage { channels, height, width, data })
}

/// Encode one `[0,1]` plane as binary P5 at maxval 255.
pub fn encode_gray(height: usize, width: usize, plane: &[f32]) -> Vec<u8> {
    assert_eq!(plane.len(), height * width, "plane length must match dimensions");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| quantize(v)));
    out
}

/// Encode a 3-plane `[0,1]` image as binary P6 at maxval 255.
pub fn encode_rgb(img: &PlanarImage) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(DataError::Image {
            msg: format!("P6 needs 3 channels, image has {}", img.channels),
        });
    }
    let plane = img.height * img.width;
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for pix in 0..plane {
        for ch in 0..3 {
            out.push(quantize(img.data[ch * plane + pix]));
        }
    }
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_file(path: &Path) -> Result<PlanarImage> {
    let bytes = fs::read(path).map_err(|e| DataError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    decode(&bytes).map_err(|e| e.with_path(path))
}

pub fn write_gray_file(path: &Path, height: usize, width: usize, plane: &[f32]) -> Result<()> {
    fs::write(path, encode_gray(height, width, plane)).map_err(|e| DataError::File {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_rgb_file(path: &Path, img: &PlanarImage) -> Result<()> {
    fs::write(path, encode_rgb(img)?).map_err(|e| DataError::File {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_gray_with_comment_and_maxval_scaling() {
        let bytes = b"P5 # tiny\n2 2\n100\n\x00\x32\x64\x19";
        let img = decode(bytes).unwrap();
        assert_eq!((img.channels, img.height, img.width), (1, 2, 2));
        assert_eq!(img.data, vec![0.0, 0.5, 1.0, 0.25]);
    }

    #[test]
    fn decodes_rgb_into_planes() {
        // Two pixels: (255,0,0) and (0,255,0).
        let bytes = b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00";
        let img = decode(bytes).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_wrong_magic_at_offset_zero() {
        match decode(b"P3\n1 1\n255\n9") {
            Err(DataError::Pnm { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_wide_maxval() {
        let err = decode(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn truncation_error_reports_missing_bytes() {
        let err = decode(b"P5\n2 2\n255\n\x01\x02").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("need 4") && msg.contains("have 2"), "{msg}");
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(decode(b"P5\n0 3\n255\n").is_err());
    }

    #[test]
    fn gray_round_trip_is_exact_on_the_quantization_grid() {
        let plane: Vec<f32> = (0..=255).map(|v| v as f32 / 255.0).collect();
        let bytes = encode_gray(16, 16, &plane);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.data, plane);
    }

    proptest! {
        #[test]
        fn any_byte_image_survives_gray_round_trip(
            bytes in proptest::collection::vec(any::<u8>(), 1..64),
            w in 1usize..8,
        ) {
            prop_assume!(bytes.len() % w == 0);
            let h = bytes.len() / w;
            let plane: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
            let enc = encode_gray(h, w, &plane);
            let dec = decode(&enc).unwrap();
            let requantized: Vec<u8> =
                dec.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
            prop_assert_eq!(requantized, bytes);
        }

        #[test]
        fn rgb_round_trip_preserves_planes(
            bytes in proptest::collection::vec(any::<u8>(), 3..48),
        ) {
            prop_assume!(bytes.len() % 3 == 0);
            let pixels = bytes.len() / 3;
            let mut img = PlanarImage {
                channels: 3,
                height: 1,
                width: pixels,
                data: vec![0.0; bytes.len()],
            };
            for pix in 0..pixels {
                for ch in 0..3 {
                    img.data[ch * pixels + pix] = bytes[pix * 3 + ch] as f32 / 255.0;
                }
            }
            let enc = encode_rgb(&img).unwrap();
            let dec = decode(&enc).unwrap();
            for (a, b) in dec.data.iter().zip(&img.data) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
