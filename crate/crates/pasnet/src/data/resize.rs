//! Image resizing: bilinear for continuous channels, nearest for masks.
//!
//! Both use the half-pixel source mapping `src = (dst + 0.5) * in/out - 0.5`
//! so results agree with the tape's bilinear upsampling op.

use super::PlanarImage;
use crate::tensor::axis_lerp;

pub fn bilinear(src: &PlanarImage, out_h: usize, out_w: usize) -> PlanarImage {
    assert!(out_h > 0 && out_w > 0, "target size must be positive");
    if out_h == src.height && out_w == src.width {
        return src.clone();
    }
    let rows = axis_lerp(src.height, out_h);
    let cols = axis_lerp(src.width, out_w);
    let mut data = vec![0.0f32; src.channels * out_h * out_w];
    let in_plane = src.height * src.width;
    let out_plane = out_h * out_w;
    for c in 0..src.channels {
        let plane = &src.data[c * in_plane..(c + 1) * in_plane];
        let out = &mut data[c * out_plane..(c + 1) * out_plane];
        for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                let top = plane[y0 * src.width + x0] as f64 * (1.0 - tx)
                    + plane[y0 * src.width + x1] as f64 * tx;
                let bot = plane[y1 * src.width + x0] as f64 * (1.0 - tx)
                    + plane[y1 * src.width + x1] as f64 * tx;
                out[oy * out_w + ox] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    PlanarImage { channels: src.channels, height: out_h, width: out_w, data }
}

pub fn nearest(src: &PlanarImage, out_h: usize, out_w: usize) -> PlanarImage {
    assert!(out_h > 0 && out_w > 0, "target size must be positive");
    if out_h == src.height && out_w == src.width {
        return src.clone();
    }
    let map = |out_len: usize, in_len: usize| -> Vec<usize> {
        (0..out_len)
            .map(|d| {
                let s = (d as f64 + 0.5) * in_len as f64 / out_len as f64;
                (s.floor() as usize).min(in_len - 1)
            })
            .collect()
    };
    let rows = map(out_h, src.height);
    let cols = map(out_w, src.width);
    let in_plane = src.height * src.width;
    let out_plane = out_h * out_w;
    let mut data = vec![0.0f32; src.channels * out_plane];
    for c in 0..src.channels {
        let plane = &src.data[c * in_plane..(c + 1) * in_plane];
        let out = &mut data[c * out_plane..(c + 1) * out_plane];
        for (oy, &sy) in rows.iter().enumerate() {
            for (ox, &sx) in cols.iter().enumerate() {
                out[oy * out_w + ox] = plane[sy * src.width + sx];
            }
        }
    }
    PlanarImage { channels: src.channels, height: out_h, width: out_w, data }
}
