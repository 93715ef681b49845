//! 2-D convolution, average pooling and bilinear upsampling.
//!
//! Convolution uses cross-correlation semantics (no kernel flip) with square
//! stride/padding/dilation.  The output extent along each spatial dim is
//! `(len + 2*padding - dilation*(k-1) - 1) / stride + 1`, floored.

use super::{Op, Result, Tape, Tensor, TensorError};
use crate::scalar::Scalar;
use crate::tensor::linalg::dims4;

/// Output extent for one spatial dimension, or `None` when empty.
fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Range of output indices whose input index `o*stride + k_off - padding`
/// lands inside `[0, len)`, plus that base offset.  Empty ranges come back
/// as `None`.
fn valid_out_range(
    len: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
    k_off: usize,
) -> Option<(usize, usize, i64)> {
    let base = k_off as i64 - padding as i64; // input index = o*stride + base
    let s = stride as i64;
    let lo = if base >= 0 { 0 } else { (-base + s - 1) / s };
    let max_in = len as i64 - 1 - base;
    if max_in < 0 {
        return None;
    }
    let hi = (max_in / s).min(out_len as i64 - 1);
    if lo > hi {
        return None;
    }
    Some((lo as usize, hi as usize, base))
}

impl<E: Scalar> Tape<E> {
    /// Cross-correlation of `x: [N,Cin,H,W]` with `w: [F,Cin,kh,kw]` and an
    /// optional `[F]` bias.
    pub fn conv2d(
        &mut self,
        x: Tensor,
        w: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        if stride == 0 || dilation == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("stride {stride} and dilation {dilation} must be >= 1"),
            });
        }
        let (n, cin, h, wd) = dims4(self, "conv2d", x)?;
        let (f, wc, kh, kw) = dims4(self, "conv2d", w)?;
        if wc != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                dim: 1,
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    dim: 0,
                    left: self.shape(b).to_vec(),
                    right: vec![f],
                });
            }
        }
        let oh = conv_out_len(h, kh, stride, padding, dilation).ok_or(TensorError::EmptyOutput {
            op: "conv2d",
            dim: 2,
            shape: self.shape(x).to_vec(),
            kernel: kh,
            stride,
            padding,
            dilation,
        })?;
        let ow = conv_out_len(wd, kw, stride, padding, dilation).ok_or(TensorError::EmptyOutput {
            op: "conv2d",
            dim: 3,
            shape: self.shape(x).to_vec(),
            kernel: kw,
            stride,
            padding,
            dilation,
        })?;

        let mut data = vec![E::zero(); n * f * oh * ow];
        {
            let xd = self.data(x);
            let wv = self.data(w);
            let bd = bias.map(|b| self.data(b).to_vec());
            for q in 0..n {
                for ff in 0..f {
                    let o_base = (q * f + ff) * oh * ow;
                    if let Some(b) = &bd {
                        for v in &mut data[o_base..o_base + oh * ow] {
                            *v = b[ff];
                        }
                    }
                    for c in 0..cin {
                        let x_base = (q * cin + c) * h * wd;
                        let w_base = (ff * cin + c) * kh * kw;
                        for ki in 0..kh {
                            let Some((h_lo, h_hi, h_off)) =
                                valid_out_range(h, oh, stride, padding, ki * dilation)
                            else {
                                continue;
                            };
                            for kj in 0..kw {
                                let Some((w_lo, w_hi, w_off)) =
                                    valid_out_range(wd, ow, stride, padding, kj * dilation)
                                else {
                                    continue;
                                };
                                let kv = wv[w_base + ki * kw + kj];
                                for o_r in h_lo..=h_hi {
                                    let ih = (o_r as i64 * stride as i64 + h_off) as usize;
                                    let in_row = &xd[x_base + ih * wd..x_base + (ih + 1) * wd];
                                    let out_row = &mut data[o_base + o_r * ow..o_base + (o_r + 1) * ow];
                                    if stride == 1 {
                                        let start = (w_lo as i64 + w_off) as usize;
                                        let src = &in_row[start..start + (w_hi - w_lo + 1)];
                                        for (ov, &iv) in out_row[w_lo..=w_hi].iter_mut().zip(src) {
                                            *ov += kv * iv;
                                        }
                                    } else {
                                        for o_c in w_lo..=w_hi {
                                            let iw = (o_c as i64 * stride as i64 + w_off) as usize;
                                            out_row[o_c] += kv * in_row[iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x.id, w.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        let out = self.output(vec![n, f, oh, ow], data, &inputs);
        self.record(Op::Conv2d {
            x: x.id,
            w: w.id,
            bias: bias.map(|b| b.id),
            out: out.id,
            stride,
            padding,
            dilation,
        });
        Ok(out)
    }

    /// Average pooling with a square `kernel`.  Zero padding counts toward
    /// the divisor: every output is the window sum divided by `kernel^2`.
    pub fn avg_pool2d(&mut self, x: Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        if kernel == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2d",
                msg: format!("kernel {kernel} and stride {stride} must be >= 1"),
            });
        }
        let (n, c, h, w) = dims4(self, "avg_pool2d", x)?;
        let oh = conv_out_len(h, kernel, stride, padding, 1).ok_or(TensorError::EmptyOutput {
            op: "avg_pool2d",
            dim: 2,
            shape: self.shape(x).to_vec(),
            kernel,
            stride,
            padding,
            dilation: 1,
        })?;
        let ow = conv_out_len(w, kernel, stride, padding, 1).ok_or(TensorError::EmptyOutput {
            op: "avg_pool2d",
            dim: 3,
            shape: self.shape(x).to_vec(),
            kernel,
            stride,
            padding,
            dilation: 1,
        })?;
        let inv = E::from_usize(kernel * kernel).recip();
        let src = self.data(x);
        let mut data = vec![E::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let x_base = p * h * w;
            let o_base = p * oh * ow;
            for o_r in 0..oh {
                let ih0 = o_r as i64 * stride as i64 - padding as i64;
                for o_c in 0..ow {
                    let iw0 = o_c as i64 * stride as i64 - padding as i64;
                    let mut acc = E::zero();
                    for i in 0..kernel as i64 {
                        let ih = ih0 + i;
                        if ih < 0 || ih >= h as i64 {
                            continue;
                        }
                        let row = &src[x_base + ih as usize * w..x_base + (ih as usize + 1) * w];
                        for j in 0..kernel as i64 {
                            let iw = iw0 + j;
                            if iw < 0 || iw >= w as i64 {
                                continue;
                            }
                            acc += row[iw as usize];
                        }
                    }
                    data[o_base + o_r * ow + o_c] = acc * inv;
                }
            }
        }
        let out = self.output(vec![n, c, oh, ow], data, &[x.id]);
        self.record(Op::AvgPool2d { x: x.id, out: out.id, kernel, stride, padding });
        Ok(out)
    }

    /// Bilinear resize to `(out_h, out_w)` with the half-pixel (align
    /// corners = false) convention: `src = (dst + 0.5) * in/out - 0.5`,
    /// clamped to the input extent.
    pub fn upsample_bilinear(&mut self, x: Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid {
                op: "upsample_bilinear",
                msg: format!("output {out_h}x{out_w} must be nonempty"),
            });
        }
        let (n, c, h, w) = dims4(self, "upsample_bilinear", x)?;
        let rows = axis_lerp(h, out_h);
        let cols = axis_lerp(w, out_w);
        let src = self.data(x);
        let mut data = vec![E::zero(); n * c * out_h * out_w];
        for p in 0..n * c {
            let x_base = p * h * w;
            let o_base = p * out_h * out_w;
            for (o_r, &(i0, i1, ty)) in rows.iter().enumerate() {
                let r0 = &src[x_base + i0 * w..x_base + i0 * w + w];
                let r1 = &src[x_base + i1 * w..x_base + i1 * w + w];
                let ty = E::from_f64(ty);
                let one = E::one();
                let dst = &mut data[o_base + o_r * out_w..o_base + (o_r + 1) * out_w];
                for (o_c, &(j0, j1, tx)) in cols.iter().enumerate() {
                    let tx = E::from_f64(tx);
                    let top = r0[j0] * (one - tx) + r0[j1] * tx;
                    let bot = r1[j0] * (one - tx) + r1[j1] * tx;
                    dst[o_c] = top * (one - ty) + bot * ty;
                }
            }
        }
        let out = self.output(vec![n, c, out_h, out_w], data, &[x.id]);
        self.record(Op::UpsampleBilinear { x: x.id, out: out.id });
        Ok(out)
    }
}

/// Per-output (low index, high index, fraction) for one resize axis.
pub(crate) fn axis_lerp(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

// Backward arms.
impl<E: Scalar> Tape<E> {
    pub(crate) fn bw_conv2d(
        &mut self,
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
        dilation: usize,
        g: &[E],
    ) {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_out_len(h, kh, stride, padding, dilation).unwrap();
        let ow = conv_out_len(wd, kw, stride, padding, dilation).unwrap();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut dx = if need_x { vec![E::zero(); n * cin * h * wd] } else { Vec::new() };
        let mut dw = if need_w { vec![E::zero(); self.data_of(w).len()] } else { Vec::new() };
        if need_x || need_w {
            let xd = self.data_of(x);
            let wv = self.data_of(w);
            for q in 0..n {
                for ff in 0..f {
                    let o_base = (q * f + ff) * oh * ow;
                    for c in 0..cin {
                        let x_base = (q * cin + c) * h * wd;
                        let w_base = (ff * cin + c) * kh * kw;
                        for ki in 0..kh {
                            let Some((h_lo, h_hi, h_off)) =
                                valid_out_range(h, oh, stride, padding, ki * dilation)
                            else {
                                continue;
                            };
                            for kj in 0..kw {
                                let Some((w_lo, w_hi, w_off)) =
                                    valid_out_range(wd, ow, stride, padding, kj * dilation)
                                else {
                                    continue;
                                };
                                let kv = wv[w_base + ki * kw + kj];
                                let mut w_acc = E::zero();
                                for o_r in h_lo..=h_hi {
                                    let ih = (o_r as i64 * stride as i64 + h_off) as usize;
                                    let g_row = &g[o_base + o_r * ow..o_base + (o_r + 1) * ow];
                                    let in_row = &xd[x_base + ih * wd..x_base + (ih + 1) * wd];
                                    if need_x {
                                        let dx_row =
                                            &mut dx[x_base + ih * wd..x_base + (ih + 1) * wd];
                                        for o_c in w_lo..=w_hi {
                                            let iw =
                                                (o_c as i64 * stride as i64 + w_off) as usize;
                                            dx_row[iw] += kv * g_row[o_c];
                                        }
                                    }
                                    if need_w {
                                        for o_c in w_lo..=w_hi {
                                            let iw =
                                                (o_c as i64 * stride as i64 + w_off) as usize;
                                            w_acc += in_row[iw] * g_row[o_c];
                                        }
                                    }
                                }
                                if need_w {
                                    dw[w_base + ki * kw + kj] += w_acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accum(x, dx);
        }
        if need_w {
            self.accum(w, dw);
        }
        if let Some(b) = bias {
            if self.needs(b) {
                let mut db = vec![E::zero(); f];
                for q in 0..n {
                    for (ff, slot) in db.iter_mut().enumerate() {
                        let o_base = (q * f + ff) * oh * ow;
                        for &gv in &g[o_base..o_base + oh * ow] {
                            *slot += gv;
                        }
                    }
                }
                self.accum(b, db);
            }
        }
    }

    pub(crate) fn bw_avg_pool2d(&mut self, x: usize, kernel: usize, stride: usize, padding: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let s = self.shape_of(x).to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let oh = conv_out_len(h, kernel, stride, padding, 1).unwrap();
        let ow = conv_out_len(w, kernel, stride, padding, 1).unwrap();
        let inv = E::from_usize(kernel * kernel).recip();
        let mut dx = vec![E::zero(); planes * h * w];
        for p in 0..planes {
            let x_base = p * h * w;
            let o_base = p * oh * ow;
            for o_r in 0..oh {
                let ih0 = o_r as i64 * stride as i64 - padding as i64;
                for o_c in 0..ow {
                    let iw0 = o_c as i64 * stride as i64 - padding as i64;
                    let gv = g[o_base + o_r * ow + o_c] * inv;
                    for i in 0..kernel as i64 {
                        let ih = ih0 + i;
                        if ih < 0 || ih >= h as i64 {
                            continue;
                        }
                        for j in 0..kernel as i64 {
                            let iw = iw0 + j;
                            if iw < 0 || iw >= w as i64 {
                                continue;
                            }
                            dx[x_base + ih as usize * w + iw as usize] += gv;
                        }
                    }
                }
            }
        }
        self.accum(x, dx);
    }

    pub(crate) fn bw_upsample_bilinear(&mut self, x: usize, out: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let xs = self.shape_of(x).to_vec();
        let os = self.shape_of(out).to_vec();
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (os[2], os[3]);
        let rows = axis_lerp(h, oh);
        let cols = axis_lerp(w, ow);
        let one = E::one();
        let mut dx = vec![E::zero(); planes * h * w];
        for p in 0..planes {
            let x_base = p * h * w;
            let o_base = p * oh * ow;
            for (o_r, &(i0, i1, ty)) in rows.iter().enumerate() {
                let ty = E::from_f64(ty);
                for (o_c, &(j0, j1, tx)) in cols.iter().enumerate() {
                    let tx = E::from_f64(tx);
                    let gv = g[o_base + o_r * ow + o_c];
                    dx[x_base + i0 * w + j0] += gv * (one - ty) * (one - tx);
                    dx[x_base + i0 * w + j1] += gv * (one - ty) * tx;
                    dx[x_base + i1 * w + j0] += gv * ty * (one - tx);
                    dx[x_base + i1 * w + j1] += gv * ty * tx;
                }
            }
        }
        self.accum(x, dx);
    }
}
