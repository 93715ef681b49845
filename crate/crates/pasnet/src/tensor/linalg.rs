//! Matrix products, normalisation, layout changes and channel broadcasts.
//!
//! Broadcasting is deliberately restricted: the only shape-expanding ops are
//! the explicit channel/bias forms below.  Everything else demands exact
//! shape agreement, which keeps gradient routing trivial to audit.

use super::{Op, Result, Tape, Tensor, TensorError};
use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`, loop order chosen so the inner loop runs over
/// contiguous rows of `b` and `c`.
fn matmul_accum<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] * b^T`.  `b` is transposed up front so the inner loop
/// accumulates over contiguous rows instead of serial length-`n` dot products;
/// the copy is `k*n` against `m*k*n` work and pays for itself immediately.
fn matmul_bw_a<E: Scalar>(g: &[E], b: &[E], da: &mut [E], m: usize, k: usize, n: usize) {
    let mut bt = vec![E::zero(); n * k];
    for kk in 0..k {
        for nn in 0..n {
            bt[nn * k + kk] = b[kk * n + nn];
        }
    }
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (nn, &gv) in g_row.iter().enumerate() {
            let bt_row = &bt[nn * k..(nn + 1) * k];
            for (dv, &bv) in da_row.iter_mut().zip(bt_row) {
                *dv += gv * bv;
            }
        }
    }
}

/// `db[k,n] += a^T * g`, accumulated row-wise: `db row kk += a[i,kk] * g row i`.
fn matmul_bw_b<E: Scalar>(a: &[E], g: &[E], db: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[kk * n..(kk + 1) * n];
            for (dv, &gv) in db_row.iter_mut().zip(g_row) {
                *dv += av * gv;
            }
        }
    }
}

fn dims2<E: Scalar>(tape: &Tape<E>, op: &'static str, t: Tensor) -> Result<(usize, usize)> {
    match tape.shape(t) {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank { op, expected: 2, shape: s.to_vec() }),
    }
}

fn dims3<E: Scalar>(tape: &Tape<E>, op: &'static str, t: Tensor) -> Result<(usize, usize, usize)> {
    match tape.shape(t) {
        [b, r, c] => Ok((*b, *r, *c)),
        s => Err(TensorError::Rank { op, expected: 3, shape: s.to_vec() }),
    }
}

pub(crate) fn dims4<E: Scalar>(
    tape: &Tape<E>,
    op: &'static str,
    t: Tensor,
) -> Result<(usize, usize, usize, usize)> {
    match tape.shape(t) {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(TensorError::Rank { op, expected: 4, shape: s.to_vec() }),
    }
}

impl<E: Scalar> Tape<E> {
    /// `[m,k] x [k,n] -> [m,n]` matrix product.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul", a)?;
        let (kb, n) = dims2(self, "matmul", b)?;
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                dim: 1,
                left: vec![m, k],
                right: vec![kb, n],
            });
        }
        let mut data = vec![E::zero(); m * n];
        matmul_accum(self.data(a), self.data(b), &mut data, m, k, n);
        let out = self.output(vec![m, n], data, &[a.id, b.id]);
        self.record(Op::Matmul { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ba, m, k) = dims3(self, "bmm", a)?;
        let (bb, kb, n) = dims3(self, "bmm", b)?;
        if ba != bb {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                dim: 0,
                left: vec![ba, m, k],
                right: vec![bb, kb, n],
            });
        }
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                dim: 2,
                left: vec![ba, m, k],
                right: vec![bb, kb, n],
            });
        }
        let mut data = vec![E::zero(); ba * m * n];
        for q in 0..ba {
            matmul_accum(
                &self.data(a)[q * m * k..(q + 1) * m * k],
                &self.data(b)[q * k * n..(q + 1) * k * n],
                &mut data[q * m * n..(q + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = self.output(vec![ba, m, n], data, &[a.id, b.id]);
        self.record(Op::Bmm { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Tensor) -> Result<Tensor> {
        let (b, r, c) = dims3(self, "transpose_last2", x)?;
        let src = self.data(x);
        let mut data = vec![E::zero(); src.len()];
        for q in 0..b {
            let plane = &src[q * r * c..(q + 1) * r * c];
            let dst = &mut data[q * r * c..(q + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = plane[i * c + j];
                }
            }
        }
        let out = self.output(vec![b, c, r], data, &[x.id]);
        self.record(Op::TransposeLast2 { x: x.id, out: out.id });
        Ok(out)
    }

    /// `[d0,d1,d2,d3] -> [d0,d2,d1,d3]`, the head split/merge permutation.
    pub fn permute_0213(&mut self, x: Tensor) -> Result<Tensor> {
        let (d0, d1, d2, d3) = dims4(self, "permute_0213", x)?;
        let src = self.data(x);
        let mut data = vec![E::zero(); src.len()];
        for a in 0..d0 {
            for b in 0..d1 {
                for c in 0..d2 {
                    let from = ((a * d1 + b) * d2 + c) * d3;
                    let to = ((a * d2 + c) * d1 + b) * d3;
                    data[to..to + d3].copy_from_slice(&src[from..from + d3]);
                }
            }
        }
        let out = self.output(vec![d0, d2, d1, d3], data, &[x.id]);
        self.record(Op::Permute0213 { x: x.id, out: out.id });
        Ok(out)
    }

    /// Reinterpret `x` with a new shape of identical element count.
    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(TensorError::Length {
                op: "reshape",
                len: self.numel(x),
                shape: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        let out = self.output(shape.to_vec(), data, &[x.id]);
        self.record(Op::Reshape { x: x.id, out: out.id });
        Ok(out)
    }

    /// Softmax along `axis`; each lane sums to one.
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(x);
        let mut data = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = src[base];
                for l in 1..len {
                    let v = src[base + l * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = E::zero();
                for l in 0..len {
                    let e = (src[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[base + l * inner] = data[base + l * inner] / sum;
                }
            }
        }
        let out = self.output(shape, data, &[x.id]);
        self.record(Op::Softmax { x: x.id, out: out.id, axis });
        Ok(out)
    }

    /// Layer normalisation over the last axis with affine weights:
    /// `gamma * (x - mean)/sqrt(var + eps) + beta`, variance biased (divide
    /// by the lane width).
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Invalid {
            op: "layer_norm",
            msg: "input must have at least one axis".into(),
        })?;
        if self.shape(gamma) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                dim: 0,
                left: self.shape(gamma).to_vec(),
                right: vec![d],
            });
        }
        if self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                dim: 0,
                left: self.shape(beta).to_vec(),
                right: vec![d],
            });
        }
        let lanes = self.numel(x) / d;
        let epsv = E::from_f64(eps);
        let dn = E::from_usize(d);
        let src = self.data(x);
        let gm = self.data(gamma);
        let bt = self.data(beta);
        let mut data = vec![E::zero(); src.len()];
        for l in 0..lanes {
            let lane = &src[l * d..(l + 1) * d];
            let mut mean = E::zero();
            for &v in lane {
                mean += v;
            }
            mean = mean / dn;
            let mut var = E::zero();
            for &v in lane {
                let c = v - mean;
                var += c * c;
            }
            var = var / dn;
            let rstd = (var + epsv).sqrt().recip();
            let dst = &mut data[l * d..(l + 1) * d];
            for j in 0..d {
                dst[j] = gm[j] * (lane[j] - mean) * rstd + bt[j];
            }
        }
        let out = self.output(shape, data, &[x.id, gamma.id, beta.id]);
        self.record(Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, out: out.id, eps });
        Ok(out)
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat_channels", msg: "no inputs".into() });
        }
        let (n, _, h, w) = dims4(self, "concat_channels", parts[0])?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = dims4(self, "concat_channels", p)?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    dim: 0,
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            if ph != h || pw != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    dim: if ph != h { 2 } else { 3 },
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = vec![E::zero(); n * total_c * plane];
        for q in 0..n {
            let mut c_off = 0;
            for &p in parts {
                let pc = self.shape(p)[1];
                let src = &self.data(p)[q * pc * plane..(q + 1) * pc * plane];
                let dst_base = (q * total_c + c_off) * plane;
                data[dst_base..dst_base + pc * plane].copy_from_slice(src);
                c_off += pc;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = self.output(vec![n, total_c, h, w], data, &ids);
        self.record(Op::ConcatChannels { xs: ids, out: out.id });
        Ok(out)
    }

    /// Channel slice `[from, to)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Tensor, from: usize, to: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "slice_channels", x)?;
        if from >= to || to > c {
            return Err(TensorError::Invalid {
                op: "slice_channels",
                msg: format!("range {from}..{to} invalid for {c} channels"),
            });
        }
        let sc = to - from;
        let plane = h * w;
        let mut data = vec![E::zero(); n * sc * plane];
        for q in 0..n {
            let src = &self.data(x)[(q * c + from) * plane..(q * c + to) * plane];
            data[q * sc * plane..(q + 1) * sc * plane].copy_from_slice(src);
        }
        let out = self.output(vec![n, sc, h, w], data, &[x.id]);
        self.record(Op::SliceChannels { x: x.id, out: out.id, from });
        Ok(out)
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(&mut self, x: Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "mean_spatial", x)?;
        let plane = h * w;
        let inv = E::from_usize(plane).recip();
        let src = self.data(x);
        let mut data = vec![E::zero(); n * c];
        for (i, slot) in data.iter_mut().enumerate() {
            let mut acc = E::zero();
            for &v in &src[i * plane..(i + 1) * plane] {
                acc += v;
            }
            *slot = acc * inv;
        }
        let out = self.output(vec![n, c], data, &[x.id]);
        self.record(Op::MeanSpatial { x: x.id, out: out.id });
        Ok(out)
    }

    /// Per-channel mean over batch and spatial axes: `[N,C,H,W] -> [C]`.
    pub fn mean_channels(&mut self, x: Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "mean_channels", x)?;
        let plane = h * w;
        let inv = E::from_usize(n * plane).recip();
        let src = self.data(x);
        let mut data = vec![E::zero(); c];
        for q in 0..n {
            for (ch, slot) in data.iter_mut().enumerate() {
                let base = (q * c + ch) * plane;
                let mut acc = E::zero();
                for &v in &src[base..base + plane] {
                    acc += v;
                }
                *slot += acc;
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let out = self.output(vec![c], data, &[x.id]);
        self.record(Op::MeanChannels { x: x.id, out: out.id });
        Ok(out)
    }

    fn channel_arg(&self, op: &'static str, x: Tensor, b: Tensor) -> Result<(usize, usize, usize, bool)> {
        let (n, c, h, w) = dims4(self, op, x)?;
        let per_sample = match self.shape(b) {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            other => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    dim: other.len().saturating_sub(1),
                    left: other.to_vec(),
                    right: vec![n, c],
                })
            }
        };
        Ok((n, c, h * w, per_sample))
    }

    /// Add a per-channel bias (`[C]`) or per-sample channel values (`[N,C]`)
    /// to a rank-4 tensor.
    pub fn add_channels(&mut self, x: Tensor, b: Tensor) -> Result<Tensor> {
        let (n, c, plane, per_sample) = self.channel_arg("add_channels", x, b)?;
        let src = self.data(x);
        let bv = self.data(b);
        let mut data = src.to_vec();
        for q in 0..n {
            for ch in 0..c {
                let add = if per_sample { bv[q * c + ch] } else { bv[ch] };
                let base = (q * c + ch) * plane;
                for v in &mut data[base..base + plane] {
                    *v += add;
                }
            }
        }
        let out = self.output(self.shape(x).to_vec(), data, &[x.id, b.id]);
        self.record(Op::AddChannels { x: x.id, b: b.id, out: out.id });
        Ok(out)
    }

    /// Multiply a rank-4 tensor by per-channel (`[C]`) or per-sample
    /// channel (`[N,C]`) scales.
    pub fn mul_channels(&mut self, x: Tensor, s: Tensor) -> Result<Tensor> {
        let (n, c, plane, per_sample) = self.channel_arg("mul_channels", x, s)?;
        let src = self.data(x);
        let sv = self.data(s);
        let mut data = src.to_vec();
        for q in 0..n {
            for ch in 0..c {
                let k = if per_sample { sv[q * c + ch] } else { sv[ch] };
                let base = (q * c + ch) * plane;
                for v in &mut data[base..base + plane] {
                    *v *= k;
                }
            }
        }
        let out = self.output(self.shape(x).to_vec(), data, &[x.id, s.id]);
        self.record(Op::MulChannels { x: x.id, s: s.id, out: out.id });
        Ok(out)
    }

    /// Add a row vector `[N]` to every row of a `[M,N]` matrix.
    pub fn add_bias_cols(&mut self, x: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, n) = dims2(self, "add_bias_cols", x)?;
        if self.shape(b) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_cols",
                dim: 0,
                left: self.shape(b).to_vec(),
                right: vec![n],
            });
        }
        let bv = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            for (v, &add) in data[i * n..(i + 1) * n].iter_mut().zip(&bv) {
                *v += add;
            }
        }
        let out = self.output(vec![m, n], data, &[x.id, b.id]);
        self.record(Op::AddBiasCols { x: x.id, b: b.id, out: out.id });
        Ok(out)
    }

    /// Forward difference along the width axis: `out[..,j] = x[..,j+1] - x[..,j]`.
    pub fn diff_w(&mut self, x: Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "diff_w", x)?;
        if w < 2 {
            return Err(TensorError::Invalid { op: "diff_w", msg: format!("width {w} < 2") });
        }
        let src = self.data(x);
        let mut data = vec![E::zero(); n * c * h * (w - 1)];
        for row in 0..n * c * h {
            let s = &src[row * w..(row + 1) * w];
            let d = &mut data[row * (w - 1)..(row + 1) * (w - 1)];
            for j in 0..w - 1 {
                d[j] = s[j + 1] - s[j];
            }
        }
        let out = self.output(vec![n, c, h, w - 1], data, &[x.id]);
        self.record(Op::DiffW { x: x.id, out: out.id });
        Ok(out)
    }

    /// Forward difference along the height axis.
    pub fn diff_h(&mut self, x: Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "diff_h", x)?;
        if h < 2 {
            return Err(TensorError::Invalid { op: "diff_h", msg: format!("height {h} < 2") });
        }
        let src = self.data(x);
        let mut data = vec![E::zero(); n * c * (h - 1) * w];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * (h - 1) * w..(plane + 1) * (h - 1) * w];
            for i in 0..h - 1 {
                for j in 0..w {
                    d[i * w + j] = s[(i + 1) * w + j] - s[i * w + j];
                }
            }
        }
        let out = self.output(vec![n, c, h - 1, w], data, &[x.id]);
        self.record(Op::DiffH { x: x.id, out: out.id });
        Ok(out)
    }
}

// Backward arms.
impl<E: Scalar> Tape<E> {
    pub(crate) fn bw_matmul(&mut self, a: usize, b: usize, g: &[E]) {
        let (m, k) = (self.shape_of(a)[0], self.shape_of(a)[1]);
        let n = self.shape_of(b)[1];
        if self.needs(a) {
            let mut da = vec![E::zero(); m * k];
            matmul_bw_a(g, self.data_of(b), &mut da, m, k, n);
            self.accum(a, da);
        }
        if self.needs(b) {
            let mut db = vec![E::zero(); k * n];
            matmul_bw_b(self.data_of(a), g, &mut db, m, k, n);
            self.accum(b, db);
        }
    }

    pub(crate) fn bw_bmm(&mut self, a: usize, b: usize, g: &[E]) {
        let (bs, m, k) = (self.shape_of(a)[0], self.shape_of(a)[1], self.shape_of(a)[2]);
        let n = self.shape_of(b)[2];
        if self.needs(a) {
            let mut da = vec![E::zero(); bs * m * k];
            for q in 0..bs {
                matmul_bw_a(
                    &g[q * m * n..(q + 1) * m * n],
                    &self.data_of(b)[q * k * n..(q + 1) * k * n],
                    &mut da[q * m * k..(q + 1) * m * k],
                    m,
                    k,
                    n,
                );
            }
            self.accum(a, da);
        }
        if self.needs(b) {
            let mut db = vec![E::zero(); bs * k * n];
            for q in 0..bs {
                matmul_bw_b(
                    &self.data_of(a)[q * m * k..(q + 1) * m * k],
                    &g[q * m * n..(q + 1) * m * n],
                    &mut db[q * k * n..(q + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            self.accum(b, db);
        }
    }

    pub(crate) fn bw_transpose_last2(&mut self, x: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let (b, r, c) = (self.shape_of(x)[0], self.shape_of(x)[1], self.shape_of(x)[2]);
        // g has shape [b, c, r]; transpose each plane back.
        let mut dx = vec![E::zero(); b * r * c];
        for q in 0..b {
            let gp = &g[q * r * c..(q + 1) * r * c];
            let dp = &mut dx[q * r * c..(q + 1) * r * c];
            for j in 0..c {
                for i in 0..r {
                    dp[i * c + j] = gp[j * r + i];
                }
            }
        }
        self.accum(x, dx);
    }

    pub(crate) fn bw_permute_0213(&mut self, x: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let s = self.shape_of(x);
        let (d0, d1, d2, d3) = (s[0], s[1], s[2], s[3]);
        let mut dx = vec![E::zero(); g.len()];
        for a in 0..d0 {
            for b in 0..d1 {
                for c in 0..d2 {
                    let from = ((a * d1 + b) * d2 + c) * d3;
                    let to = ((a * d2 + c) * d1 + b) * d3;
                    dx[from..from + d3].copy_from_slice(&g[to..to + d3]);
                }
            }
        }
        self.accum(x, dx);
    }

    pub(crate) fn bw_reshape(&mut self, x: usize, g: &[E]) {
        if self.needs(x) {
            self.accum(x, g.to_vec());
        }
    }

    pub(crate) fn bw_softmax(&mut self, x: usize, out: usize, axis: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let shape = self.shape_of(x).to_vec();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let y = self.data_of(out);
        let mut dx = vec![E::zero(); g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = E::zero();
                for l in 0..len {
                    let idx = base + l * inner;
                    dot += y[idx] * g[idx];
                }
                for l in 0..len {
                    let idx = base + l * inner;
                    dx[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        self.accum(x, dx);
    }

    pub(crate) fn bw_layer_norm(&mut self, x: usize, gamma: usize, beta: usize, eps: f64, g: &[E]) {
        let d = *self.shape_of(x).last().unwrap();
        let lanes = self.data_of(x).len() / d;
        let dn = E::from_usize(d);
        let epsv = E::from_f64(eps);
        let need_x = self.needs(x);
        let need_g = self.needs(gamma);
        let need_b = self.needs(beta);
        let mut dx = if need_x { vec![E::zero(); lanes * d] } else { Vec::new() };
        let mut dgamma = if need_g { vec![E::zero(); d] } else { Vec::new() };
        let mut dbeta = if need_b { vec![E::zero(); d] } else { Vec::new() };
        {
            let src = self.data_of(x);
            let gm = self.data_of(gamma);
            for l in 0..lanes {
                let lane = &src[l * d..(l + 1) * d];
                let gl = &g[l * d..(l + 1) * d];
                let mut mean = E::zero();
                for &v in lane {
                    mean += v;
                }
                mean = mean / dn;
                let mut var = E::zero();
                for &v in lane {
                    let c = v - mean;
                    var += c * c;
                }
                var = var / dn;
                let rstd = (var + epsv).sqrt().recip();
                // xhat_j = (x_j - mean) * rstd
                let mut m1 = E::zero(); // mean over lane of dy*gamma
                let mut m2 = E::zero(); // mean over lane of dy*gamma*xhat
                for j in 0..d {
                    let xhat = (lane[j] - mean) * rstd;
                    let dyg = gl[j] * gm[j];
                    m1 += dyg;
                    m2 += dyg * xhat;
                    if need_g {
                        dgamma[j] += gl[j] * xhat;
                    }
                    if need_b {
                        dbeta[j] += gl[j];
                    }
                }
                m1 = m1 / dn;
                m2 = m2 / dn;
                if need_x {
                    let dl = &mut dx[l * d..(l + 1) * d];
                    for j in 0..d {
                        let xhat = (lane[j] - mean) * rstd;
                        dl[j] = rstd * (gl[j] * gm[j] - m1 - xhat * m2);
                    }
                }
            }
        }
        if need_x {
            self.accum(x, dx);
        }
        if need_g {
            self.accum(gamma, dgamma);
        }
        if need_b {
            self.accum(beta, dbeta);
        }
    }

    pub(crate) fn bw_concat_channels(&mut self, xs: &[usize], g: &[E]) {
        let n = self.shape_of(xs[0])[0];
        let (h, w) = (self.shape_of(xs[0])[2], self.shape_of(xs[0])[3]);
        let plane = h * w;
        let total_c: usize = xs.iter().map(|&p| self.shape_of(p)[1]).sum();
        let mut c_off = 0;
        for &p in xs {
            let pc = self.shape_of(p)[1];
            if self.needs(p) {
                let mut dp = vec![E::zero(); n * pc * plane];
                for q in 0..n {
                    let src_base = (q * total_c + c_off) * plane;
                    dp[q * pc * plane..(q + 1) * pc * plane]
                        .copy_from_slice(&g[src_base..src_base + pc * plane]);
                }
                self.accum(p, dp);
            }
            c_off += pc;
        }
    }

    pub(crate) fn bw_slice_channels(&mut self, x: usize, out: usize, from: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let (n, c) = (self.shape_of(x)[0], self.shape_of(x)[1]);
        let plane = self.shape_of(x)[2] * self.shape_of(x)[3];
        let sc = self.shape_of(out)[1];
        let mut dx = vec![E::zero(); n * c * plane];
        for q in 0..n {
            let dst_base = (q * c + from) * plane;
            dx[dst_base..dst_base + sc * plane]
                .copy_from_slice(&g[q * sc * plane..(q + 1) * sc * plane]);
        }
        self.accum(x, dx);
    }

    pub(crate) fn bw_mean_spatial(&mut self, x: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let plane = self.shape_of(x)[2] * self.shape_of(x)[3];
        let inv = E::from_usize(plane).recip();
        let mut dx = vec![E::zero(); self.data_of(x).len()];
        for (i, &gv) in g.iter().enumerate() {
            let v = gv * inv;
            for d in &mut dx[i * plane..(i + 1) * plane] {
                *d = v;
            }
        }
        self.accum(x, dx);
    }

    pub(crate) fn bw_mean_channels(&mut self, x: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let (n, c) = (self.shape_of(x)[0], self.shape_of(x)[1]);
        let plane = self.shape_of(x)[2] * self.shape_of(x)[3];
        let inv = E::from_usize(n * plane).recip();
        let mut dx = vec![E::zero(); n * c * plane];
        for q in 0..n {
            for ch in 0..c {
                let v = g[ch] * inv;
                let base = (q * c + ch) * plane;
                for d in &mut dx[base..base + plane] {
                    *d = v;
                }
            }
        }
        self.accum(x, dx);
    }

    pub(crate) fn bw_add_channels(&mut self, x: usize, b: usize, g: &[E]) {
        if self.needs(x) {
            self.accum(x, g.to_vec());
        }
        if self.needs(b) {
            let (n, c) = (self.shape_of(x)[0], self.shape_of(x)[1]);
            let plane = self.shape_of(x)[2] * self.shape_of(x)[3];
            let per_sample = self.shape_of(b).len() == 2;
            let mut db = vec![E::zero(); self.data_of(b).len()];
            for q in 0..n {
                for ch in 0..c {
                    let base = (q * c + ch) * plane;
                    let mut acc = E::zero();
                    for &gv in &g[base..base + plane] {
                        acc += gv;
                    }
                    let slot = if per_sample { q * c + ch } else { ch };
                    db[slot] += acc;
                }
            }
            self.accum(b, db);
        }
    }

    pub(crate) fn bw_mul_channels(&mut self, x: usize, s: usize, g: &[E]) {
        let (n, c) = (self.shape_of(x)[0], self.shape_of(x)[1]);
        let plane = self.shape_of(x)[2] * self.shape_of(x)[3];
        let per_sample = self.shape_of(s).len() == 2;
        if self.needs(x) {
            let sv = self.data_of(s);
            let mut dx = vec![E::zero(); g.len()];
            for q in 0..n {
                for ch in 0..c {
                    let k = if per_sample { sv[q * c + ch] } else { sv[ch] };
                    let base = (q * c + ch) * plane;
                    for (d, &gv) in dx[base..base + plane].iter_mut().zip(&g[base..base + plane]) {
                        *d = gv * k;
                    }
                }
            }
            self.accum(x, dx);
        }
        if self.needs(s) {
            let xv = self.data_of(x);
            let mut ds = vec![E::zero(); self.data_of(s).len()];
            for q in 0..n {
                for ch in 0..c {
                    let base = (q * c + ch) * plane;
                    let mut acc = E::zero();
                    for (&gv, &xvv) in g[base..base + plane].iter().zip(&xv[base..base + plane]) {
                        acc += gv * xvv;
                    }
                    let slot = if per_sample { q * c + ch } else { ch };
                    ds[slot] += acc;
                }
            }
            self.accum(s, ds);
        }
    }

    pub(crate) fn bw_add_bias_cols(&mut self, x: usize, b: usize, g: &[E]) {
        if self.needs(x) {
            self.accum(x, g.to_vec());
        }
        if self.needs(b) {
            let (m, n) = (self.shape_of(x)[0], self.shape_of(x)[1]);
            let mut db = vec![E::zero(); n];
            for i in 0..m {
                for (d, &gv) in db.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                    *d += gv;
                }
            }
            self.accum(b, db);
        }
    }

    pub(crate) fn bw_diff_w(&mut self, x: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let s = self.shape_of(x);
        let (rows, w) = (s[0] * s[1] * s[2], s[3]);
        let mut dx = vec![E::zero(); rows * w];
        for row in 0..rows {
            let gr = &g[row * (w - 1)..(row + 1) * (w - 1)];
            let dr = &mut dx[row * w..(row + 1) * w];
            for j in 0..w - 1 {
                dr[j + 1] += gr[j];
                dr[j] -= gr[j];
            }
        }
        self.accum(x, dx);
    }

    pub(crate) fn bw_diff_h(&mut self, x: usize, g: &[E]) {
        if !self.needs(x) {
            return;
        }
        let s = self.shape_of(x);
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut dx = vec![E::zero(); planes * h * w];
        for p in 0..planes {
            let gp = &g[p * (h - 1) * w..(p + 1) * (h - 1) * w];
            let dp = &mut dx[p * h * w..(p + 1) * h * w];
            for i in 0..h - 1 {
                for j in 0..w {
                    dp[(i + 1) * w + j] += gp[i * w + j];
                    dp[i * w + j] -= gp[i * w + j];
                }
            }
        }
        self.accum(x, dx);
    }
}
