//! Element-wise tape operations and full reductions.

use super::{Op, Result, Tape, Tensor, TensorError};
use crate::scalar::Scalar;

impl<E: Scalar> Tape<E> {
    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(());
        }
        let dim = sa
            .iter()
            .zip(sb.iter())
            .position(|(x, y)| x != y)
            .unwrap_or_else(|| sa.len().min(sb.len()));
        Err(TensorError::ShapeMismatch { op, dim, left: sa.to_vec(), right: sb.to_vec() })
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(E, E) -> E,
    ) -> Result<(usize, Tensor)> {
        self.same_shape(op, a, b)?;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let out = self.output(shape, data, &[a.id, b.id]);
        Ok((out.id, out))
    }

    fn unary(&mut self, x: Tensor, f: impl Fn(E) -> E) -> (usize, Tensor) {
        let data: Vec<E> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let out = self.output(shape, data, &[x.id]);
        (out.id, out)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out, t) = self.binary("add", a, b, |x, y| x + y)?;
        self.record(Op::Add { a: a.id, b: b.id, out });
        Ok(t)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out, t) = self.binary("sub", a, b, |x, y| x - y)?;
        self.record(Op::Sub { a: a.id, b: b.id, out });
        Ok(t)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out, t) = self.binary("mul", a, b, |x, y| x * y)?;
        self.record(Op::Mul { a: a.id, b: b.id, out });
        Ok(t)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out, t) = self.binary("div", a, b, |x, y| x / y)?;
        self.record(Op::Div { a: a.id, b: b.id, out });
        Ok(t)
    }

    pub fn neg(&mut self, x: Tensor) -> Result<Tensor> {
        let (out, t) = self.unary(x, |v| -v);
        self.record(Op::Neg { x: x.id, out });
        Ok(t)
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let k = E::from_f64(c);
        let (out, t) = self.unary(x, |v| v * k);
        self.record(Op::Scale { x: x.id, c, out });
        Ok(t)
    }

    /// Add the constant `c` to every element.
    pub fn add_scalar(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let k = E::from_f64(c);
        let (out, t) = self.unary(x, |v| v + k);
        self.record(Op::AddScalar { x: x.id, out });
        Ok(t)
    }

    pub fn recip(&mut self, x: Tensor) -> Result<Tensor> {
        let (out, t) = self.unary(x, |v| v.recip());
        self.record(Op::Recip { x: x.id, out });
        Ok(t)
    }

    pub fn sqrt(&mut self, x: Tensor) -> Result<Tensor> {
        let (out, t) = self.unary(x, |v| v.sqrt());
        self.record(Op::Sqrt { x: x.id, out });
        Ok(t)
    }

    pub fn exp(&mut self, x: Tensor) -> Result<Tensor> {
        let (out, t) = self.unary(x, |v| v.exp());
        self.record(Op::Exp { x: x.id, out });
        Ok(t)
    }

    /// Absolute value.  The subgradient at zero is taken to be zero.
    pub fn abs(&mut self, x: Tensor) -> Result<Tensor> {
        let (out, t) = self.unary(x, |v| v.abs());
        self.record(Op::Abs { x: x.id, out });
        Ok(t)
    }

    /// Rectified linear unit; the subgradient at zero is taken to be zero.
    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let zero = E::zero();
        let (out, t) = self.unary(x, |v| if v > zero { v } else { zero });
        self.record(Op::Relu { x: x.id, out });
        Ok(t)
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&mut self, x: Tensor) -> Result<Tensor> {
        let one = E::one();
        let (out, t) = self.unary(x, |v| {
            if v >= E::zero() {
                one / (one + (-v).exp())
            } else {
                let e = v.exp();
                e / (one + e)
            }
        });
        self.record(Op::Sigmoid { x: x.id, out });
        Ok(t)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Tensor) -> Result<Tensor> {
        let mut acc = E::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let out = self.output(vec![1], vec![acc], &[x.id]);
        self.record(Op::SumAll { x: x.id, out: out.id });
        Ok(out)
    }

    /// Mean of all elements, as a `[1]` tensor.  Empty input is rejected.
    pub fn mean_all(&mut self, x: Tensor) -> Result<Tensor> {
        let n = self.numel(x);
        if n == 0 {
            return Err(TensorError::Invalid { op: "mean_all", msg: "empty input".into() });
        }
        let mut acc = E::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let mean = acc / E::from_usize(n);
        let out = self.output(vec![1], vec![mean], &[x.id]);
        self.record(Op::MeanAll { x: x.id, out: out.id });
        Ok(out)
    }
}

// Backward arms.
impl<E: Scalar> Tape<E> {
    pub(crate) fn bw_add(&mut self, a: usize, b: usize, g: &[E]) {
        if self.needs(a) {
            self.accum(a, g.to_vec());
        }
        if self.needs(b) {
            self.accum(b, g.to_vec());
        }
    }

    pub(crate) fn bw_sub(&mut self, a: usize, b: usize, g: &[E]) {
        if self.needs(a) {
            self.accum(a, g.to_vec());
        }
        if self.needs(b) {
            self.accum(b, g.iter().map(|&v| -v).collect());
        }
    }

    pub(crate) fn bw_mul(&mut self, a: usize, b: usize, g: &[E]) {
        if self.needs(a) {
            let da: Vec<E> = g.iter().zip(self.data_of(b)).map(|(&gi, &bv)| gi * bv).collect();
            self.accum(a, da);
        }
        if self.needs(b) {
            let db: Vec<E> = g.iter().zip(self.data_of(a)).map(|(&gi, &av)| gi * av).collect();
            self.accum(b, db);
        }
    }

    pub(crate) fn bw_div(&mut self, a: usize, b: usize, out: usize, g: &[E]) {
        if self.needs(a) {
            let da: Vec<E> = g.iter().zip(self.data_of(b)).map(|(&gi, &bv)| gi / bv).collect();
            self.accum(a, da);
        }
        if self.needs(b) {
            // d(a/b)/db = -out / b
            let db: Vec<E> = g
                .iter()
                .zip(self.data_of(out).iter().zip(self.data_of(b)))
                .map(|(&gi, (&ov, &bv))| -gi * ov / bv)
                .collect();
            self.accum(b, db);
        }
    }

    pub(crate) fn bw_neg(&mut self, x: usize, g: &[E]) {
        if self.needs(x) {
            self.accum(x, g.iter().map(|&v| -v).collect());
        }
    }

    pub(crate) fn bw_scale(&mut self, x: usize, c: f64, g: &[E]) {
        if self.needs(x) {
            let k = E::from_f64(c);
            self.accum(x, g.iter().map(|&v| v * k).collect());
        }
    }

    pub(crate) fn bw_add_scalar(&mut self, x: usize, g: &[E]) {
        if self.needs(x) {
            self.accum(x, g.to_vec());
        }
    }

    pub(crate) fn bw_recip(&mut self, x: usize, out: usize, g: &[E]) {
        if self.needs(x) {
            let dx: Vec<E> = g
                .iter()
                .zip(self.data_of(out))
                .map(|(&gi, &y)| -gi * y * y)
                .collect();
            self.accum(x, dx);
        }
    }

    pub(crate) fn bw_sqrt(&mut self, x: usize, out: usize, g: &[E]) {
        if self.needs(x) {
            let half = E::from_f64(0.5);
            let dx: Vec<E> = g
                .iter()
                .zip(self.data_of(out))
                .map(|(&gi, &y)| gi * half / y)
                .collect();
            self.accum(x, dx);
        }
    }

    pub(crate) fn bw_exp(&mut self, x: usize, out: usize, g: &[E]) {
        if self.needs(x) {
            let dx: Vec<E> = g.iter().zip(self.data_of(out)).map(|(&gi, &y)| gi * y).collect();
            self.accum(x, dx);
        }
    }

    pub(crate) fn bw_abs(&mut self, x: usize, g: &[E]) {
        if self.needs(x) {
            let zero = E::zero();
            let dx: Vec<E> = g
                .iter()
                .zip(self.data_of(x))
                .map(|(&gi, &v)| {
                    if v > zero {
                        gi
                    } else if v < zero {
                        -gi
                    } else {
                        zero
                    }
                })
                .collect();
            self.accum(x, dx);
        }
    }

    pub(crate) fn bw_relu(&mut self, x: usize, g: &[E]) {
        if self.needs(x) {
            let zero = E::zero();
            let dx: Vec<E> = g
                .iter()
                .zip(self.data_of(x))
                .map(|(&gi, &v)| if v > zero { gi } else { zero })
                .collect();
            self.accum(x, dx);
        }
    }

    pub(crate) fn bw_sigmoid(&mut self, x: usize, out: usize, g: &[E]) {
        if self.needs(x) {
            let one = E::one();
            let dx: Vec<E> = g
                .iter()
                .zip(self.data_of(out))
                .map(|(&gi, &y)| gi * y * (one - y))
                .collect();
            self.accum(x, dx);
        }
    }

    pub(crate) fn bw_sum_all(&mut self, x: usize, g: &[E]) {
        if self.needs(x) {
            let n = self.data_of(x).len();
            self.accum(x, vec![g[0]; n]);
        }
    }

    pub(crate) fn bw_mean_all(&mut self, x: usize, g: &[E]) {
        if self.needs(x) {
            let n = self.data_of(x).len();
            let v = g[0] / E::from_usize(n);
            self.accum(x, vec![v; n]);
        }
    }
}
