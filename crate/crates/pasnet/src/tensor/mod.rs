//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] owns every tensor created during one forward pass: node buffers
//! live in an arena and user code holds lightweight [`Tensor`] handles.  Every
//! operation records an [`Op`] step; [`Tape::backward`] replays the steps in
//! reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers.  Tapes are one-shot: build, run `backward` once, read gradients,
//! drop.
//!
//! Reduction orders are fixed, so a given tape replays bit-identically in
//! single-threaded mode regardless of environment.

mod conv;
mod elementwise;
mod linalg;

pub(crate) use conv::axis_lerp;

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].  Only meaningful for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

/// Error raised by tape operations.  Shape errors name the offending
/// dimension so callers can report precisely what disagreed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch at dim {dim}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        dim: usize,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    Length {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error(
        "{op}: output would be empty along dim {dim} for input {shape:?} \
         (kernel {kernel}, stride {stride}, padding {padding}, dilation {dilation})"
    )]
    EmptyOutput {
        op: &'static str,
        dim: usize,
        shape: Vec<usize>,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct Node<E> {
    data: Vec<E>,
    shape: Vec<usize>,
    requires_grad: bool,
    /// True when this node has a `requires_grad` ancestor (or is one itself);
    /// backward skips gradient work for everything else.
    needs: bool,
    grad: Option<Vec<E>>,
}

/// One recorded operation.  Fields hold node ids plus whatever configuration
/// the backward pass cannot recover from the node shapes alone.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Div { a: usize, b: usize, out: usize },
    Neg { x: usize, out: usize },
    Scale { x: usize, c: f64, out: usize },
    AddScalar { x: usize, out: usize },
    Recip { x: usize, out: usize },
    Sqrt { x: usize, out: usize },
    Exp { x: usize, out: usize },
    Abs { x: usize, out: usize },
    Relu { x: usize, out: usize },
    Sigmoid { x: usize, out: usize },
    Matmul { a: usize, b: usize, out: usize },
    Bmm { a: usize, b: usize, out: usize },
    TransposeLast2 { x: usize, out: usize },
    Softmax { x: usize, out: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, out: usize, eps: f64 },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        out: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    AvgPool2d { x: usize, out: usize, kernel: usize, stride: usize, padding: usize },
    UpsampleBilinear { x: usize, out: usize },
    MeanSpatial { x: usize, out: usize },
    MeanChannels { x: usize, out: usize },
    AddChannels { x: usize, b: usize, out: usize },
    MulChannels { x: usize, s: usize, out: usize },
    AddBiasCols { x: usize, b: usize, out: usize },
    ConcatChannels { xs: Vec<usize>, out: usize },
    SliceChannels { x: usize, out: usize, from: usize },
    Reshape { x: usize, out: usize },
    DiffW { x: usize, out: usize },
    DiffH { x: usize, out: usize },
    SumAll { x: usize, out: usize },
    MeanAll { x: usize, out: usize },
    Permute0213 { x: usize, out: usize },
}

/// Arena of tensor nodes plus the recorded operation sequence.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    steps: Vec<Op>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), steps: Vec::new() }
    }

    /// Number of nodes currently on the tape.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of recorded operations.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool, needs: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, requires_grad, needs, grad: None });
        Tensor { id: self.nodes.len() - 1 }
    }

    /// New output node for an op; `needs` is inherited from the inputs.
    pub(crate) fn output(&mut self, shape: Vec<usize>, data: Vec<E>, inputs: &[usize]) -> Tensor {
        let needs = inputs.iter().any(|&i| self.nodes[i].needs);
        self.push_node(shape, data, false, needs)
    }

    /// Constant leaf: participates in the forward pass but receives no
    /// gradient.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<E>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Length { op: "leaf", len: data.len(), shape: shape.to_vec() });
        }
        Ok(self.push_node(shape.to_vec(), data, false, false))
    }

    /// Differentiable leaf (a parameter): `backward` populates its gradient.
    pub fn var(&mut self, shape: &[usize], data: Vec<E>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Length { op: "var", len: data.len(), shape: shape.to_vec() });
        }
        Ok(self.push_node(shape.to_vec(), data, true, true))
    }

    /// Constant scalar leaf of shape `[1]`.
    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push_node(vec![1], vec![E::from_f64(v)], false, false)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.id].data.len()
    }

    pub fn data(&self, t: Tensor) -> &[E] {
        &self.nodes[t.id].data
    }

    /// Gradient of the last `backward` root with respect to `t`, if one was
    /// accumulated.
    pub fn grad(&self, t: Tensor) -> Option<&[E]> {
        self.nodes[t.id].grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    pub(crate) fn record(&mut self, op: Op) {
        self.steps.push(op);
    }

    pub(crate) fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs
    }

    pub(crate) fn data_of(&self, id: usize) -> &[E] {
        &self.nodes[id].data
    }

    pub(crate) fn shape_of(&self, id: usize) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Accumulate a gradient contribution into node `id`.
    pub(crate) fn accum(&mut self, id: usize, add: Vec<E>) {
        let node = &mut self.nodes[id];
        debug_assert_eq!(add.len(), node.data.len());
        match &mut node.grad {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(add) {
                    *gi += ai;
                }
            }
            None => node.grad = Some(add),
        }
    }

    /// Run reverse-mode accumulation from a scalar root.
    ///
    /// After this returns, every `requires_grad` leaf has a populated
    /// gradient (zeros when the root does not depend on it).  Call once per
    /// tape; repeated calls keep accumulating.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        if self.nodes[root.id].data.len() != 1 {
            return Err(TensorError::NonScalarRoot { shape: self.nodes[root.id].shape.clone() });
        }
        self.nodes[root.id].grad = Some(vec![E::one()]);
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && self.nodes[i].grad.is_none() {
                let n = self.nodes[i].data.len();
                self.nodes[i].grad = Some(vec![E::zero(); n]);
            }
        }
        for k in (0..self.steps.len()).rev() {
            let op = self.steps[k].clone();
            let out = op_output(&op);
            if !self.nodes[out].needs {
                continue;
            }
            // Take the output gradient out of the node so the backward arm can
            // read it while mutating input gradients.  A node is produced by
            // exactly one step, so nothing later in this reverse sweep reads
            // it again; restoring keeps it queryable by the caller.
            let g_out = match self.nodes[out].grad.take() {
                Some(g) => g,
                None => continue, // not on any path to the root
            };
            self.apply_backward(&op, &g_out);
            self.nodes[out].grad = Some(g_out);
        }
        Ok(())
    }

    fn apply_backward(&mut self, op: &Op, g: &[E]) {
        match *op {
            Op::Add { a, b, out: _ } => self.bw_add(a, b, g),
            Op::Sub { a, b, out: _ } => self.bw_sub(a, b, g),
            Op::Mul { a, b, out: _ } => self.bw_mul(a, b, g),
            Op::Div { a, b, out } => self.bw_div(a, b, out, g),
            Op::Neg { x, out: _ } => self.bw_neg(x, g),
            Op::Scale { x, c, out: _ } => self.bw_scale(x, c, g),
            Op::AddScalar { x, out: _ } => self.bw_add_scalar(x, g),
            Op::Recip { x, out } => self.bw_recip(x, out, g),
            Op::Sqrt { x, out } => self.bw_sqrt(x, out, g),
            Op::Exp { x, out } => self.bw_exp(x, out, g),
            Op::Abs { x, out: _ } => self.bw_abs(x, g),
            Op::Relu { x, out: _ } => self.bw_relu(x, g),
            Op::Sigmoid { x, out } => self.bw_sigmoid(x, out, g),
            Op::Matmul { a, b, out: _ } => self.bw_matmul(a, b, g),
            Op::Bmm { a, b, out: _ } => self.bw_bmm(a, b, g),
            Op::TransposeLast2 { x, out: _ } => self.bw_transpose_last2(x, g),
            Op::Softmax { x, out, axis } => self.bw_softmax(x, out, axis, g),
            Op::LayerNorm { x, gamma, beta, out: _, eps } => self.bw_layer_norm(x, gamma, beta, eps, g),
            Op::Conv2d { x, w, bias, out: _, stride, padding, dilation } => {
                self.bw_conv2d(x, w, bias, stride, padding, dilation, g)
            }
            Op::AvgPool2d { x, out: _, kernel, stride, padding } => {
                self.bw_avg_pool2d(x, kernel, stride, padding, g)
            }
            Op::UpsampleBilinear { x, out } => self.bw_upsample_bilinear(x, out, g),
            Op::MeanSpatial { x, out: _ } => self.bw_mean_spatial(x, g),
            Op::MeanChannels { x, out: _ } => self.bw_mean_channels(x, g),
            Op::AddChannels { x, b, out: _ } => self.bw_add_channels(x, b, g),
            Op::MulChannels { x, s, out: _ } => self.bw_mul_channels(x, s, g),
            Op::AddBiasCols { x, b, out: _ } => self.bw_add_bias_cols(x, b, g),
            Op::ConcatChannels { ref xs, out: _ } => self.bw_concat_channels(xs, g),
            Op::SliceChannels { x, out, from } => self.bw_slice_channels(x, out, from, g),
            Op::Reshape { x, out: _ } => self.bw_reshape(x, g),
            Op::DiffW { x, out: _ } => self.bw_diff_w(x, g),
            Op::DiffH { x, out: _ } => self.bw_diff_h(x, g),
            Op::SumAll { x, out: _ } => self.bw_sum_all(x, g),
            Op::MeanAll { x, out: _ } => self.bw_mean_all(x, g),
            Op::Permute0213 { x, out: _ } => self.bw_permute_0213(x, g),
        }
    }
}

fn op_output(op: &Op) -> usize {
    match *op {
        Op::Add { out, .. }
        | Op::Sub { out, .. }
        | Op::Mul { out, .. }
        | Op::Div { out, .. }
        | Op::Neg { out, .. }
        | Op::Scale { out, .. }
        | Op::AddScalar { out, .. }
        | Op::Recip { out, .. }
        | Op::Sqrt { out, .. }
        | Op::Exp { out, .. }
        | Op::Abs { out, .. }
        | Op::Relu { out, .. }
        | Op::Sigmoid { out, .. }
        | Op::Matmul { out, .. }
        | Op::Bmm { out, .. }
        | Op::TransposeLast2 { out, .. }
        | Op::Softmax { out, .. }
        | Op::LayerNorm { out, .. }
        | Op::Conv2d { out, .. }
        | Op::AvgPool2d { out, .. }
        | Op::UpsampleBilinear { out, .. }
        | Op::MeanSpatial { out, .. }
        | Op::MeanChannels { out, .. }
        | Op::AddChannels { out, .. }
        | Op::MulChannels { out, .. }
        | Op::AddBiasCols { out, .. }
        | Op::ConcatChannels { out, .. }
        | Op::SliceChannels { out, .. }
        | Op::Reshape { out, .. }
        | Op::DiffW { out, .. }
        | Op::DiffH { out, .. }
        | Op::SumAll { out, .. }
        | Op::MeanAll { out, .. }
        | Op::Permute0213 { out, .. } => out,
    }
}
