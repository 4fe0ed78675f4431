//! Operation tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value, the ids of its
//! inputs and whatever per-lane statistics the backward rule needs. Calling
//! [`Tape::backward`] replays nodes in reverse recorded order, accumulating
//! gradients into every node reachable from the loss whose inputs require
//! them. The tape is single-threaded and nodes are immutable once recorded.

use super::kernels::{axpy, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Forward/eval switch used by layers whose behaviour differs in training
/// (DropKey masking, batch-statistics normalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    AddTiled { x: usize, p: usize, reps: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    MulScalarT { x: usize, s: usize },
    Neg { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Recip { x: usize },
    Relu { x: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    MaskedFill { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    BatchNormTrain { x: usize, gamma: usize, beta: usize },
    BatchNormEval { x: usize, gamma: usize, beta: usize },
    Conv1d { x: usize, k: usize, bias: Option<usize>, stride: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    SliceRows { x: usize, r0: usize },
    SliceCols { x: usize, c0: usize },
    GatherRows { x: usize, ids: Vec<usize> },
    ChannelsLast { x: usize },
    RowL2Normalize { x: usize },
    TakeDiag { x: usize },
    BceWithLogits { x: usize },
    SoftmaxCrossEntropy { x: usize, classes: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
    grad: Option<Vec<f64>>,
    /// Per-op stash: lane statistics, masks as 0/1, normalization constants.
    saved: Vec<f64>,
}

/// Ordered record of forward operations; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; gradient participation follows
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let requires = t.requires_grad;
        self.push(t, Op::Leaf, requires, Vec::new())
    }

    /// Records an input tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false, Vec::new())
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let t = &self.nodes[id.0].value;
        debug_assert_eq!(t.numel(), 1);
        t.data()[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: TensorId) -> Option<Tensor> {
        self.nodes[id.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool, saved: Vec<f64>) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires,
            grad: None,
            saved,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires)
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    // ---- elementwise and scalar ops ------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, |aa, bb| Op::Add { a: aa, b: bb })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, |aa, bb| Op::Sub { a: aa, b: bb })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, |aa, bb| Op::Mul { a: aa, b: bb })
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> TensorResult<TensorId> {
        if self.val(a.0).shape() != self.val(b.0).shape() {
            return Err(TensorError::Dim(format!(
                "{name}: shapes {:?} vs {:?}",
                self.val(a.0).shape(),
                self.val(b.0).shape()
            )));
        }
        let data: Vec<f64> = self
            .val(a.0)
            .data()
            .iter()
            .zip(self.val(b.0).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.val(a.0).shape().to_vec();
        let requires = self.req(&[a.0, b.0]);
        Ok(self.push(Tensor::new(shape, data)?, op(a.0, b.0), requires, Vec::new()))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let t = self.val(x.0);
        let data: Vec<f64> = t.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("scale shape");
        let requires = self.req(&[x.0]);
        self.push(value, Op::Scale { x: x.0, c }, requires, Vec::new())
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let t = self.val(x.0);
        let data: Vec<f64> = t.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("add_scalar shape");
        let requires = self.req(&[x.0]);
        self.push(value, Op::AddScalar { x: x.0 }, requires, Vec::new())
    }

    /// Elementwise multiply by a one-element tensor, broadcast over `x`.
    pub fn mul_scalar_t(&mut self, x: TensorId, s: TensorId) -> TensorResult<TensorId> {
        if self.val(s.0).numel() != 1 {
            return Err(TensorError::Dim("mul_scalar_t: scalar operand".into()));
        }
        let sv = self.val(s.0).data()[0];
        let t = self.val(x.0);
        let data: Vec<f64> = t.data().iter().map(|&v| v * sv).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let requires = self.req(&[x.0, s.0]);
        Ok(self.push(value, Op::MulScalarT { x: x.0, s: s.0 }, requires, Vec::new()))
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        let t = self.val(x.0);
        let data: Vec<f64> = t.data().iter().map(|&v| -v).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("neg shape");
        let requires = self.req(&[x.0]);
        self.push(value, Op::Neg { x: x.0 }, requires, Vec::new())
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.exp(), |i| Op::Exp { x: i })
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.ln(), |i| Op::Log { x: i })
    }

    pub fn recip(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| 1.0 / v, |i| Op::Recip { x: i })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), |i| Op::Relu { x: i })
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, gelu_fwd, |i| Op::Gelu { x: i })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, sigmoid, |i| Op::Sigmoid { x: i })
    }

    fn unary(
        &mut self,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> TensorId {
        let t = self.val(x.0);
        let data: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("unary shape");
        let requires = self.req(&[x.0]);
        self.push(value, op(x.0), requires, Vec::new())
    }

    // ---- broadcasts ------------------------------------------------------

    /// `x: [m,n] + b: [n]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (xs, bs) = (self.val(x.0).shape().to_vec(), self.val(b.0).shape().to_vec());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(TensorError::Dim(format!("add_bias: {xs:?} + {bs:?}")));
        }
        let (m, n) = (xs[0], xs[1]);
        let xv = self.val(x.0).data();
        let bv = self.val(b.0).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = xv[i * n + j] + bv[j];
            }
        }
        let requires = self.req(&[x.0, b.0]);
        Ok(self.push(
            Tensor::new(xs, data)?,
            Op::AddBias { x: x.0, b: b.0 },
            requires,
            Vec::new(),
        ))
    }

    /// `x: [reps*t, d] + p: [t, d]` with `p` tiled over `reps` blocks
    /// (positional embeddings broadcast over a batch).
    pub fn add_tiled(&mut self, x: TensorId, p: TensorId, reps: usize) -> TensorResult<TensorId> {
        let (xs, ps) = (self.val(x.0).shape().to_vec(), self.val(p.0).shape().to_vec());
        if xs.len() != 2 || ps.len() != 2 || xs[1] != ps[1] || xs[0] != reps * ps[0] {
            return Err(TensorError::Dim(format!(
                "add_tiled: {xs:?} + {ps:?} x{reps}"
            )));
        }
        let block = ps[0] * ps[1];
        let xv = self.val(x.0).data();
        let pv = self.val(p.0).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..reps {
            for i in 0..block {
                data[r * block + i] = xv[r * block + i] + pv[i];
            }
        }
        let requires = self.req(&[x.0, p.0]);
        Ok(self.push(
            Tensor::new(xs, data)?,
            Op::AddTiled {
                x: x.0,
                p: p.0,
                reps,
            },
            requires,
            Vec::new(),
        ))
    }

    // ---- matrix ops ------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (self.val(a.0).shape().to_vec(), self.val(b.0).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_nn_acc(self.val(a.0).data(), self.val(b.0).data(), m, k, n, &mut data);
        let requires = self.req(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::Matmul { a: a.0, b: b.0 },
            requires,
            Vec::new(),
        ))
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dim(format!("transpose: rank {}", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.val(x.0).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![n, m], data)?,
            Op::Transpose { x: x.0 },
            requires,
            Vec::new(),
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> TensorResult<TensorId> {
        let t = self.val(x.0);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::Dim(format!(
                "reshape: {:?} -> {shape:?}",
                t.shape()
            )));
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        let requires = self.req(&[x.0]);
        Ok(self.push(value, Op::Reshape { x: x.0 }, requires, Vec::new()))
    }

    /// Concatenation of 2-D tensors along `axis` (0 stacks rows, 1 columns).
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> TensorResult<TensorId> {
        if xs.is_empty() || axis > 1 {
            return Err(TensorError::Dim("concat: empty input or bad axis".into()));
        }
        let first = self.val(xs[0].0).shape().to_vec();
        if first.len() != 2 {
            return Err(TensorError::Dim("concat: rank-2 only".into()));
        }
        let fixed = 1 - axis;
        let mut total = 0;
        for x in xs {
            let s = self.val(x.0).shape();
            if s.len() != 2 || s[fixed] != first[fixed] {
                return Err(TensorError::Dim(format!(
                    "concat: {s:?} incompatible with {first:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (m, n) = (shape[0], shape[1]);
        let mut data = vec![0.0; m * n];
        if axis == 0 {
            let mut row = 0;
            for x in xs {
                let t = self.val(x.0);
                let rows = t.shape()[0];
                data[row * n..(row + rows) * n].copy_from_slice(t.data());
                row += rows;
            }
        } else {
            let mut col = 0;
            for x in xs {
                let t = self.val(x.0);
                let cols = t.shape()[1];
                for i in 0..m {
                    data[i * n + col..i * n + col + cols]
                        .copy_from_slice(&t.data()[i * cols..(i + 1) * cols]);
                }
                col += cols;
            }
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let requires = self.req(&ids);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat { xs: ids, axis },
            requires,
            Vec::new(),
        ))
    }

    pub fn slice_rows(&mut self, x: TensorId, r0: usize, r1: usize) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 2 || r0 > r1 || r1 > s[0] {
            return Err(TensorError::Dim(format!("slice_rows {r0}..{r1} of {s:?}")));
        }
        let n = s[1];
        let data = self.val(x.0).data()[r0 * n..r1 * n].to_vec();
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![r1 - r0, n], data)?,
            Op::SliceRows { x: x.0, r0 },
            requires,
            Vec::new(),
        ))
    }

    pub fn slice_cols(&mut self, x: TensorId, c0: usize, c1: usize) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 2 || c0 > c1 || c1 > s[1] {
            return Err(TensorError::Dim(format!("slice_cols {c0}..{c1} of {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let w = c1 - c0;
        let xv = self.val(x.0).data();
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&xv[i * n + c0..i * n + c1]);
        }
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![m, w], data)?,
            Op::SliceCols { x: x.0, c0 },
            requires,
            Vec::new(),
        ))
    }

    /// `out[i] = x[ids[i]]` over rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: TensorId, ids: &[usize]) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dim("gather_rows: rank-2 only".into()));
        }
        let n = s[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Param(format!(
                "gather_rows: row {bad} out of range {}",
                s[0]
            )));
        }
        let xv = self.val(x.0).data();
        let mut data = vec![0.0; ids.len() * n];
        for (i, &r) in ids.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), n], data)?,
            Op::GatherRows {
                x: x.0,
                ids: ids.to_vec(),
            },
            requires,
            Vec::new(),
        ))
    }

    /// `[B,C,L] -> [B*L, C]`: turns channel maps into per-position tokens.
    pub fn channels_last(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 3 {
            return Err(TensorError::Dim("channels_last: rank-3 only".into()));
        }
        let (b, c, l) = (s[0], s[1], s[2]);
        let xv = self.val(x.0).data();
        let mut data = vec![0.0; b * c * l];
        for bi in 0..b {
            for ci in 0..c {
                for li in 0..l {
                    data[(bi * l + li) * c + ci] = xv[(bi * c + ci) * l + li];
                }
            }
        }
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![b * l, c], data)?,
            Op::ChannelsLast { x: x.0 },
            requires,
            Vec::new(),
        ))
    }

    pub fn take_diag(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::Dim(format!("take_diag: {s:?} not square")));
        }
        let n = s[0];
        let xv = self.val(x.0).data();
        let data: Vec<f64> = (0..n).map(|i| xv[i * n + i]).collect();
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![n], data)?,
            Op::TakeDiag { x: x.0 },
            requires,
            Vec::new(),
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.val(x.0).data().iter().sum();
        let requires = self.req(&[x.0]);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, requires, Vec::new())
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let t = self.val(x.0);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let requires = self.req(&[x.0]);
        self.push(Tensor::scalar(s), Op::MeanAll { x: x.0 }, requires, Vec::new())
    }

    // ---- normalizations and softmaxes --------------------------------------

    /// Max-subtracted softmax along `axis`; lanes sum to 1.
    ///
    /// `-inf` logits produce exact zeros; an all-`-inf` lane yields NaN
    /// (callers guarantee at least one live entry). NaN inputs propagate.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorResult<TensorId> {
        let (shape, lanes) = lane_layout(self.val(x.0).shape(), axis)?;
        let xv = self.val(x.0).data();
        let mut data = vec![0.0; xv.len()];
        for (base, stride, len) in lanes {
            let mut m = f64::NEG_INFINITY;
            for i in 0..len {
                m = m.max(xv[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (xv[base + i * stride] - m).exp();
                data[base + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                data[base + i * stride] /= sum;
            }
        }
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Softmax { x: x.0, axis },
            requires,
            Vec::new(),
        ))
    }

    /// Numerically stable `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> TensorResult<TensorId> {
        let (shape, lanes) = lane_layout(self.val(x.0).shape(), axis)?;
        let xv = self.val(x.0).data();
        let mut data = vec![0.0; xv.len()];
        for (base, stride, len) in lanes {
            let mut m = f64::NEG_INFINITY;
            for i in 0..len {
                m = m.max(xv[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                sum += (xv[base + i * stride] - m).exp();
            }
            let lse = m + sum.ln();
            for i in 0..len {
                data[base + i * stride] = xv[base + i * stride] - lse;
            }
        }
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::LogSoftmax { x: x.0, axis },
            requires,
            Vec::new(),
        ))
    }

    /// Replaces `x[i]` with `value` wherever `mask[i]` is set.
    pub fn masked_fill(&mut self, x: TensorId, mask: &[bool], value: f64) -> TensorResult<TensorId> {
        let t = self.val(x.0);
        if mask.len() != t.numel() {
            return Err(TensorError::Dim(format!(
                "masked_fill: mask len {} vs {} elements",
                mask.len(),
                t.numel()
            )));
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let saved: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        let requires = self.req(&[x.0]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MaskedFill { x: x.0 }, requires, saved))
    }

    /// Row-wise layer normalization of `x: [n,d]` with affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dim("layer_norm: rank-2 only".into()));
        }
        let (n, d) = (s[0], s[1]);
        if self.val(gamma.0).shape() != [d] || self.val(beta.0).shape() != [d] {
            return Err(TensorError::Dim("layer_norm: affine shape".into()));
        }
        let xv = self.val(x.0).data();
        let gv = self.val(gamma.0).data();
        let bv = self.val(beta.0).data();
        let mut data = vec![0.0; n * d];
        let mut saved = vec![0.0; 2 * n]; // mu, inv_std per row
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            saved[2 * i] = mu;
            saved[2 * i + 1] = inv;
            for j in 0..d {
                data[i * d + j] = gv[j] * (row[j] - mu) * inv + bv[j];
            }
        }
        let requires = self.req(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(s, data)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            requires,
            saved,
        ))
    }

    /// Batch normalization with batch statistics; `x` is `[B,C]` or `[B,C,L]`,
    /// reducing everything but the channel axis. Returns the node plus the
    /// biased batch mean/variance per channel so callers can maintain running
    /// statistics outside the tape.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorResult<(TensorId, Vec<f64>, Vec<f64>)> {
        let layout = BnLayout::of(self.val(x.0).shape())?;
        let c = layout.channels;
        if self.val(gamma.0).shape() != [c] || self.val(beta.0).shape() != [c] {
            return Err(TensorError::Dim("batch_norm: affine shape".into()));
        }
        let xv = self.val(x.0).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        layout.for_channel(|ci, idx| mean[ci] += xv[idx]);
        let m = layout.reduce_count() as f64;
        mean.iter_mut().for_each(|v| *v /= m);
        layout.for_channel(|ci, idx| {
            let d = xv[idx] - mean[ci];
            var[ci] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= m);

        let gv = self.val(gamma.0).data().to_vec();
        let bv = self.val(beta.0).data().to_vec();
        let mut data = vec![0.0; xv.len()];
        let mut saved = vec![0.0; 2 * c]; // mu, inv_std per channel
        for ci in 0..c {
            saved[2 * ci] = mean[ci];
            saved[2 * ci + 1] = 1.0 / (var[ci] + eps).sqrt();
        }
        layout.for_channel(|ci, idx| {
            data[idx] = gv[ci] * (xv[idx] - saved[2 * ci]) * saved[2 * ci + 1] + bv[ci];
        });
        let shape = self.val(x.0).shape().to_vec();
        let requires = self.req(&[x.0, gamma.0, beta.0]);
        let id = self.push(
            Tensor::new(shape, data)?,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            requires,
            saved,
        );
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> TensorResult<TensorId> {
        let layout = BnLayout::of(self.val(x.0).shape())?;
        let c = layout.channels;
        if self.val(gamma.0).shape() != [c]
            || self.val(beta.0).shape() != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(TensorError::Dim("batch_norm_eval: channel shapes".into()));
        }
        let xv = self.val(x.0).data();
        let gv = self.val(gamma.0).data().to_vec();
        let bv = self.val(beta.0).data().to_vec();
        let mut saved = vec![0.0; 2 * c];
        for ci in 0..c {
            saved[2 * ci] = running_mean[ci];
            saved[2 * ci + 1] = 1.0 / (running_var[ci] + eps).sqrt();
        }
        let mut data = vec![0.0; xv.len()];
        layout.for_channel(|ci, idx| {
            data[idx] = gv[ci] * (xv[idx] - saved[2 * ci]) * saved[2 * ci + 1] + bv[ci];
        });
        let shape = self.val(x.0).shape().to_vec();
        let requires = self.req(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            requires,
            saved,
        ))
    }

    /// L2-normalizes each row of `x: [n,d]`; a row with norm below `1e-12`
    /// has no defined direction and is a numeric error.
    pub fn row_l2_normalize(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dim("row_l2_normalize: rank-2 only".into()));
        }
        let (n, d) = (s[0], s[1]);
        let xv = self.val(x.0).data();
        let mut data = vec![0.0; n * d];
        let mut saved = vec![0.0; n];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let nrm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if nrm < 1e-12 {
                return Err(TensorError::Numeric(format!(
                    "row_l2_normalize: row {i} has vanishing norm"
                )));
            }
            saved[i] = nrm;
            for j in 0..d {
                data[i * d + j] = row[j] / nrm;
            }
        }
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::new(s, data)?,
            Op::RowL2Normalize { x: x.0 },
            requires,
            saved,
        ))
    }

    // ---- convolution --------------------------------------------------------

    /// 1-D cross-correlation. `x` is `[C_in, L]` or `[B, C_in, L]`,
    /// `kernels` is `[C_out, C_in, K]`; output length `(L-K)/stride + 1`.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        kernels: TensorId,
        bias: Option<TensorId>,
        stride: usize,
    ) -> TensorResult<TensorId> {
        if stride == 0 {
            return Err(TensorError::Param("conv1d: stride must be positive".into()));
        }
        let xs = self.val(x.0).shape().to_vec();
        let ks = self.val(kernels.0).shape().to_vec();
        if ks.len() != 3 {
            return Err(TensorError::Dim("conv1d: kernels must be rank 3".into()));
        }
        let (batched, b, c_in, l) = match xs.len() {
            2 => (false, 1, xs[0], xs[1]),
            3 => (true, xs[0], xs[1], xs[2]),
            _ => return Err(TensorError::Dim("conv1d: input rank".into())),
        };
        let (c_out, kc_in, k) = (ks[0], ks[1], ks[2]);
        if kc_in != c_in {
            return Err(TensorError::Dim(format!(
                "conv1d: input channels {c_in} vs kernel {kc_in}"
            )));
        }
        if k > l {
            return Err(TensorError::Dim(format!(
                "conv1d: kernel {k} larger than input {l}"
            )));
        }
        if let Some(bid) = bias {
            if self.val(bid.0).shape() != [c_out] {
                return Err(TensorError::Dim("conv1d: bias shape".into()));
            }
        }
        let l_out = (l - k) / stride + 1;
        let xv = self.val(x.0).data();
        let kv = self.val(kernels.0).data();
        let bv: Option<Vec<f64>> = bias.map(|bid| self.val(bid.0).data().to_vec());
        let mut data = vec![0.0; b * c_out * l_out];
        for bi in 0..b {
            for co in 0..c_out {
                let base_out = (bi * c_out + co) * l_out;
                for t in 0..l_out {
                    let mut acc = bv.as_ref().map_or(0.0, |bb| bb[co]);
                    for ci in 0..c_in {
                        let xrow = &xv[(bi * c_in + ci) * l + t * stride..];
                        let krow = &kv[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                        for (j, &kvj) in krow.iter().enumerate() {
                            acc += xrow[j] * kvj;
                        }
                    }
                    data[base_out + t] = acc;
                }
            }
        }
        let shape = if batched {
            vec![b, c_out, l_out]
        } else {
            vec![c_out, l_out]
        };
        let mut inputs = vec![x.0, kernels.0];
        if let Some(bid) = bias {
            inputs.push(bid.0);
        }
        let requires = self.req(&inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Conv1d {
                x: x.0,
                k: kernels.0,
                bias: bias.map(|bb| bb.0),
                stride,
            },
            requires,
            Vec::new(),
        ))
    }

    // ---- losses ----------------------------------------------------------

    /// Mean binary cross-entropy over logits `x: [n,c]` against targets in
    /// `[0,1]`, computed in the stable `max(x,0) - x*t + ln(1+exp(-|x|))` form.
    pub fn bce_with_logits(&mut self, x: TensorId, targets: &[f64]) -> TensorResult<TensorId> {
        let t = self.val(x.0);
        if targets.len() != t.numel() {
            return Err(TensorError::Dim("bce_with_logits: target length".into()));
        }
        let mut acc = 0.0;
        for (&xv, &tv) in t.data().iter().zip(targets) {
            acc += xv.max(0.0) - xv * tv + (-xv.abs()).exp().ln_1p();
        }
        let loss = acc / t.numel() as f64;
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { x: x.0 },
            requires,
            targets.to_vec(),
        ))
    }

    /// Mean softmax cross-entropy of logits `x: [n,c]` against class indices.
    pub fn softmax_cross_entropy(
        &mut self,
        x: TensorId,
        classes: &[usize],
    ) -> TensorResult<TensorId> {
        let s = self.val(x.0).shape().to_vec();
        if s.len() != 2 || classes.len() != s[0] {
            return Err(TensorError::Dim("softmax_cross_entropy: shapes".into()));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = classes.iter().find(|&&cl| cl >= c) {
            return Err(TensorError::Param(format!(
                "softmax_cross_entropy: class {bad} out of range {c}"
            )));
        }
        let xv = self.val(x.0).data();
        let mut acc = 0.0;
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            acc += lse - row[classes[i]];
        }
        let loss = acc / n as f64;
        let requires = self.req(&[x.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                x: x.0,
                classes: classes.to_vec(),
            },
            requires,
            Vec::new(),
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Replays nodes in reverse order, accumulating gradients from `loss`
    /// (a one-element tensor). Call once per tape.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if self.val(loss.0).numel() != 1 {
            return Err(TensorError::Param(
                "backward: loss must be a one-element tensor".into(),
            ));
        }
        if !self.nodes[loss.0].requires {
            return Ok(()); // nothing upstream wants a gradient
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.clone().expect("checked above");
            self.backward_node(i, &op, &g)?;
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires {
            return;
        }
        let n = self.nodes[id].value.numel();
        let slot = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backward_node(&mut self, i: usize, op: &Op, g: &[f64]) -> TensorResult<()> {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.val(a).shape().to_vec();
                let sb = self.val(b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a].requires {
                    let bvals = self.val(b).data().to_vec();
                    self.acc_grad(a, |da| matmul_nt_acc(g, &bvals, m, n, k, da));
                }
                if self.nodes[b].requires {
                    let avals = self.val(a).data().to_vec();
                    self.acc_grad(b, |db| matmul_tn_acc(&avals, g, m, k, n, db));
                }
            }
            Op::Add { a, b } => {
                self.acc_grad(a, |da| axpy(1.0, g, da));
                self.acc_grad(b, |db| axpy(1.0, g, db));
            }
            Op::Sub { a, b } => {
                self.acc_grad(a, |da| axpy(1.0, g, da));
                self.acc_grad(b, |db| axpy(-1.0, g, db));
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires {
                    let bvals = self.val(b).data().to_vec();
                    self.acc_grad(a, |da| {
                        for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&bvals) {
                            *d += gv * bv;
                        }
                    });
                }
                if self.nodes[b].requires {
                    let avals = self.val(a).data().to_vec();
                    self.acc_grad(b, |db| {
                        for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&avals) {
                            *d += gv * av;
                        }
                    });
                }
            }
            Op::AddBias { x, b } => {
                let n = self.val(b).numel();
                self.acc_grad(x, |dx| axpy(1.0, g, dx));
                self.acc_grad(b, |db| {
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                });
            }
            Op::AddTiled { x, p, reps } => {
                let block = self.val(p).numel();
                self.acc_grad(x, |dx| axpy(1.0, g, dx));
                self.acc_grad(p, |dp| {
                    for r in 0..reps {
                        axpy(1.0, &g[r * block..(r + 1) * block], dp);
                    }
                });
            }
            Op::Scale { x, c } => self.acc_grad(x, |dx| axpy(c, g, dx)),
            Op::AddScalar { x } => self.acc_grad(x, |dx| axpy(1.0, g, dx)),
            Op::MulScalarT { x, s } => {
                let sv = self.val(s).data()[0];
                if self.nodes[x].requires {
                    self.acc_grad(x, |dx| axpy(sv, g, dx));
                }
                if self.nodes[s].requires {
                    let xv = self.val(x).data().to_vec();
                    self.acc_grad(s, |ds| {
                        ds[0] += g.iter().zip(&xv).map(|(&gv, &xvv)| gv * xvv).sum::<f64>();
                    });
                }
            }
            Op::Neg { x } => self.acc_grad(x, |dx| axpy(-1.0, g, dx)),
            Op::Exp { x } => {
                let yv = self.nodes[i].value.data().to_vec();
                self.acc_grad(x, |dx| {
                    for ((d, &gv), &yvv) in dx.iter_mut().zip(g).zip(&yv) {
                        *d += gv * yvv;
                    }
                });
            }
            Op::Log { x } => {
                let xv = self.val(x).data().to_vec();
                self.acc_grad(x, |dx| {
                    for ((d, &gv), &xvv) in dx.iter_mut().zip(g).zip(&xv) {
                        *d += gv / xvv;
                    }
                });
            }
            Op::Recip { x } => {
                let yv = self.nodes[i].value.data().to_vec();
                self.acc_grad(x, |dx| {
                    for ((d, &gv), &yvv) in dx.iter_mut().zip(g).zip(&yv) {
                        *d -= gv * yvv * yvv;
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.val(x).data().to_vec();
                self.acc_grad(x, |dx| {
                    for ((d, &gv), &xvv) in dx.iter_mut().zip(g).zip(&xv) {
                        if xvv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.val(x).data().to_vec();
                self.acc_grad(x, |dx| {
                    for ((d, &gv), &xvv) in dx.iter_mut().zip(g).zip(&xv) {
                        *d += gv * gelu_bwd(xvv);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yv = self.nodes[i].value.data().to_vec();
                self.acc_grad(x, |dx| {
                    for ((d, &gv), &yvv) in dx.iter_mut().zip(g).zip(&yv) {
                        *d += gv * yvv * (1.0 - yvv);
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.acc_grad(x, |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
            Op::MeanAll { x } => {
                let gv = g[0] / self.val(x).numel() as f64;
                self.acc_grad(x, |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
            Op::Softmax { x, axis } => {
                let yv = self.nodes[i].value.data().to_vec();
                let (_, lanes) = lane_layout(self.val(x).shape(), axis)?;
                self.acc_grad(x, |dx| {
                    for (base, stride, len) in lanes {
                        let mut dot = 0.0;
                        for ii in 0..len {
                            dot += g[base + ii * stride] * yv[base + ii * stride];
                        }
                        for ii in 0..len {
                            let idx = base + ii * stride;
                            dx[idx] += yv[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let yv = self.nodes[i].value.data().to_vec();
                let (_, lanes) = lane_layout(self.val(x).shape(), axis)?;
                self.acc_grad(x, |dx| {
                    for (base, stride, len) in lanes {
                        let mut gsum = 0.0;
                        for ii in 0..len {
                            gsum += g[base + ii * stride];
                        }
                        for ii in 0..len {
                            let idx = base + ii * stride;
                            dx[idx] += g[idx] - yv[idx].exp() * gsum;
                        }
                    }
                });
            }
            Op::MaskedFill { x } => {
                let keep: Vec<f64> = self.nodes[i].saved.clone();
                self.acc_grad(x, |dx| {
                    for ((d, &gv), &masked) in dx.iter_mut().zip(g).zip(&keep) {
                        if masked == 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let s = self.val(x).shape().to_vec();
                let (n, d) = (s[0], s[1]);
                let xv = self.val(x).data().to_vec();
                let gv = self.val(gamma).data().to_vec();
                let saved = self.nodes[i].saved.clone();
                let xhat = |ii: usize, j: usize| (xv[ii * d + j] - saved[2 * ii]) * saved[2 * ii + 1];
                if self.nodes[beta].requires {
                    self.acc_grad(beta, |db| {
                        for ii in 0..n {
                            for j in 0..d {
                                db[j] += g[ii * d + j];
                            }
                        }
                    });
                }
                if self.nodes[gamma].requires {
                    self.acc_grad(gamma, |dg| {
                        for ii in 0..n {
                            for j in 0..d {
                                dg[j] += g[ii * d + j] * xhat(ii, j);
                            }
                        }
                    });
                }
                if self.nodes[x].requires {
                    self.acc_grad(x, |dx| {
                        for ii in 0..n {
                            let inv = saved[2 * ii + 1];
                            let mut sum_dh = 0.0;
                            let mut sum_dh_xh = 0.0;
                            for j in 0..d {
                                let dh = g[ii * d + j] * gv[j];
                                sum_dh += dh;
                                sum_dh_xh += dh * xhat(ii, j);
                            }
                            let dm = d as f64;
                            for j in 0..d {
                                let dh = g[ii * d + j] * gv[j];
                                dx[ii * d + j] +=
                                    inv * (dh - sum_dh / dm - xhat(ii, j) * sum_dh_xh / dm);
                            }
                        }
                    });
                }
            }
            Op::BatchNormTrain { x, gamma, beta } => {
                let layout = BnLayout::of(self.val(x).shape())?;
                let c = layout.channels;
                let m = layout.reduce_count() as f64;
                let xv = self.val(x).data().to_vec();
                let gv = self.val(gamma).data().to_vec();
                let saved = self.nodes[i].saved.clone();
                let mut sum_g = vec![0.0; c];
                let mut sum_g_xh = vec![0.0; c];
                layout.for_channel(|ci, idx| {
                    let xh = (xv[idx] - saved[2 * ci]) * saved[2 * ci + 1];
                    sum_g[ci] += g[idx];
                    sum_g_xh[ci] += g[idx] * xh;
                });
                if self.nodes[beta].requires {
                    self.acc_grad(beta, |db| axpy(1.0, &sum_g, db));
                }
                if self.nodes[gamma].requires {
                    self.acc_grad(gamma, |dg| axpy(1.0, &sum_g_xh, dg));
                }
                if self.nodes[x].requires {
                    self.acc_grad(x, |dx| {
                        layout.for_channel(|ci, idx| {
                            let xh = (xv[idx] - saved[2 * ci]) * saved[2 * ci + 1];
                            dx[idx] += gv[ci] * saved[2 * ci + 1] / m
                                * (m * g[idx] - sum_g[ci] - xh * sum_g_xh[ci]);
                        });
                    });
                }
            }
            Op::BatchNormEval { x, gamma, beta } => {
                let layout = BnLayout::of(self.val(x).shape())?;
                let xv = self.val(x).data().to_vec();
                let gv = self.val(gamma).data().to_vec();
                let saved = self.nodes[i].saved.clone();
                if self.nodes[beta].requires {
                    self.acc_grad(beta, |db| {
                        layout.for_channel(|ci, idx| db[ci] += g[idx]);
                    });
                }
                if self.nodes[gamma].requires {
                    self.acc_grad(gamma, |dg| {
                        layout.for_channel(|ci, idx| {
                            dg[ci] += g[idx] * (xv[idx] - saved[2 * ci]) * saved[2 * ci + 1];
                        });
                    });
                }
                if self.nodes[x].requires {
                    self.acc_grad(x, |dx| {
                        layout.for_channel(|ci, idx| {
                            dx[idx] += g[idx] * gv[ci] * saved[2 * ci + 1];
                        });
                    });
                }
            }
            Op::Conv1d { x, k, bias, stride } => {
                let xs = self.val(x).shape().to_vec();
                let ks = self.val(k).shape().to_vec();
                let (b, c_in, l) = match xs.len() {
                    2 => (1, xs[0], xs[1]),
                    _ => (xs[0], xs[1], xs[2]),
                };
                let (c_out, _, kk) = (ks[0], ks[1], ks[2]);
                let l_out = (l - kk) / stride + 1;
                let xv = self.val(x).data().to_vec();
                let kv = self.val(k).data().to_vec();
                if self.nodes[x].requires {
                    self.acc_grad(x, |dx| {
                        for bi in 0..b {
                            for co in 0..c_out {
                                let gbase = (bi * c_out + co) * l_out;
                                for t in 0..l_out {
                                    let gv = g[gbase + t];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        let xbase = (bi * c_in + ci) * l + t * stride;
                                        let kbase = (co * c_in + ci) * kk;
                                        for j in 0..kk {
                                            dx[xbase + j] += gv * kv[kbase + j];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if self.nodes[k].requires {
                    self.acc_grad(k, |dk| {
                        for bi in 0..b {
                            for co in 0..c_out {
                                let gbase = (bi * c_out + co) * l_out;
                                for t in 0..l_out {
                                    let gv = g[gbase + t];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        let xbase = (bi * c_in + ci) * l + t * stride;
                                        let kbase = (co * c_in + ci) * kk;
                                        for j in 0..kk {
                                            dk[kbase + j] += gv * xv[xbase + j];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if let Some(bid) = bias {
                    if self.nodes[bid].requires {
                        self.acc_grad(bid, |db| {
                            for bi in 0..b {
                                for co in 0..c_out {
                                    let gbase = (bi * c_out + co) * l_out;
                                    for t in 0..l_out {
                                        db[co] += g[gbase + t];
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::Transpose { x } => {
                let s = self.val(x).shape().to_vec();
                let (m, n) = (s[0], s[1]);
                self.acc_grad(x, |dx| {
                    for ii in 0..m {
                        for j in 0..n {
                            dx[ii * n + j] += g[j * m + ii];
                        }
                    }
                });
            }
            Op::Reshape { x } => self.acc_grad(x, |dx| axpy(1.0, g, dx)),
            Op::Concat { ref xs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let n_out = out_shape[1];
                let mut offset = 0;
                for &xid in xs {
                    let s = self.val(xid).shape().to_vec();
                    let (rows, cols) = (s[0], s[1]);
                    let off = offset;
                    if axis == 0 {
                        self.acc_grad(xid, |dx| {
                            axpy(1.0, &g[off * n_out..(off + rows) * n_out], dx);
                        });
                        offset += rows;
                    } else {
                        self.acc_grad(xid, |dx| {
                            for r in 0..rows {
                                for cc in 0..cols {
                                    dx[r * cols + cc] += g[r * n_out + off + cc];
                                }
                            }
                        });
                        offset += cols;
                    }
                }
            }
            Op::SliceRows { x, r0 } => {
                let n = self.val(x).shape()[1];
                let rows = self.nodes[i].value.shape()[0];
                self.acc_grad(x, |dx| {
                    axpy(1.0, g, &mut dx[r0 * n..(r0 + rows) * n]);
                });
            }
            Op::SliceCols { x, c0 } => {
                let s = self.val(x).shape().to_vec();
                let (m, n) = (s[0], s[1]);
                let w = self.nodes[i].value.shape()[1];
                self.acc_grad(x, |dx| {
                    for r in 0..m {
                        for cc in 0..w {
                            dx[r * n + c0 + cc] += g[r * w + cc];
                        }
                    }
                });
            }
            Op::GatherRows { x, ref ids } => {
                let n = self.val(x).shape()[1];
                self.acc_grad(x, |dx| {
                    for (row, &src) in ids.iter().enumerate() {
                        axpy(1.0, &g[row * n..(row + 1) * n], &mut dx[src * n..(src + 1) * n]);
                    }
                });
            }
            Op::ChannelsLast { x } => {
                let s = self.val(x).shape().to_vec();
                let (b, c, l) = (s[0], s[1], s[2]);
                self.acc_grad(x, |dx| {
                    for bi in 0..b {
                        for ci in 0..c {
                            for li in 0..l {
                                dx[(bi * c + ci) * l + li] += g[(bi * l + li) * c + ci];
                            }
                        }
                    }
                });
            }
            Op::RowL2Normalize { x } => {
                let s = self.val(x).shape().to_vec();
                let (n, d) = (s[0], s[1]);
                let yv = self.nodes[i].value.data().to_vec();
                let saved = self.nodes[i].saved.clone();
                self.acc_grad(x, |dx| {
                    for ii in 0..n {
                        let y = &yv[ii * d..(ii + 1) * d];
                        let gr = &g[ii * d..(ii + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(&a, &bb)| a * bb).sum();
                        for j in 0..d {
                            dx[ii * d + j] += (gr[j] - y[j] * dot) / saved[ii];
                        }
                    }
                });
            }
            Op::TakeDiag { x } => {
                let n = self.val(x).shape()[0];
                self.acc_grad(x, |dx| {
                    for ii in 0..n {
                        dx[ii * n + ii] += g[ii];
                    }
                });
            }
            Op::BceWithLogits { x } => {
                let xv = self.val(x).data().to_vec();
                let targets = self.nodes[i].saved.clone();
                let scale = g[0] / xv.len() as f64;
                self.acc_grad(x, |dx| {
                    for ((d, &xvv), &tv) in dx.iter_mut().zip(&xv).zip(&targets) {
                        *d += scale * (sigmoid(xvv) - tv);
                    }
                });
            }
            Op::SoftmaxCrossEntropy { x, ref classes } => {
                let s = self.val(x).shape().to_vec();
                let (n, c) = (s[0], s[1]);
                let xv = self.val(x).data().to_vec();
                let scale = g[0] / n as f64;
                self.acc_grad(x, |dx| {
                    for ii in 0..n {
                        let row = &xv[ii * c..(ii + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - m).exp() / sum;
                            let t = if classes[ii] == j { 1.0 } else { 0.0 };
                            dx[ii * c + j] += scale * (p - t);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C0: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

/// Decomposes a rank-1/2 shape into lanes along `axis`:
/// `(base, stride, len)` triples covering every lane.
fn lane_layout(shape: &[usize], axis: usize) -> TensorResult<(Vec<usize>, Vec<(usize, usize, usize)>)> {
    match (shape.len(), axis) {
        (1, 0) => Ok((shape.to_vec(), vec![(0, 1, shape[0])])),
        (2, 1) => {
            let (m, n) = (shape[0], shape[1]);
            Ok((shape.to_vec(), (0..m).map(|i| (i * n, 1, n)).collect()))
        }
        (2, 0) => {
            let (m, n) = (shape[0], shape[1]);
            Ok((shape.to_vec(), (0..n).map(|j| (j, n, m)).collect()))
        }
        _ => Err(TensorError::Dim(format!(
            "axis {axis} unsupported for shape {shape:?}"
        ))),
    }
}

/// Channel-major layout for batch normalization inputs.
struct BnLayout {
    batch: usize,
    channels: usize,
    inner: usize,
}

impl BnLayout {
    fn of(shape: &[usize]) -> TensorResult<Self> {
        match shape.len() {
            2 => Ok(BnLayout {
                batch: shape[0],
                channels: shape[1],
                inner: 1,
            }),
            3 => Ok(BnLayout {
                batch: shape[0],
                channels: shape[1],
                inner: shape[2],
            }),
            _ => Err(TensorError::Dim(format!(
                "batch_norm: rank {} unsupported",
                shape.len()
            ))),
        }
    }

    fn reduce_count(&self) -> usize {
        self.batch * self.inner
    }

    fn for_channel(&self, mut f: impl FnMut(usize, usize)) {
        if self.inner == 1 {
            for b in 0..self.batch {
                for c in 0..self.channels {
                    f(c, b * self.channels + c);
                }
            }
        } else {
            for b in 0..self.batch {
                for c in 0..self.channels {
                    let base = (b * self.channels + c) * self.inner;
                    for l in 0..self.inner {
                        f(c, base + l);
                    }
                }
            }
        }
    }
}
