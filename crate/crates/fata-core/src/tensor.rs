//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass as an
//! append-only arena; [`TensorId`] is a handle into it. Recording order is
//! a topological order of the DAG, so the backward pass is a single reverse
//! sweep that visits each node exactly once.
//!
//! Values are `f64`. The shapes are at most 4 axes, written `[B, C, H, W]`
//! where that matters; elementwise ops broadcast right-aligned the usual way.

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One node of the computation graph.
#[derive(Debug)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    /// Populated by [`Tape::backward`] for `requires_grad` tensors.
    pub grad: Option<Vec<f64>>,
    op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Neg(TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Matmul(TensorId, TensorId),
    Conv3x3 { x: TensorId, w: TensorId },
    Relu(TensorId),
    Gelu(TensorId),
    SoftmaxLast(TensorId),
    LogClamped(TensorId),
    Exp(TensorId),
    Sqrt(TensorId),
    SumAxes { x: TensorId, axes: Vec<usize> },
    MeanAxes { x: TensorId, axes: Vec<usize> },
    MaxAxis { x: TensorId, argmax: Vec<usize> },
    GatherRows { x: TensorId, indices: Vec<usize> },
    Reshape(TensorId),
    BroadcastTo(TensorId),
}

/// Floor used inside `log` so that `p * log p` is well defined at `p = 0`.
pub const LOG_CLAMP: f64 = 1e-12;

// ---------------------------------------------------------------------------
// shape helpers

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let bd = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        if ad == bd || ad == 1 || bd == 1 {
            out[i] = ad.max(bd);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("{} vs {}", shape_str(a), shape_str(b)),
            });
        }
    }
    Ok(out)
}

/// Strides of `shape` viewed as broadcast to a rank-`rank` output;
/// broadcast axes get stride 0.
fn bcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; rank];
    let offset = rank - shape.len();
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visits every output position of `out_shape`, handing `f` the flat output
/// index plus the flat index into a tensor of shape `in_shape` broadcast to
/// `out_shape`. Odometer iteration; no per-element division.
fn for_each_mapped(out_shape: &[usize], in_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    if rank == 0 {
        if n == 1 {
            f(0, 0);
        }
        return;
    }
    let strides = bcast_strides(in_shape, rank);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..n {
        f(flat, off);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            off -= strides[axis] * out_shape[axis];
        }
    }
}

/// Same as [`for_each_mapped`] for two inputs at once.
fn for_each_mapped2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    if rank == 0 {
        if n == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let sa = bcast_strides(a_shape, rank);
    let sb = bcast_strides(b_shape, rank);
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, ao, bo);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ao += sa[axis];
            bo += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            ao -= sa[axis] * out_shape[axis];
            bo -= sb[axis] * out_shape[axis];
        }
    }
}

/// Sums `g` (laid out as `out_shape`) back into the shape of an input that
/// was broadcast to `out_shape`.
fn reduce_grad_to(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; in_shape.iter().product()];
    for_each_mapped(out_shape, in_shape, |of, inf| acc[inf] += g[of]);
    acc
}

fn reduced_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(shape.len());
    for (i, &d) in shape.iter().enumerate() {
        if axes.contains(&i) {
            if keepdims {
                out.push(1);
            }
        } else {
            out.push(d);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// the tape

/// Arena of tensors forming one computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
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

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].numel()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient accumulated by [`Tape::backward`], if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // -- construction -------------------------------------------------------

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                details: format!("{} values for shape {}", data.len(), shape_str(shape)),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![], false, Op::Leaf)
    }

    /// Value-identical tensor through which no gradient flows.
    pub fn stop_gradient(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, false, Op::StopGrad(x))
    }

    // -- elementwise binary (broadcasting) -----------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shape(op_name, self.shape(a), self.shape(b))?;
        let mut data = vec![0.0; out_shape.iter().product()];
        {
            let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            for_each_mapped2(
                &out_shape,
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
                |of, ai, bi| data[of] = f(av[ai], bv[bi]),
            );
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, out_shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // -- elementwise unary ---------------------------------------------------

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(data, shape, rg, op)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, gelu_fwd, Op::Gelu(x))
    }

    /// `ln(max(x, LOG_CLAMP))`.
    pub fn log_clamped(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(LOG_CLAMP).ln(), Op::LogClamped(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    // -- contraction / convolution -------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("{} x {}", shape_str(sa), shape_str(sb)),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            matmul_into(av, bv, &mut data, m, k, n);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul(a, b)))
    }

    /// 3x3, stride 1, zero same-padding. `x: [B, Ci, H, W]`, `w: [Co, Ci, 3, 3]`.
    pub fn conv3x3(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let ok = sx.len() == 4 && sw.len() == 4 && sw[2] == 3 && sw[3] == 3 && sx[1] == sw[1];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                details: format!("x {} w {}", shape_str(sx), shape_str(sw)),
            });
        }
        let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[0];
        let mut data = vec![0.0; b * co * h * wd];
        {
            let xv = &self.nodes[x.0].data;
            let wv = &self.nodes[w.0].data;
            conv3x3_into(xv, wv, &mut data, b, ci, co, h, wd);
        }
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(data, vec![b, co, h, wd], rg, Op::Conv3x3 { x, w }))
    }

    // -- structured ----------------------------------------------------------

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax_last",
                details: "rank-0 input".into(),
            });
        }
        let cols = shape[shape.len() - 1];
        let rows = self.numel(x) / cols;
        let mut data = vec![0.0; rows * cols];
        {
            let xv = &self.nodes[x.0].data;
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..cols {
                    let e = (row[c] - m).exp();
                    data[r * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    data[r * cols + c] /= sum;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(data, shape, rg, Op::SoftmaxLast(x)))
    }

    pub fn sum_axes(&mut self, x: TensorId, axes: &[usize], keepdims: bool) -> Result<TensorId> {
        self.reduce(x, axes, keepdims, false)
    }

    pub fn mean_axes(&mut self, x: TensorId, axes: &[usize], keepdims: bool) -> Result<TensorId> {
        self.reduce(x, axes, keepdims, true)
    }

    fn reduce(&mut self, x: TensorId, axes: &[usize], keepdims: bool, mean: bool) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::ShapeMismatch {
                    op: if mean { "mean_axes" } else { "sum_axes" },
                    details: format!("axis {a} out of range for {}", shape_str(&shape)),
                });
            }
        }
        let kept = reduced_shape(&shape, axes, true);
        let out_shape = reduced_shape(&shape, axes, keepdims);
        let mut data = vec![0.0; kept.iter().product()];
        for_each_mapped(&shape, &kept, |xi, oi| data[oi] += self.nodes[x.0].data[xi]);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if mean {
            let inv = 1.0 / count as f64;
            for v in &mut data {
                *v *= inv;
            }
        }
        let rg = self.requires(x);
        let op = if mean {
            Op::MeanAxes { x, axes: axes.to_vec() }
        } else {
            Op::SumAxes { x, axes: axes.to_vec() }
        };
        Ok(self.push(data, out_shape, rg, op))
    }

    /// Mean over every element, yielding a rank-0 scalar.
    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_axes(x, &axes, false)
    }

    /// Sum over every element, yielding a rank-0 scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes, false)
    }

    /// Population variance over `axes`, keeping reduced axes as size 1.
    /// Composed from mean/sub/mul so its gradient needs no dedicated rule.
    pub fn var_axes(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let m = self.mean_axes(x, axes, true)?;
        let centered = self.sub(x, m)?;
        let sq = self.mul(centered, centered)?;
        self.mean_axes(sq, axes, true)
    }

    /// Maximum along `axis`; the axis is removed from the shape.
    pub fn max_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "max_axis",
                details: format!("axis {axis} out of range for {}", shape_str(&shape)),
            });
        }
        let kept = reduced_shape(&shape, &[axis], true);
        let out_shape = reduced_shape(&shape, &[axis], false);
        let out_n: usize = kept.iter().product();
        let mut data = vec![f64::NEG_INFINITY; out_n];
        let mut argmax = vec![0usize; out_n];
        for_each_mapped(&shape, &kept, |xi, oi| {
            let v = self.nodes[x.0].data[xi];
            if v > data[oi] {
                data[oi] = v;
                argmax[oi] = xi;
            }
        });
        let rg = self.requires(x);
        Ok(self.push(data, out_shape, rg, Op::MaxAxis { x, argmax }))
    }

    /// Index of the maximum along `axis` (first hit on ties). Not recorded
    /// on the tape; argmax is piecewise constant.
    pub fn argmax_axis(&self, x: TensorId, axis: usize) -> Vec<usize> {
        let shape = self.shape(x).to_vec();
        debug_assert!(axis < shape.len());
        let kept = reduced_shape(&shape, &[axis], true);
        let out_n: usize = kept.iter().product();
        let mut best = vec![f64::NEG_INFINITY; out_n];
        let mut arg = vec![0usize; out_n];
        let mut seen = vec![0usize; out_n];
        for_each_mapped(&shape, &kept, |xi, oi| {
            let v = self.nodes[x.0].data[xi];
            if v > best[oi] {
                best[oi] = v;
                arg[oi] = seen[oi];
            }
            seen[oi] += 1;
        });
        arg
    }

    /// `x: [B, C]`, `indices: [B]` -> `[B]` picking one column per row.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || indices.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                details: format!("x {} with {} indices", shape_str(&shape), indices.len()),
            });
        }
        let cols = shape[1];
        for (r, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(Error::Contract(format!(
                    "gather_rows: index {c} out of range {cols} at row {r}"
                )));
            }
        }
        let data: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| self.nodes[x.0].data[r * cols + c])
            .collect();
        let rg = self.requires(x);
        Ok(self.push(
            data,
            vec![shape[0]],
            rg,
            Op::GatherRows { x, indices: indices.to_vec() },
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if self.numel(x) != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                details: format!("{} -> {}", shape_str(self.shape(x)), shape_str(shape)),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.requires(x);
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape(x)))
    }

    /// Materializes `x` broadcast to `shape`.
    pub fn broadcast_to(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let merged = broadcast_shape("broadcast_to", self.shape(x), shape)?;
        if merged != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                details: format!("{} -> {}", shape_str(self.shape(x)), shape_str(shape)),
            });
        }
        let mut data = vec![0.0; shape.iter().product()];
        for_each_mapped(shape, &self.nodes[x.0].shape, |of, xi| {
            data[of] = self.nodes[x.0].data[xi]
        });
        let rg = self.requires(x);
        Ok(self.push(data, shape.to_vec(), rg, Op::BroadcastTo(x)))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every `requires_grad` tensor at or
    /// below `loss` in the graph receives `d loss / d tensor` in its `grad`
    /// field; `requires_grad` leaves the sweep never reaches get zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                node.grad = Some(match grads[id].take() {
                    Some(g) => g,
                    None => vec![0.0; node.data.len()],
                });
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, contrib: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib.iter()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out_shape = &node.shape;
        match &node.op {
            Op::Leaf => {}
            // gradient stops here; the recorded input stays for graph tracing
            Op::StopGrad(blocked) => {
                let _ = blocked;
            }

            Op::Add(a, b) => {
                if self.requires(*a) {
                    let ga = reduce_grad_to(g, out_shape, self.shape(*a));
                    self.accum(grads, *a, ga);
                }
                if self.requires(*b) {
                    let gb = reduce_grad_to(g, out_shape, self.shape(*b));
                    self.accum(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    let ga = reduce_grad_to(g, out_shape, self.shape(*a));
                    self.accum(grads, *a, ga);
                }
                if self.requires(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    let gb = reduce_grad_to(&neg, out_shape, self.shape(*b));
                    self.accum(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let mut tmp = vec![0.0; g.len()];
                    for_each_mapped2(out_shape, self.shape(*a), self.shape(*b), |of, _, bi| {
                        tmp[of] = g[of] * self.nodes[b.0].data[bi];
                    });
                    let ga = reduce_grad_to(&tmp, out_shape, self.shape(*a));
                    self.accum(grads, *a, ga);
                }
                if self.requires(*b) {
                    let mut tmp = vec![0.0; g.len()];
                    for_each_mapped2(out_shape, self.shape(*a), self.shape(*b), |of, ai, _| {
                        tmp[of] = g[of] * self.nodes[a.0].data[ai];
                    });
                    let gb = reduce_grad_to(&tmp, out_shape, self.shape(*b));
                    self.accum(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.requires(*a) {
                    let mut tmp = vec![0.0; g.len()];
                    for_each_mapped2(out_shape, self.shape(*a), self.shape(*b), |of, _, bi| {
                        tmp[of] = g[of] / self.nodes[b.0].data[bi];
                    });
                    let ga = reduce_grad_to(&tmp, out_shape, self.shape(*a));
                    self.accum(grads, *a, ga);
                }
                if self.requires(*b) {
                    let mut tmp = vec![0.0; g.len()];
                    for_each_mapped2(out_shape, self.shape(*a), self.shape(*b), |of, ai, bi| {
                        let bv = self.nodes[b.0].data[bi];
                        tmp[of] = -g[of] * self.nodes[a.0].data[ai] / (bv * bv);
                    });
                    let gb = reduce_grad_to(&tmp, out_shape, self.shape(*b));
                    self.accum(grads, *b, gb);
                }
            }
            Op::Neg(x) => {
                self.accum(grads, *x, g.iter().map(|v| -v).collect());
            }
            Op::AddScalar(x) => {
                self.accum(grads, *x, g.to_vec());
            }
            Op::MulScalar(x, c) => {
                self.accum(grads, *x, g.iter().map(|v| v * c).collect());
            }

            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                if self.requires(*a) {
                    // dA = g @ B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                for p in 0..k {
                                    ga[i * k + p] += gv * bv[p * n + j];
                                }
                            }
                        }
                    }
                    self.accum(grads, *a, ga);
                }
                if self.requires(*b) {
                    // dB = A^T @ g
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let avp = av[i * k + p];
                            if avp != 0.0 {
                                for j in 0..n {
                                    gb[p * n + j] += avp * g[i * n + j];
                                }
                            }
                        }
                    }
                    self.accum(grads, *b, gb);
                }
            }

            Op::Conv3x3 { x, w } => {
                let sx = self.shape(*x);
                let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let co = self.shape(*w)[0];
                let xv = &self.nodes[x.0].data;
                let wv = &self.nodes[w.0].data;
                if self.requires(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    conv3x3_backward_input(g, wv, &mut gx, b, ci, co, h, wd);
                    self.accum(grads, *x, gx);
                }
                if self.requires(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    conv3x3_backward_weight(g, xv, &mut gw, b, ci, co, h, wd);
                    self.accum(grads, *w, gw);
                }
            }

            Op::Relu(x) => {
                let xv = &self.nodes[x.0].data;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].data;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gv, &v)| gv * gelu_grad(v))
                    .collect();
                self.accum(grads, *x, gx);
            }

            Op::SoftmaxLast(x) => {
                let cols = out_shape[out_shape.len() - 1];
                let rows = node.data.len() / cols;
                let y = &node.data;
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += g[base + c] * y[base + c];
                    }
                    for c in 0..cols {
                        gx[base + c] = y[base + c] * (g[base + c] - dot);
                    }
                }
                self.accum(grads, *x, gx);
            }

            Op::LogClamped(x) => {
                let xv = &self.nodes[x.0].data;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gv, &v)| gv / v.max(LOG_CLAMP))
                    .collect();
                self.accum(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(node.data.iter()).map(|(gv, y)| gv * y).collect();
                self.accum(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(node.data.iter())
                    .map(|(gv, y)| gv * 0.5 / y)
                    .collect();
                self.accum(grads, *x, gx);
            }

            Op::SumAxes { x, axes } | Op::MeanAxes { x, axes } => {
                let in_shape = self.shape(*x).to_vec();
                let kept = reduced_shape(&in_shape, axes, true);
                let scale = if matches!(node.op, Op::MeanAxes { .. }) {
                    let count: usize = axes.iter().map(|&a| in_shape[a]).product();
                    1.0 / count as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; in_shape.iter().product()];
                for_each_mapped(&in_shape, &kept, |xi, oi| gx[xi] = g[oi] * scale);
                self.accum(grads, *x, gx);
            }

            Op::MaxAxis { x, argmax } => {
                let mut gx = vec![0.0; self.nodes[x.0].data.len()];
                for (oi, &xi) in argmax.iter().enumerate() {
                    gx[xi] += g[oi];
                }
                self.accum(grads, *x, gx);
            }

            Op::GatherRows { x, indices } => {
                let cols = self.shape(*x)[1];
                let mut gx = vec![0.0; self.nodes[x.0].data.len()];
                for (r, &c) in indices.iter().enumerate() {
                    gx[r * cols + c] += g[r];
                }
                self.accum(grads, *x, gx);
            }

            Op::Reshape(x) => {
                self.accum(grads, *x, g.to_vec());
            }
            Op::BroadcastTo(x) => {
                let gx = reduce_grad_to(g, out_shape, self.shape(*x));
                self.accum(grads, *x, gx);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// kernels

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
    }
}

fn conv3x3_into(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) {
    let plane = h * wd;
    for bi in 0..b {
        for o in 0..co {
            let obase = (bi * co + o) * plane;
            for c in 0..ci {
                let xbase = (bi * ci + c) * plane;
                let wbase = (o * ci + c) * 9;
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let wv = w[wbase + dy * 3 + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oy, ox) = (dy as isize - 1, dx as isize - 1);
                        let y0 = (-oy).max(0) as usize;
                        let y1 = (h as isize - oy).min(h as isize) as usize;
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (wd as isize - ox).min(wd as isize) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            for xx in x0..x1 {
                                let sx = (xx as isize + ox) as usize;
                                out[obase + y * wd + xx] += wv * x[xbase + sy * wd + sx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_backward_input(
    g: &[f64],
    w: &[f64],
    gx: &mut [f64],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) {
    let plane = h * wd;
    for bi in 0..b {
        for o in 0..co {
            let gbase = (bi * co + o) * plane;
            for c in 0..ci {
                let xbase = (bi * ci + c) * plane;
                let wbase = (o * ci + c) * 9;
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let wv = w[wbase + dy * 3 + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oy, ox) = (dy as isize - 1, dx as isize - 1);
                        let y0 = (-oy).max(0) as usize;
                        let y1 = (h as isize - oy).min(h as isize) as usize;
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (wd as isize - ox).min(wd as isize) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            for xx in x0..x1 {
                                let sx = (xx as isize + ox) as usize;
                                gx[xbase + sy * wd + sx] += wv * g[gbase + y * wd + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_backward_weight(
    g: &[f64],
    x: &[f64],
    gw: &mut [f64],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) {
    let plane = h * wd;
    for bi in 0..b {
        for o in 0..co {
            let gbase = (bi * co + o) * plane;
            for c in 0..ci {
                let xbase = (bi * ci + c) * plane;
                let wbase = (o * ci + c) * 9;
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let (oy, ox) = (dy as isize - 1, dx as isize - 1);
                        let y0 = (-oy).max(0) as usize;
                        let y1 = (h as isize - oy).min(h as isize) as usize;
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (wd as isize - ox).min(wd as isize) as usize;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            for xx in x0..x1 {
                                let sx = (xx as isize + ox) as usize;
                                acc += g[gbase + y * wd + xx] * x[xbase + sy * wd + sx];
                            }
                        }
                        gw[wbase + dy * 3 + dx] += acc;
                    }
                }
            }
        }
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}
