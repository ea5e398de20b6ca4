//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] records every executed op in topological order (define-by-run).
//! [`Graph::backward`] walks the tape once in reverse, accumulating gradients
//! into every node; fan-out sums, as the chain rule requires. After the
//! traversal the op records are cleared, so a graph can only be
//! differentiated once; data and gradients stay readable.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Elementwise nonlinearities. GELU uses the exact Gaussian-CDF form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Swish,
    Sigmoid,
}

/// Reduction kinds. `Gap` is the arithmetic mean over the reduced axes and
/// `Gmp` the maximum; on ties the max routes its gradient to the first
/// (row-major) argmax position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Gap,
    Gmp,
    Mean,
    Var,
    Sum,
}

/// Per-column batch statistics produced by a train-mode batch norm, used by
/// the caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n-1 divisor) variance for the running-average update.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Conv2d {
        x: TensorId,
        k: TensorId,
        dims: ConvDims,
    },
    Act {
        x: TensorId,
        kind: Activation,
    },
    Reduce {
        x: TensorId,
        kind: ReduceKind,
        axes: Vec<usize>,
        /// Flat input index of the winning element per output cell (Gmp only).
        winners: Vec<usize>,
        /// Group mean per output cell (Var only).
        means: Vec<f64>,
        count: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Reshape {
        x: TensorId,
    },
    Transpose {
        x: TensorId,
        rows: usize,
        cols: usize,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Narrow {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    Patches {
        x: TensorId,
        patch: usize,
    },
    Softmax {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: TensorId,
        mask: Vec<f64>,
    },
    CrossEntropy {
        prob: TensorId,
        target: usize,
        weight: f64,
        clamped: f64,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Dynamically recorded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// numpy-style broadcast of two shapes (align trailing dimensions).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

/// How a smaller operand tiles across the broadcast output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BroadcastMap {
    /// Identical shapes: index maps one-to-one.
    Same,
    /// Operand is a trailing block (for example a bias over the last axis):
    /// `small[i % len]`.
    Suffix(usize),
    /// Operand is a leading block repeated along trailing axes (for example
    /// per-row weights `[B,1]` against `[B,C]`): `small[i / inner]`.
    Prefix(usize),
    /// Anything else walks the general odometer path.
    General,
}

/// How reduced input coordinates map onto output cells.
enum ReduceMap {
    /// Axes form the leading block: input index modulo the output size.
    Leading,
    /// Axes form the trailing block: input index divided by the group size.
    Trailing,
    Gen(Box<dyn Fn(usize) -> usize>),
}

impl ReduceMap {
    fn apply(&self, flat: usize, out_numel: usize, count: usize) -> usize {
        match self {
            ReduceMap::Leading => flat % out_numel,
            ReduceMap::Trailing => flat / count,
            ReduceMap::Gen(f) => f(flat),
        }
    }
}

fn reduce_index_map(shape: &[usize], axes: &[usize]) -> ReduceMap {
    let ndim = shape.len();
    let k = axes.len();
    let leading = axes.iter().enumerate().all(|(i, &a)| a == i);
    if leading {
        return ReduceMap::Leading;
    }
    let trailing = axes.iter().enumerate().all(|(i, &a)| a == ndim - k + i);
    if trailing {
        return ReduceMap::Trailing;
    }
    let strides = row_major_strides(shape);
    let mut out_stride = vec![0usize; ndim];
    let mut s = 1usize;
    for d in (0..ndim).rev() {
        if !axes.contains(&d) {
            out_stride[d] = s;
            s *= shape[d];
        }
    }
    let shape = shape.to_vec();
    ReduceMap::Gen(Box::new(move |flat: usize| {
        let mut rem = flat;
        let mut oi = 0;
        for d in 0..shape.len() {
            let c = rem / strides[d];
            rem %= strides[d];
            oi += c * out_stride[d];
        }
        oi
    }))
}

fn classify_broadcast(small: &[usize], out_shape: &[usize]) -> BroadcastMap {
    if small == out_shape {
        return BroadcastMap::Same;
    }
    let ndim = out_shape.len();
    let padded = pad_left(small, ndim);
    // suffix block: broadcast dims form a prefix
    let split = padded.iter().position(|&d| d != 1).unwrap_or(ndim);
    if padded[split..] == out_shape[split..] {
        let len: usize = padded[split..].iter().product();
        return BroadcastMap::Suffix(len.max(1));
    }
    // prefix block: broadcast dims form a suffix
    let split = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if padded[..split] == out_shape[..split] {
        let inner: usize = out_shape[split..].iter().product();
        return BroadcastMap::Prefix(inner.max(1));
    }
    BroadcastMap::General
}

/// Expands `data` of `shape` to `out_shape` by repetition along broadcast axes.
fn broadcast_expand(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let ndim = out_shape.len();
    let padded = pad_left(shape, ndim);
    let src_strides = row_major_strides(&padded);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; ndim];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // odometer increment
        for d in (0..ndim).rev() {
            coords[d] += 1;
            if padded[d] != 1 {
                src += src_strides[d];
            }
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            if padded[d] != 1 {
                src -= src_strides[d] * out_shape[d];
            }
        }
    }
    out
}

/// Sums `grad` of `grad_shape` down to `target_shape` (reverse of broadcast).
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    match classify_broadcast(target_shape, grad_shape) {
        BroadcastMap::Same => return grad.to_vec(),
        BroadcastMap::Suffix(len) => {
            let mut out = vec![0.0; len];
            for chunk in grad.chunks_exact(len) {
                for (o, &g) in out.iter_mut().zip(chunk.iter()) {
                    *o += g;
                }
            }
            return out;
        }
        BroadcastMap::Prefix(inner) => {
            let mut out = vec![0.0; grad.len() / inner];
            for (o, chunk) in out.iter_mut().zip(grad.chunks_exact(inner)) {
                *o = chunk.iter().sum();
            }
            return out;
        }
        BroadcastMap::General => {}
    }
    let ndim = grad_shape.len();
    let padded = pad_left(target_shape, ndim);
    let tgt_strides = row_major_strides(&padded);
    let numel: usize = padded.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; ndim];
    let mut tgt = 0usize;
    for &g in grad.iter() {
        out[tgt] += g;
        for d in (0..ndim).rev() {
            coords[d] += 1;
            if padded[d] != 1 {
                tgt += tgt_strides[d];
            }
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            if padded[d] != 1 {
                tgt -= tgt_strides[d] * grad_shape[d];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf node, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Inserts a tensor as a non-differentiable constant.
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        let mut t = tensor;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        id
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
            needs_grad,
        )
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the node, available after [`Graph::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Takes ownership of a node's gradient buffer, leaving `None` behind.
    pub fn take_grad(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.nodes[id.0].tensor.grad.take()
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul requires [m,k] x [k,n]; got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), m, k, n, &mut data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![m, n], data, Op::MatMul { a, b }, needs))
    }

    /// Grouped cross-correlation. `x` is `[H,W,Cin]`, `k` is
    /// `[kh,kw,Cin/groups,Cout]`; zero padding, square stride.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects x [H,W,Cin] and k [kh,kw,Cin/groups,Cout]; got {:?} and {:?}",
                sx, sk
            )));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, kc, cout) = (sk[0], sk[1], sk[2], sk[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "channel grouping {} does not divide Cin={} / Cout={}",
                groups, cin, cout
            )));
        }
        if kc != cin / groups {
            return Err(Error::Shape(format!(
                "kernel in-channels {} != Cin/groups = {}",
                kc,
                cin / groups
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let h_num = h as isize + 2 * padding as isize - kh as isize;
        let w_num = w as isize + 2 * padding as isize - kw as isize;
        if h_num < 0 || w_num < 0 {
            return Err(Error::Shape(format!(
                "conv2d output dims non-positive for input {:?} kernel {:?} padding {}",
                sx, sk, padding
            )));
        }
        let oh = h_num as usize / stride + 1;
        let ow = w_num as usize / stride + 1;
        let dims = ConvDims {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            padding,
            groups,
            oh,
            ow,
        };
        let mut data = vec![0.0; oh * ow * cout];
        kernels::conv2d(self.data(x), self.data(k), &dims, &mut data);
        let needs = self.needs(x) || self.needs(k);
        Ok(self.out(vec![oh, ow, cout], data, Op::Conv2d { x, k, dims }, needs))
    }

    pub fn activation(&mut self, x: TensorId, kind: Activation) -> TensorId {
        let data: Vec<f64> = self.data(x)
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Gelu => kernels::gelu(v),
                Activation::Swish => kernels::swish(v),
                Activation::Sigmoid => kernels::sigmoid(v),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.out(shape, data, Op::Act { x, kind }, needs)
    }

    /// Reduction over `axes` (removed from the output shape; a full reduction
    /// yields shape `[1]`).
    pub fn reduce(&mut self, x: TensorId, kind: ReduceKind, axes: &[usize]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::Parameter("reduce: empty axis list".into()));
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::Parameter(format!(
                "reduce: axis out of range for shape {:?}: {:?}",
                shape, axes
            )));
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(Error::Parameter("reduce: empty reduction axis".into()));
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &e)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_numel: usize = out_shape.iter().product();
        let xdata = self.data(x);
        let numel = xdata.len();
        let to_out = reduce_index_map(&shape, &axes);

        let mut data = vec![0.0; out_numel];
        let mut winners = Vec::new();
        let mut means = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean | ReduceKind::Gap => {
                match to_out {
                    ReduceMap::Leading => {
                        for chunk in xdata.chunks_exact(out_numel) {
                            for (o, &v) in data.iter_mut().zip(chunk.iter()) {
                                *o += v;
                            }
                        }
                    }
                    ReduceMap::Trailing => {
                        for (o, chunk) in data.iter_mut().zip(xdata.chunks_exact(count)) {
                            *o = chunk.iter().sum();
                        }
                    }
                    ReduceMap::Gen(ref map) => {
                        for flat in 0..numel {
                            data[map(flat)] += xdata[flat];
                        }
                    }
                }
                if matches!(kind, ReduceKind::Mean | ReduceKind::Gap) {
                    for v in data.iter_mut() {
                        *v /= count as f64;
                    }
                }
            }
            ReduceKind::Gmp => {
                data.fill(f64::NEG_INFINITY);
                winners = vec![usize::MAX; out_numel];
                for flat in 0..numel {
                    let oi = to_out.apply(flat, out_numel, count);
                    if xdata[flat] > data[oi] {
                        data[oi] = xdata[flat];
                        winners[oi] = flat;
                    }
                }
            }
            ReduceKind::Var => {
                means = vec![0.0; out_numel];
                for flat in 0..numel {
                    means[to_out.apply(flat, out_numel, count)] += xdata[flat];
                }
                for m in means.iter_mut() {
                    *m /= count as f64;
                }
                for flat in 0..numel {
                    let oi = to_out.apply(flat, out_numel, count);
                    let d = xdata[flat] - means[oi];
                    data[oi] += d * d;
                }
                for v in data.iter_mut() {
                    *v /= count as f64;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.out(
            out_shape,
            data,
            Op::Reduce {
                x,
                kind,
                axes,
                winners,
                means,
                count,
            },
            needs,
        ))
    }

    /// Mean over every axis, yielding a `[1]` scalar.
    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceKind::Mean, &axes)
    }

    /// Sum over every axis, yielding a `[1]` scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceKind::Sum, &axes)
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let numel: usize = out_shape.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(numel);
        match (classify_broadcast(&sa, &out_shape), classify_broadcast(&sb, &out_shape)) {
            (BroadcastMap::Same, BroadcastMap::Same) => {
                data.extend(da.iter().zip(db.iter()).map(|(&x, &y)| op(x, y)));
            }
            (BroadcastMap::Same, BroadcastMap::Suffix(len)) => {
                // bias-style add over the trailing axis
                for chunk in da.chunks_exact(len) {
                    data.extend(chunk.iter().zip(db.iter()).map(|(&x, &y)| op(x, y)));
                }
            }
            (ma, mb) => {
                let fetch = |map: BroadcastMap, src: &[f64], i: usize| -> f64 {
                    match map {
                        BroadcastMap::Same => src[i],
                        BroadcastMap::Suffix(len) => src[i % len],
                        BroadcastMap::Prefix(inner) => src[i / inner],
                        BroadcastMap::General => unreachable!(),
                    }
                };
                if ma == BroadcastMap::General || mb == BroadcastMap::General {
                    let ea = broadcast_expand(da, &sa, &out_shape);
                    let eb = broadcast_expand(db, &sb, &out_shape);
                    data.extend(ea.iter().zip(eb.iter()).map(|(&x, &y)| op(x, y)));
                } else {
                    for i in 0..numel {
                        data.push(op(fetch(ma, da, i), fetch(mb, db, i)));
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(out_shape, data, record, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.out(shape, data, Op::Scale { x, c }, needs)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.out(shape.to_vec(), data, Op::Reshape { x }, needs))
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose2d expects 2-D, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let needs = self.needs(x);
        Ok(self.out(vec![cols, rows], data, Op::Transpose { x, rows, cols }, needs))
    }

    /// Concatenation along `axis`; inputs must agree on every other extent.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Parameter("concat: no inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat axis {} out of range for {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::Shape(format!(
                    "concat shapes differ off-axis: {:?} vs {:?}",
                    first, s
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for &id in inputs {
            let part_axis = self.shape(id)[axis];
            let chunk = part_axis * inner;
            let src = self.data(id);
            for o in 0..outer {
                let dst0 = (o * axis_total + offset) * inner;
                data[dst0..dst0 + chunk].copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
            }
            offset += part_axis;
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.out(
            out_shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow axis {} range {}..{} invalid for {:?}",
                axis,
                start,
                start + len,
                s
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let src = self.data(x);
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src0 = (o * s[axis] + start) * inner;
            let dst0 = o * len * inner;
            data[dst0..dst0 + len * inner].copy_from_slice(&src[src0..src0 + len * inner]);
        }
        let needs = self.needs(x);
        Ok(self.out(out_shape, data, Op::Narrow { x, axis, start }, needs))
    }

    /// Splits `[H,W,C]` into non-overlapping `patch x patch` tiles, each
    /// flattened row-major (rows, cols, channels) to a row of the output
    /// `[N, patch*patch*C]`. Patch rows scan the image row-major.
    pub fn patches(&mut self, x: TensorId, patch: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("patches expects [H,W,C], got {:?}", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by patch size {}",
                h, w, patch
            )));
        }
        let (ph, pw) = (h / patch, w / patch);
        let n = ph * pw;
        let plen = patch * patch * c;
        let src = self.data(x);
        let mut data = vec![0.0; n * plen];
        for py in 0..ph {
            for px in 0..pw {
                let row = py * pw + px;
                for iy in 0..patch {
                    let src0 = ((py * patch + iy) * w + px * patch) * c;
                    let dst0 = row * plen + iy * patch * c;
                    data[dst0..dst0 + patch * c].copy_from_slice(&src[src0..src0 + patch * c]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.out(vec![n, plen], data, Op::Patches { x, patch }, needs))
    }

    /// Row-wise softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Shape("softmax on empty shape".into()))?;
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in.iter()) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.out(s, data, Op::Softmax { x }, needs))
    }

    /// Per-row normalization over the last axis with learned affine.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Parameter("layer_norm eps must be positive".into()));
        }
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm affine must be [{}]; got {:?} / {:?}",
                d,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.data(x).len() / d;
        let mut mean = vec![0.0; rows];
        let mut invstd = vec![0.0; rows];
        let mut data = vec![0.0; rows * d];
        {
            let src = self.data(x);
            let g = self.data(gamma);
            let b = self.data(beta);
            for r in 0..rows {
                let row = &src[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                mean[r] = mu;
                invstd[r] = is;
                let out = &mut data[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] = (row[j] - mu) * is * g[j] + b[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.out(
            s,
            data,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
            },
            needs,
        ))
    }

    /// Train-mode batch norm over the leading axis of a 2-D `[rows, C]`
    /// input: per-column batch statistics normalize, then affine. Returns the
    /// batch statistics so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, BatchStats)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("batch_norm expects [rows, C], got {:?}", s)));
        }
        let (rows, c) = (s[0], s[1]);
        if rows < 2 {
            return Err(Error::Contract(
                "batch_norm train mode requires batch size >= 2".into(),
            ));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let src = self.data(x);
            for r in 0..rows {
                for j in 0..c {
                    mean[j] += src[r * c + j];
                }
            }
            for m in mean.iter_mut() {
                *m /= rows as f64;
            }
            for r in 0..rows {
                for j in 0..c {
                    let d = src[r * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
        }
        let var_unbiased: Vec<f64> = var.iter().map(|&v| v / (rows as f64 - 1.0)).collect();
        for v in var.iter_mut() {
            *v /= rows as f64;
        }
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let id = self.bn_output(x, gamma, beta, mean.clone(), invstd, true)?;
        Ok((
            id,
            BatchStats {
                mean,
                var_unbiased,
            },
        ))
    }

    /// Eval-mode batch norm: a pure affine map using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("batch_norm expects [rows, C], got {:?}", s)));
        }
        let c = s[1];
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "running stats length {} does not match {} channels",
                running_mean.len(),
                c
            )));
        }
        let invstd: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_output(x, gamma, beta, running_mean.to_vec(), invstd, false)
    }

    fn bn_output(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    ) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let (rows, c) = (s[0], s[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm affine must be [{}]; got {:?} / {:?}",
                c,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let mut data = vec![0.0; rows * c];
        {
            let src = self.data(x);
            let g = self.data(gamma);
            let b = self.data(beta);
            for r in 0..rows {
                for j in 0..c {
                    data[r * c + j] = (src[r * c + j] - mean[j]) * invstd[j] * g[j] + b[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.out(
            s,
            data,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            },
            needs,
        ))
    }

    /// Inverted dropout: kept activations are scaled by 1/(1-p) so eval mode
    /// is the identity. The mask is drawn from the given seed.
    pub fn dropout(&mut self, x: TensorId, p: f64, seed: u64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate {} outside [0,1)", p)));
        }
        let keep = 1.0 - p;
        let mut rng = StdRng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = self.data(x).iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.out(shape, data, Op::Dropout { x, mask }, needs))
    }

    /// Weighted categorical cross-entropy of one probability vector against a
    /// one-hot target: `-w * ln(max(p_true, 1e-12))`.
    pub fn cross_entropy(
        &mut self,
        prob: TensorId,
        one_hot: &Tensor,
        weight: f64,
    ) -> Result<TensorId> {
        let n = self.data(prob).len();
        if one_hot.numel() != n {
            return Err(Error::Contract(format!(
                "one-hot length {} != probability length {}",
                one_hot.numel(),
                n
            )));
        }
        let mut target = None;
        for (i, &v) in one_hot.data.iter().enumerate() {
            if v == 1.0 {
                if target.is_some() {
                    return Err(Error::Contract("one-hot has multiple hot entries".into()));
                }
                target = Some(i);
            } else if v != 0.0 {
                return Err(Error::Contract(format!(
                    "one-hot entry {} is {}, expected 0 or 1",
                    i, v
                )));
            }
        }
        let target = target.ok_or_else(|| Error::Contract("one-hot has no hot entry".into()))?;
        let clamped = self.data(prob)[target].max(1e-12);
        let loss = -weight * clamped.ln();
        let needs = self.needs(prob);
        Ok(self.out(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                prob,
                target,
                weight,
                clamped,
            },
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse traversal from a scalar loss. Gradients sum over fan-out and
    /// land in every node's `grad` slot (zeros for `requires_grad` leaves the
    /// loss never touched). The recorded ops are cleared afterwards, so a
    /// graph differentiates exactly once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "graph already consumed by a previous backward".into(),
            ));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss; got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = grads[i].take();
            self.dispatch(i, grad.as_ref().unwrap(), &mut grads);
            grads[i] = grad;
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            match g {
                Some(g) => node.tensor.grad = Some(g),
                None if node.tensor.requires_grad => {
                    node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
                }
                None => {}
            }
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: TensorId, numel: usize) -> &mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn dispatch(&self, i: usize, grad: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let da = Self::accumulate(grads, a, m * k);
                    kernels::matmul_grad_a(grad, self.data(b), m, k, n, da);
                }
                if self.needs(b) {
                    let db = Self::accumulate(grads, b, k * n);
                    kernels::matmul_grad_b(self.data(a), grad, m, k, n, db);
                }
            }
            Op::Conv2d { x, k, dims } => {
                let nx = self.data(x).len();
                let nk = self.data(k).len();
                let (need_x, need_k) = (self.needs(x), self.needs(k));
                // accumulate straight into the gradient buffers
                let mut dx = if need_x {
                    Self::accumulate(grads, x, nx);
                    grads[x.0].take().unwrap()
                } else {
                    Vec::new()
                };
                let mut dk = if need_k {
                    Self::accumulate(grads, k, nk);
                    grads[k.0].take().unwrap()
                } else {
                    Vec::new()
                };
                kernels::conv2d_grad(self.data(x), self.data(k), &dims, grad, &mut dx, &mut dk);
                if need_x {
                    grads[x.0] = Some(dx);
                }
                if need_k {
                    grads[k.0] = Some(dk);
                }
            }
            Op::Act { x, kind } => {
                if !self.needs(x) {
                    return;
                }
                let xin = self.data(x);
                let out = &self.nodes[i].tensor.data;
                let gx = Self::accumulate(grads, x, xin.len());
                match kind {
                    Activation::Relu => {
                        for j in 0..xin.len() {
                            if xin[j] > 0.0 {
                                gx[j] += grad[j];
                            }
                        }
                    }
                    Activation::Gelu => {
                        for j in 0..xin.len() {
                            gx[j] += grad[j] * kernels::gelu_grad(xin[j]);
                        }
                    }
                    Activation::Swish => {
                        for j in 0..xin.len() {
                            gx[j] += grad[j] * kernels::swish_grad(xin[j]);
                        }
                    }
                    Activation::Sigmoid => {
                        for j in 0..xin.len() {
                            gx[j] += grad[j] * out[j] * (1.0 - out[j]);
                        }
                    }
                }
            }
            Op::Reduce {
                x,
                kind,
                axes,
                winners,
                means,
                count,
            } => {
                if !self.needs(x) {
                    return;
                }
                let shape = self.shape(x).to_vec();
                let numel = self.data(x).len();
                let out_numel = grad.len();
                let xdata = self.data(x);
                let map = reduce_index_map(&shape, &axes);
                let gx = Self::accumulate(grads, x, numel);
                match kind {
                    ReduceKind::Gmp => {
                        for (oi, &win) in winners.iter().enumerate() {
                            gx[win] += grad[oi];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean | ReduceKind::Gap => {
                        let scale = if matches!(kind, ReduceKind::Sum) {
                            1.0
                        } else {
                            1.0 / count as f64
                        };
                        match map {
                            ReduceMap::Leading => {
                                for chunk in gx.chunks_exact_mut(out_numel) {
                                    for (g, &go) in chunk.iter_mut().zip(grad.iter()) {
                                        *g += go * scale;
                                    }
                                }
                            }
                            ReduceMap::Trailing => {
                                for (chunk, &go) in gx.chunks_exact_mut(count).zip(grad.iter()) {
                                    for g in chunk.iter_mut() {
                                        *g += go * scale;
                                    }
                                }
                            }
                            ReduceMap::Gen(f) => {
                                for flat in 0..numel {
                                    gx[flat] += grad[f(flat)] * scale;
                                }
                            }
                        }
                    }
                    ReduceKind::Var => {
                        for flat in 0..numel {
                            let oi = map.apply(flat, out_numel, count);
                            gx[flat] += grad[oi] * 2.0 * (xdata[flat] - means[oi]) / count as f64;
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(self.nodes[i].op, Op::Sub { .. });
                let out_shape = self.shape(TensorId(i)).to_vec();
                for (id, flip) in [(a, false), (b, neg)] {
                    if !self.needs(id) {
                        continue;
                    }
                    let target_shape = self.shape(id).to_vec();
                    let mut part = reduce_to_shape(grad, &out_shape, &target_shape);
                    if flip {
                        for v in part.iter_mut() {
                            *v = -*v;
                        }
                    }
                    let g = Self::accumulate(grads, id, part.len());
                    for (gs, p) in g.iter_mut().zip(part.iter()) {
                        *gs += p;
                    }
                }
            }
            Op::Mul { a, b } => {
                let out_shape = self.shape(TensorId(i)).to_vec();
                let weighted = |src: TensorId| -> Vec<f64> {
                    // grad (x) other-operand, expanded to the output shape
                    let shape = self.shape(src);
                    match classify_broadcast(shape, &out_shape) {
                        BroadcastMap::Same => grad
                            .iter()
                            .zip(self.data(src).iter())
                            .map(|(&g, &v)| g * v)
                            .collect(),
                        BroadcastMap::Suffix(len) => {
                            let d = self.data(src);
                            grad.iter()
                                .enumerate()
                                .map(|(i, &g)| g * d[i % len])
                                .collect()
                        }
                        BroadcastMap::Prefix(inner) => {
                            let d = self.data(src);
                            grad.iter()
                                .enumerate()
                                .map(|(i, &g)| g * d[i / inner])
                                .collect()
                        }
                        BroadcastMap::General => {
                            let e = broadcast_expand(self.data(src), shape, &out_shape);
                            grad.iter().zip(e.iter()).map(|(&g, &v)| g * v).collect()
                        }
                    }
                };
                if self.needs(a) {
                    let da_full = weighted(b);
                    let part = reduce_to_shape(&da_full, &out_shape, self.shape(a));
                    let g = Self::accumulate(grads, a, part.len());
                    for (gs, p) in g.iter_mut().zip(part.iter()) {
                        *gs += p;
                    }
                }
                if self.needs(b) {
                    let db_full = weighted(a);
                    let part = reduce_to_shape(&db_full, &out_shape, self.shape(b));
                    let g = Self::accumulate(grads, b, part.len());
                    for (gs, p) in g.iter_mut().zip(part.iter()) {
                        *gs += p;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(x) {
                    let g = Self::accumulate(grads, x, grad.len());
                    for (gs, &gv) in g.iter_mut().zip(grad.iter()) {
                        *gs += gv * c;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(x) {
                    let g = Self::accumulate(grads, x, grad.len());
                    for (gs, &gv) in g.iter_mut().zip(grad.iter()) {
                        *gs += gv;
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                if self.needs(x) {
                    let g = Self::accumulate(grads, x, rows * cols);
                    // output is [cols, rows]
                    for r in 0..cols {
                        for c in 0..rows {
                            g[c * cols + r] += grad[r * rows + c];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.shape(TensorId(i)).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0usize;
                for id in inputs {
                    let part_axis = self.shape(id)[axis];
                    let chunk = part_axis * inner;
                    if self.needs(id) {
                        let g = Self::accumulate(grads, id, outer * chunk);
                        for o in 0..outer {
                            let src0 = (o * axis_total + offset) * inner;
                            let dst = &mut g[o * chunk..(o + 1) * chunk];
                            for (d, s) in dst.iter_mut().zip(grad[src0..src0 + chunk].iter()) {
                                *d += s;
                            }
                        }
                    }
                    offset += part_axis;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.needs(x) {
                    let in_shape = self.shape(x).to_vec();
                    let out_shape = self.shape(TensorId(i)).to_vec();
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let len = out_shape[axis];
                    let g = Self::accumulate(grads, x, in_shape.iter().product());
                    for o in 0..outer {
                        let dst0 = (o * in_shape[axis] + start) * inner;
                        let src0 = o * len * inner;
                        for j in 0..len * inner {
                            g[dst0 + j] += grad[src0 + j];
                        }
                    }
                }
            }
            Op::Patches { x, patch } => {
                if self.needs(x) {
                    let s = self.shape(x).to_vec();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let pw = w / patch;
                    let plen = patch * patch * c;
                    let g = Self::accumulate(grads, x, h * w * c);
                    for py in 0..h / patch {
                        for px in 0..pw {
                            let row = py * pw + px;
                            for iy in 0..patch {
                                let dst0 = ((py * patch + iy) * w + px * patch) * c;
                                let src0 = row * plen + iy * patch * c;
                                for j in 0..patch * c {
                                    g[dst0 + j] += grad[src0 + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs(x) {
                    let out = &self.nodes[i].tensor.data;
                    let d = *self.nodes[i].tensor.shape.last().unwrap();
                    let g = Self::accumulate(grads, x, out.len());
                    for r in 0..out.len() / d {
                        let o = &out[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let dot: f64 = o.iter().zip(gr.iter()).map(|(&s, &g)| s * g).sum();
                        let gx = &mut g[r * d..(r + 1) * d];
                        for j in 0..d {
                            gx[j] += o[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let d = *self.shape(gamma).last().unwrap();
                let rows = self.data(x).len() / d;
                let xdata = self.data(x);
                let gdata = self.data(gamma);
                if self.needs(gamma) {
                    let gg = Self::accumulate(grads, gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xdata[r * d + j] - mean[r]) * invstd[r];
                            gg[j] += grad[r * d + j] * xhat;
                        }
                    }
                }
                if self.needs(beta) {
                    let gb = Self::accumulate(grads, beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += grad[r * d + j];
                        }
                    }
                }
                if self.needs(x) {
                    let gx = Self::accumulate(grads, x, xdata.len());
                    for r in 0..rows {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxhat = grad[r * d + j] * gdata[j];
                            let xhat = (xdata[r * d + j] - mean[r]) * invstd[r];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat / d as f64;
                        let m2 = sum_dxhat_xhat / d as f64;
                        for j in 0..d {
                            let dxhat = grad[r * d + j] * gdata[j];
                            let xhat = (xdata[r * d + j] - mean[r]) * invstd[r];
                            gx[r * d + j] += invstd[r] * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let s = self.shape(x).to_vec();
                let (rows, c) = (s[0], s[1]);
                let xdata = self.data(x);
                let gdata = self.data(gamma);
                if self.needs(gamma) {
                    let gg = Self::accumulate(grads, gamma, c);
                    for r in 0..rows {
                        for j in 0..c {
                            let xhat = (xdata[r * c + j] - mean[j]) * invstd[j];
                            gg[j] += grad[r * c + j] * xhat;
                        }
                    }
                }
                if self.needs(beta) {
                    let gb = Self::accumulate(grads, beta, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += grad[r * c + j];
                        }
                    }
                }
                if self.needs(x) {
                    let gx = Self::accumulate(grads, x, xdata.len());
                    if train {
                        for j in 0..c {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for r in 0..rows {
                                let dxhat = grad[r * c + j] * gdata[j];
                                let xhat = (xdata[r * c + j] - mean[j]) * invstd[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let m1 = sum_dxhat / rows as f64;
                            let m2 = sum_dxhat_xhat / rows as f64;
                            for r in 0..rows {
                                let dxhat = grad[r * c + j] * gdata[j];
                                let xhat = (xdata[r * c + j] - mean[j]) * invstd[j];
                                gx[r * c + j] += invstd[j] * (dxhat - m1 - xhat * m2);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..c {
                                gx[r * c + j] += grad[r * c + j] * gdata[j] * invstd[j];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(x) {
                    let g = Self::accumulate(grads, x, mask.len());
                    for j in 0..mask.len() {
                        g[j] += grad[j] * mask[j];
                    }
                }
            }
            Op::CrossEntropy {
                prob,
                target,
                weight,
                clamped,
            } => {
                if self.needs(prob) {
                    let n = self.data(prob).len();
                    let g = Self::accumulate(grads, prob, n);
                    g[target] += grad[0] * (-weight / clamped);
                }
            }
        }
    }
}

/// Central-difference gradient check for a scalar-valued tensor function.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "grad_check eps {} outside [1e-7, 1e-3]",
            eps
        )));
    }
    let mut g = Graph::new();
    let mut probe = x.clone();
    probe.requires_grad = true;
    let xid = g.leaf(probe);
    let loss = f(&mut g, xid)?;
    if g.tensor(loss).numel() != 1 {
        return Err(Error::Contract(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    g.backward(loss)?;
    let analytic = g.grad(xid).unwrap().to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let t = Tensor::from_vec(x.shape.clone(), data.to_vec())?;
        let id = g.leaf(t);
        let loss = f(&mut g, id)?;
        Ok(g.data(loss)[0])
    };

    let mut max_err: f64 = 0.0;
    let mut work = x.data.clone();
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let fp = eval(&work)?;
        work[i] = orig - eps;
        let fm = eval(&work)?;
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
