//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node holding its output and whatever it needs
//! for the backward pass. Inputs always precede their consumers on the tape,
//! so reverse tape order is a reverse topological order.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::array::{numel, strides_of, Tensor};
use super::kernels::{self, ConvGeom};
use super::params::{GradMap, ParamId, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Updated running `(mean, var)` of a training-mode batch norm.
pub type RunningStats<T> = (Tensor<T>, Tensor<T>);

/// Running statistics consumed and refreshed by batch normalisation.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormState<'a, T> {
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Bce { logits: Var, targets: Vec<T> },
    SumAll { a: Var },
    SumAxes { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { a: Var, axis: usize, indices: Vec<usize> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, conv1d: bool },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::SumAll { a }
            | Op::SumAxes { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Gather { a, .. } => vec![*a],
            Op::CrossEntropy { logits, .. } | Op::Bce { logits, .. } => vec![*logits],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A computation graph confined to one thread.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element offsets of `in_shape` broadcast against `out_shape`, in output order.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides_of(in_shape);
    let mut strides = vec![0usize; rank];
    for i in 0..in_shape.len() {
        let o = rank - in_shape.len() + i;
        strides[o] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    let n = numel(out_shape);
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    offs
}

/// Sums `grad` (shaped like the broadcast output) down to `shape`.
fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = vec![T::zero(); numel(shape)];
    let n = out.len();
    if grad.shape().ends_with(shape) {
        for chunk in grad.data().chunks(n) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
    } else {
        for (&off, &g) in broadcast_offsets(grad.shape(), shape).iter().zip(grad.data()) {
            out[off] += g;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

fn binary_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out_shape: &[usize], f: impl Fn(T, T) -> T) -> Vec<T> {
    if a.shape() == b.shape() {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    if a.shape() == out_shape && out_shape.ends_with(b.shape()) {
        let bd = b.data();
        return a
            .data()
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
    }
    let oa = broadcast_offsets(out_shape, a.shape());
    let ob = broadcast_offsets(out_shape, b.shape());
    oa.iter()
        .zip(&ob)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect()
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    /// A graph that records values only; nothing on it is differentiable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let id = self.nodes.len();
        let inputs = op.inputs();
        assert!(
            inputs.iter().all(|v| v.0 < id),
            "graph inputs must precede their consumer"
        );
        let needs_grad = self.grad_enabled
            && match op {
                Op::Leaf => false,
                Op::Param => true,
                _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
            };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A differentiable input that is not part of a parameter store.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = self.grad_enabled;
        v
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        if !store.is_trainable(id) {
            self.nodes[v.0].needs_grad = false;
        }
        self.params.insert(id, v);
        v
    }

    /// Buffer refreshes (running statistics) produced by train-mode batch norm.
    pub fn record_stat_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.push((id, value));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Activity (`input > 0`) of every ReLU unit on the tape, in tape order.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { a } = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    // ---- linear algebra -------------------------------------------------

    /// `[..., m, k] · [k, n]`, or batched `[B, m, k] · [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() >= 2 && sb.len() == 2 {
            let k = sa[sa.len() - 1];
            if k != sb[0] {
                return Err(shape_err("matmul", format!("{sa:?} · {sb:?}: inner extents {k} vs {}", sb[0])));
            }
            let m = numel(&sa[..sa.len() - 1]);
            let n = sb[1];
            let mut out = vec![T::zero(); m * n];
            kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false, false, false);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let t = Tensor::new(shape, out)?;
            return Ok(self.push(t, Op::MatMul { a, b, batched: false }));
        }
        if sa.len() == 3 && sb.len() == 3 {
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if sb[0] != bs || sb[1] != k {
                return Err(shape_err("matmul", format!("batched {sa:?} · {sb:?}")));
            }
            let mut out = vec![T::zero(); bs * m * n];
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                kernels::matmul(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    false,
                    false,
                );
            }
            let t = Tensor::new(vec![bs, m, n], out)?;
            return Ok(self.push(t, Op::MatMul { a, b, batched: true }));
        }
        Err(shape_err("matmul", format!("unsupported operand ranks {sa:?} · {sb:?}")))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| shape_err(op, format!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_binary(a, b, "add")?;
        let data = binary_broadcast(self.value(a), self.value(b), &shape, |x, y| x + y);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_binary(a, b, "mul")?;
        let data = binary_broadcast(self.value(a), self.value(b), &shape, |x, y| x * y);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, T::lit(-1.0));
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let t = self.value(a).map(|v| v * factor);
        self.push(t, Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu { a })
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF written through `erf`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(FRAC_1_SQRT_2);
        let t = self
            .value(a)
            .map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        self.push(t, Op::Gelu { a })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(shape_err("softmax", "rank-0 input".into()));
        }
        let width = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { a }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`; logits `[B, A]`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy_with_logits",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let width = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
            return Err(Error::invalid(format!("label {bad} out of range for {width} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(width).zip(labels) {
            let logits_row: Vec<T> = row.to_vec();
            let lse = log_sum_exp(&logits_row);
            total += lse - logits_row[label];
            softmax_in_place(row);
        }
        let loss = total / T::lit(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(shape_err(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", x.shape(), targets.shape()),
            ));
        }
        let total: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let loss = total / T::lit(x.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// Sums over `axes`, dropping them from the shape.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank || std::mem::replace(&mut reduced[ax], true) {
                return Err(shape_err("sum_axes", format!("axes {axes:?} invalid for {shape:?}")));
            }
        }
        let kept: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).collect();
        let order: Vec<usize> = kept.iter().copied().chain((0..rank).filter(|&i| reduced[i])).collect();
        let moved = self.value(a).permute(&order)?;
        let out_shape: Vec<usize> = kept.iter().map(|&i| shape[i]).collect();
        let chunk: usize = (0..rank).filter(|&i| reduced[i]).map(|i| shape[i]).product();
        let data: Vec<T> = moved.data().chunks(chunk).map(|c| c.iter().copied().sum()).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::SumAxes { a, axes: order }))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let count: usize = axes.iter().filter_map(|&ax| shape.get(ax)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, T::lit(1.0 / count as f64)))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(axes)?;
        Ok(self.push(t, Op::Permute { a, axes: axes.to_vec() }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Selects `indices` (possibly repeated) along `axis`.
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("gather", format!("axis {axis} out of range for {shape:?}")));
        }
        if indices.is_empty() {
            return Err(shape_err("gather", "empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(shape_err("gather", format!("index {bad} out of range for extent {}", shape[axis])));
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * extent + i) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Gather {
                a,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let extent = self
            .shape(a)
            .get(axis)
            .copied()
            .ok_or_else(|| shape_err("slice", format!("axis {axis} out of range")))?;
        if start >= end || end > extent {
            return Err(shape_err("slice", format!("range {start}..{end} invalid for extent {extent}")));
        }
        let indices: Vec<usize> = (start..end).collect();
        self.gather(a, axis, &indices)
    }

    // ---- neural layers --------------------------------------------------

    /// 2-D convolution: `x [N, Ci, H, W]`, `w [Co, Ci, kh, kw]`, optional bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {sx:?} with kernel {sw:?}")));
        }
        let geom = ConvGeom {
            in_channels: sw[1],
            out_channels: sw[0],
            kernel: (sw[2], sw[3]),
            stride,
            padding,
        };
        self.conv_impl(x, w, b, geom, (sx[0], sx[2], sx[3]), false)
    }

    /// 1-D convolution: `x [N, Ci, L]`, `w [Co, Ci, k]`, optional bias `[Co]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(shape_err("conv1d", format!("input {sx:?} with kernel {sw:?}")));
        }
        let geom = ConvGeom {
            in_channels: sw[1],
            out_channels: sw[0],
            kernel: (1, sw[2]),
            stride: (1, stride),
            padding: (0, padding),
        };
        self.conv_impl(x, w, b, geom, (sx[0], 1, sx[2]), true)
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, (n, h, wd): (usize, usize, usize), conv1d: bool) -> Result<Var> {
        let op = if conv1d { "conv1d" } else { "conv2d" };
        let (ho, wo) = geom
            .output_hw(h, wd)
            .ok_or_else(|| shape_err(op, format!("kernel {:?} does not fit input {h}x{wd} with padding {:?}", geom.kernel, geom.padding)))?;
        if let Some(bv) = b {
            if self.shape(bv) != [geom.out_channels] {
                return Err(shape_err(op, format!("bias {:?} for {} output channels", self.shape(bv), geom.out_channels)));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            h,
            wd,
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            &geom,
        );
        let shape = if conv1d {
            vec![n, geom.out_channels, wo]
        } else {
            vec![n, geom.out_channels, ho, wo]
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom, conv1d }))
    }

    /// Batch normalisation over `[N, C, H, W]` (statistics per channel).
    ///
    /// In train mode the batch statistics normalise and the refreshed running
    /// statistics `(mean, var)` are returned; eval mode uses `state` as-is.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: BatchNormState<'_, T>,
        train: bool,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("batchnorm2d", format!("expected [N, C, H, W], got {sx:?}")));
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err("batchnorm2d", format!("{what} {:?} for {c} channels", self.shape(v))));
            }
        }
        if state.running_mean.shape() != [c] || state.running_var.shape() != [c] {
            return Err(shape_err("batchnorm2d", format!("running statistics must have shape [{c}]")));
        }
        let eps = T::lit(state.eps);
        let xd = self.value(x).data();
        let count = n * plane;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            for i in 0..n {
                for ch in 0..c {
                    let s = &xd[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    mean[ch] += s.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= T::lit(count as f64));
            for i in 0..n {
                for ch in 0..c {
                    let s = &xd[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= T::lit(count as f64));
        } else {
            mean.copy_from_slice(state.running_mean.data());
            var.copy_from_slice(state.running_var.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for j in range {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + bt[ch];
                }
            }
        }
        let update = train.then(|| {
            let m = T::lit(state.momentum);
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let rm = state
                .running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| (T::one() - m) * r + m * b)
                .collect();
            let rv = state
                .running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                .collect();
            (
                Tensor::new(vec![c], rm).expect("channel vector"),
                Tensor::new(vec![c], rv).expect("channel vector"),
            )
        });
        let t = Tensor::new(sx, out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, update))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| shape_err("layernorm", "rank-0 input".into()))?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [d] {
                return Err(shape_err("layernorm", format!("{what} {:?} for width {d}", self.shape(v))));
            }
        }
        let eps = T::lit(eps);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a rank-0 `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::invalid("root does not belong to this graph"));
        }
        let rv = &self.nodes[root.0].value;
        if rv.rank() != 0 {
            return Err(Error::invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        if !self.nodes[root.0].needs_grad {
            return Err(Error::invalid("root was not produced with differentiation enabled"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                _ => self.propagate(i, &g, &mut grads)?,
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, batched } => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                if !batched {
                    let k = bv.shape()[0];
                    let n = bv.shape()[1];
                    let m = av.len() / k;
                    if self.wants(a) {
                        let mut da = vec![T::zero(); m * k];
                        kernels::matmul(g.data(), bv.data(), &mut da, m, n, k, false, true, false);
                        self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if self.wants(b) {
                        let mut db = vec![T::zero(); k * n];
                        kernels::matmul(av.data(), g.data(), &mut db, k, m, n, true, false, false);
                        self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                } else {
                    let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = bv.shape()[2];
                    if self.wants(a) {
                        let mut da = vec![T::zero(); bs * m * k];
                        for s in 0..bs {
                            kernels::matmul(
                                &g.data()[s * m * n..(s + 1) * m * n],
                                &bv.data()[s * k * n..(s + 1) * k * n],
                                &mut da[s * m * k..(s + 1) * m * k],
                                m,
                                n,
                                k,
                                false,
                                true,
                                false,
                            );
                        }
                        self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if self.wants(b) {
                        let mut db = vec![T::zero(); bs * k * n];
                        for s in 0..bs {
                            kernels::matmul(
                                &av.data()[s * m * k..(s + 1) * m * k],
                                &g.data()[s * m * n..(s + 1) * m * n],
                                &mut db[s * k * n..(s + 1) * k * n],
                                k,
                                m,
                                n,
                                true,
                                false,
                                false,
                            );
                        }
                        self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(grads, v, reduce_to(g, self.shape(v)));
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                for (v, other) in [(a, b), (b, a)] {
                    if self.wants(v) {
                        let ov = self.value(other);
                        let prod = binary_broadcast(g, ov, out.shape(), |x, y| x * y);
                        let full = Tensor::new(out.shape().to_vec(), prod)?;
                        self.accumulate(grads, v, reduce_to(&full, self.shape(v)));
                    }
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::Relu { a } => {
                let x = self.value(*a);
                let d = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *a, d);
            }
            Op::Gelu { a } => {
                let x = self.value(*a);
                let inv_sqrt2 = T::lit(FRAC_1_SQRT_2);
                let half = T::lit(0.5);
                let pdf_scale = T::lit(std_normal_pdf(0.0));
                let d = g.zip_map(x, |gv, xv| {
                    let cdf = half * (T::one() + (xv * inv_sqrt2).erf());
                    let pdf = pdf_scale * (-half * xv * xv).exp();
                    gv * (cdf + xv * pdf)
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Softmax { a } => {
                let width = *out.shape().last().unwrap();
                let mut d = vec![T::zero(); out.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(width)
                    .zip(out.data().chunks(width))
                    .zip(g.data().chunks(width))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for j in 0..width {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.item() / T::lit(labels.len() as f64);
                let shape = self.shape(*logits).to_vec();
                let width = shape[1];
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(width).zip(labels) {
                    row[label] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::new(shape, d)?);
            }
            Op::Bce { logits, targets } => {
                let x = self.value(*logits);
                let scale = g.item() / T::lit(x.len() as f64);
                let d: Vec<T> = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::SumAll { a } => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::SumAxes { a, axes: order } => {
                let shape = self.shape(*a).to_vec();
                let kept = out.rank();
                let chunk: usize = order[kept..].iter().map(|&i| shape[i]).product();
                let expanded: Vec<T> = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, chunk))
                    .collect();
                let moved_shape: Vec<usize> = order.iter().map(|&i| shape[i]).collect();
                let mut inverse = vec![0; order.len()];
                for (pos, &ax) in order.iter().enumerate() {
                    inverse[ax] = pos;
                }
                let d = Tensor::new(moved_shape, expanded)?.permute(&inverse)?;
                self.accumulate(grads, *a, d);
            }
            Op::Reshape { a } => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().with_shape(shape));
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (pos, &ax) in axes.iter().enumerate() {
                    inverse[ax] = pos;
                }
                self.accumulate(grads, *a, g.permute(&inverse)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.shape(v).to_vec();
                    let ext = shape[*axis];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(numel(&shape));
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + ext * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(shape, d)?);
                    }
                    offset += ext;
                }
            }
            Op::Gather { a, axis, indices } => {
                let shape = self.shape(*a).to_vec();
                let (outer, extent, inner) = split_at_axis(&shape, *axis);
                let mut d = vec![T::zero(); numel(&shape)];
                let gd = g.data();
                for o in 0..outer {
                    for (j, &idx) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner;
                        let dst = (o * extent + idx) * inner;
                        for t in 0..inner {
                            d[dst + t] += gd[src + t];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape, d)?);
            }
            Op::Conv { x, w, b, geom, conv1d } => {
                let sx = self.shape(*x).to_vec();
                let (n, h, wd) = if *conv1d { (sx[0], 1, sx[2]) } else { (sx[0], sx[2], sx[3]) };
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    h,
                    wd,
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(sx, dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if let Some(bv) = b {
                    self.accumulate(grads, *bv, Tensor::new(vec![geom.out_channels], db)?);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let sx = self.shape(*x).to_vec();
                let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        for j in r {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let m = T::lit((n * plane) as f64);
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                            for j in r {
                                dx[j] = if *train {
                                    gam[ch] * inv_std[ch] * (gd[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    gam[ch] * inv_std[ch] * gd[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(sx, dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let sx = self.shape(*x).to_vec();
                let d = *sx.last().unwrap();
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); gd.len()];
                let dn = T::lit(d as f64);
                for (r, &is) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in row.clone() {
                        let k = j - r * d;
                        dgamma[k] += gd[j] * xhat[j];
                        dbeta[k] += gd[j];
                        let dh = gd[j] * gam[k];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[j];
                    }
                    for j in row {
                        let dh = gd[j] * gam[j - r * d];
                        dx[j] = is * (dh - sum_dh / dn - xhat[j] * sum_dh_h / dn);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx, dx)?);
                self.accumulate(grads, *gamma, Tensor::new(vec![d], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![d], dbeta)?);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a differentiable leaf (input or parameter node).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Gradient for every trainable parameter in `store`; zeros where unreached.
    pub fn param_map(&self, store: &ParamStore<T>) -> GradMap<T> {
        store
            .trainable_ids()
            .map(|id| {
                let g = self
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
                (id, g)
            })
            .collect()
    }
}
