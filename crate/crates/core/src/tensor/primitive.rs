//! Name-based dispatch over the differentiable primitives.

use std::fmt;
use std::str::FromStr;

use super::array::Tensor;
use super::graph::{BatchNormState, Graph, Var};
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    MatMul,
    Conv2d,
    Conv1d,
    BatchNorm2d,
    LayerNorm,
    Relu,
    Gelu,
    Softmax,
    CrossEntropyWithLogits,
    BceWithLogits,
    Add,
    Mul,
    Mean,
    Reshape,
    Permute,
    Concat,
    Slice,
}

const NAMES: [(PrimitiveKind, &str); 17] = [
    (PrimitiveKind::MatMul, "matmul"),
    (PrimitiveKind::Conv2d, "conv2d"),
    (PrimitiveKind::Conv1d, "conv1d"),
    (PrimitiveKind::BatchNorm2d, "batchnorm2d"),
    (PrimitiveKind::LayerNorm, "layernorm"),
    (PrimitiveKind::Relu, "relu"),
    (PrimitiveKind::Gelu, "gelu"),
    (PrimitiveKind::Softmax, "softmax"),
    (PrimitiveKind::CrossEntropyWithLogits, "cross_entropy_with_logits"),
    (PrimitiveKind::BceWithLogits, "bce_with_logits"),
    (PrimitiveKind::Add, "add"),
    (PrimitiveKind::Mul, "mul"),
    (PrimitiveKind::Mean, "mean"),
    (PrimitiveKind::Reshape, "reshape"),
    (PrimitiveKind::Permute, "permute"),
    (PrimitiveKind::Concat, "concat"),
    (PrimitiveKind::Slice, "slice"),
];

impl PrimitiveKind {
    pub fn all() -> impl Iterator<Item = PrimitiveKind> {
        NAMES.iter().map(|(k, _)| *k)
    }

    pub fn name(self) -> &'static str {
        NAMES.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap()
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_owned()))
    }
}

/// Convolution hyperparameters; validated against the kernel tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvAttrs {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Attributes consumed by [`apply_primitive`]; each kind reads what it needs.
#[derive(Clone, Debug, Default)]
pub struct Attrs<T> {
    pub conv: Option<ConvAttrs>,
    pub train: bool,
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
    pub momentum: Option<f64>,
    pub eps: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub axes: Option<Vec<usize>>,
    pub axis: Option<usize>,
    pub range: Option<(usize, usize)>,
    pub labels: Option<Vec<usize>>,
    pub targets: Option<Tensor<T>>,
}

fn arity(kind: PrimitiveKind, inputs: &[Var], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{kind} takes {allowed:?} inputs, got {}",
            inputs.len()
        )))
    }
}

fn need<'a, A>(v: &'a Option<A>, kind: PrimitiveKind, what: &str) -> Result<&'a A> {
    v.as_ref()
        .ok_or_else(|| Error::invalid(format!("{kind} requires attribute `{what}`")))
}

/// Applies primitive `kind` to `inputs` on `g`, returning the output node.
pub fn apply_primitive<T: Scalar>(g: &mut Graph<T>, kind: PrimitiveKind, inputs: &[Var], attrs: &Attrs<T>) -> Result<Var> {
    use PrimitiveKind as K;
    match kind {
        K::MatMul => {
            arity(kind, inputs, &[2])?;
            g.matmul(inputs[0], inputs[1])
        }
        K::Conv2d | K::Conv1d => {
            arity(kind, inputs, &[2, 3])?;
            let c = need(&attrs.conv, kind, "conv")?;
            let ws = g.shape(inputs[1]).to_vec();
            let expected_rank = if kind == K::Conv2d { 4 } else { 3 };
            let kernel_ok = ws.len() == expected_rank && ws[ws.len() - 1] == c.kernel && (kind == K::Conv1d || ws[2] == c.kernel);
            if !kernel_ok || ws[0] != c.out_channels || ws[1] != c.in_channels {
                return Err(Error::shape(
                    "conv",
                    format!("kernel tensor {ws:?} disagrees with attributes {c:?}"),
                ));
            }
            let bias = inputs.get(2).copied();
            if kind == K::Conv2d {
                g.conv2d(inputs[0], inputs[1], bias, (c.stride, c.stride), (c.padding, c.padding))
            } else {
                g.conv1d(inputs[0], inputs[1], bias, c.stride, c.padding)
            }
        }
        K::BatchNorm2d => {
            arity(kind, inputs, &[3])?;
            let state = BatchNormState {
                running_mean: need(&attrs.running_mean, kind, "running_mean")?,
                running_var: need(&attrs.running_var, kind, "running_var")?,
                momentum: attrs.momentum.unwrap_or(0.1),
                eps: attrs.eps.unwrap_or(1e-5),
            };
            g.batch_norm2d(inputs[0], inputs[1], inputs[2], state, attrs.train)
                .map(|(v, _)| v)
        }
        K::LayerNorm => {
            arity(kind, inputs, &[3])?;
            g.layer_norm(inputs[0], inputs[1], inputs[2], attrs.eps.unwrap_or(1e-5))
        }
        K::Relu => {
            arity(kind, inputs, &[1])?;
            Ok(g.relu(inputs[0]))
        }
        K::Gelu => {
            arity(kind, inputs, &[1])?;
            Ok(g.gelu(inputs[0]))
        }
        K::Softmax => {
            arity(kind, inputs, &[1])?;
            g.softmax(inputs[0])
        }
        K::CrossEntropyWithLogits => {
            arity(kind, inputs, &[1])?;
            g.cross_entropy_with_logits(inputs[0], need(&attrs.labels, kind, "labels")?)
        }
        K::BceWithLogits => {
            arity(kind, inputs, &[1])?;
            g.bce_with_logits(inputs[0], need(&attrs.targets, kind, "targets")?)
        }
        K::Add => {
            arity(kind, inputs, &[2])?;
            g.add(inputs[0], inputs[1])
        }
        K::Mul => {
            arity(kind, inputs, &[2])?;
            g.mul(inputs[0], inputs[1])
        }
        K::Mean => {
            arity(kind, inputs, &[1])?;
            match &attrs.axes {
                Some(axes) => g.mean_axes(inputs[0], axes),
                None => Ok(g.mean(inputs[0])),
            }
        }
        K::Reshape => {
            arity(kind, inputs, &[1])?;
            g.reshape(inputs[0], need(&attrs.shape, kind, "shape")?)
        }
        K::Permute => {
            arity(kind, inputs, &[1])?;
            g.permute(inputs[0], need(&attrs.axes, kind, "axes")?)
        }
        K::Concat => g.concat(inputs, *need(&attrs.axis, kind, "axis")?),
        K::Slice => {
            arity(kind, inputs, &[1])?;
            let (start, end) = *need(&attrs.range, kind, "range")?;
            g.slice(inputs[0], *need(&attrs.axis, kind, "axis")?, start, end)
        }
    }
}
