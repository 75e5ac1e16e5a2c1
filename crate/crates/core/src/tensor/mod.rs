//! Dense tensors, reverse-mode differentiation, and the Adam optimizer.

mod adam;
mod array;
pub mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod primitive;
mod scalar;

pub use adam::{Adam, AdamConfig};
pub use array::Tensor;
pub use gradcheck::{central_difference, finite_difference_gradient, relative_error};
pub use graph::{BatchNormState, Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use params::{GradMap, ParamId, ParamStore};
pub use primitive::{apply_primitive, Attrs, ConvAttrs, PrimitiveKind};
pub use scalar::{Precision, Scalar};
