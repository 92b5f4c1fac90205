//! Minimal dense-array compute layer with reverse-mode differentiation.
//!
//! Everything is `f64` and 2-D. The only broadcasting is scalar-with-tensor
//! ([`Var::scale`], [`Var::shift`]); every other binary op requires exactly
//! matching shapes and reports both shapes on mismatch.

mod gradcheck;
mod params;
mod suite;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradcheckReport};
pub use params::{Param, ParamId, ParamStore};
pub use suite::{check_primitive, primitive_suite, PrimitiveCheck, PRIMITIVES};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
