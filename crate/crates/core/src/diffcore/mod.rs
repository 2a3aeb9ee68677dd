//! Dense tensors, reverse-mode differentiation and gradient checking.

mod attention;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use attention::{AttentionPlan, Segment};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamCheck};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
