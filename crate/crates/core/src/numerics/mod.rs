//! Tensors, the autodiff tape, and the pure numeric kernels shared by the
//! client and server models.

mod grad_check;
mod ops;
mod tape;
mod tensor;

pub use grad_check::grad_check;
pub use ops::{cosine_sim, layer_norm, proto_logits, softmax_masked, softmax_scaled};
pub(crate) use tape::stable_sigmoid;
pub use tape::{Tape, Var};
pub use tensor::{DifferentiableParam, Tensor};
