//! Dense tensors, a reverse-mode tape and the transformer building blocks
//! used by the towers and the losses.

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport};
pub use ops::{cosine_similarity, linear, multi_head_attention, softmax_rows, AttentionParams};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{AttentionMask, Tensor};

pub use kernels::dot;
