//! Dense numerics: tensors, a reverse-mode tape over a fixed op set, the
//! transformer block shared by every model, finite-difference checking,
//! AdamW and the checkpoint format.

mod block;
pub mod checkpoint;
mod gradcheck;
pub mod ops;
pub mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use block::{attention_block, Activation, AttentionBlock, SideBranch};
pub use checkpoint::{AnyTensor, Checkpoint};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use ops::{argmax, layer_norm, softmax};
pub use optim::{clip_grad_norm, lr_schedule, AdamW};
pub use params::{Init, ParamStore};
pub use scalar::{matmul_into, DType, MatRef, Scalar};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
