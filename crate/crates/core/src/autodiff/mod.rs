//! Dense tensors with a reverse-mode tape, limited to the primitives a small
//! decoder-only transformer needs.

mod tape;
mod tensor;

pub use tape::{GeluMode, Gradients, Tape, Var};
pub use tensor::{gemm, Scalar, Tensor};
