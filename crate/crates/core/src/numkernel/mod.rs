//! Dense tensors, a reverse-mode tape for the handful of operations the model
//! uses, and a finite-difference gradient oracle.

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with_oracle, relative_error};
pub use ops::{cross_entropy, layer_norm, matmul, softmax_lastdim};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Strides, Tensor};

/// Runs the backward pass of `loss` on `tape`.
pub fn backward<T: Scalar>(tape: &mut Tape<T>, loss: Var) -> crate::error::Result<()> {
    tape.backward(loss)
}
