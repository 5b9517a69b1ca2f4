//! Dense-tensor arithmetic with reverse-mode automatic differentiation and
//! an Adam optimizer. Everything upstream is built from these primitives.

pub mod adam;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

/// Forward-pass mode; dropout is identity in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
