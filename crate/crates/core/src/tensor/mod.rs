//! Dense NCHW tensors with reverse-mode differentiation.
//!
//! [`kernels`] holds the pure forward/backward routines; [`Tape`] records
//! them into a lineage graph and sweeps it in reverse for gradients.

mod array;
pub mod gradcheck;
pub mod kernels;
mod tape;

pub use array::{Shape, Tensor};
pub use kernels::{BatchNormState, RunningStats};
pub use tape::{Tape, Var};

/// Train/eval switch for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
