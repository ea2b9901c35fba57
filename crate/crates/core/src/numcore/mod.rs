//! Dense tensors, a reverse-mode tape and a finite-difference gradient check.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, ParamSet};
pub use tape::{BatchNormStats, Mode, Parameter, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::{Real, Tensor};

pub(crate) use tape::dot;
