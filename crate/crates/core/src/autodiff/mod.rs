//! Reverse-mode differentiation over tensor-valued operations.

mod check;
mod ops;
mod tape;

pub use check::{
    check_tape_fn, finite_diff_check, relative_error, tape_gradients, FdOptions, FdReport, LossBuilder, ParamReport,
    Probe,
};
pub use tape::{Backward, Tape, Var};
