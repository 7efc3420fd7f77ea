//! Dense f64 tensors, a reverse-mode tape, SGD with momentum, learning-rate
//! schedules and the seeded counter-based RNG used by every other module.

mod optim;
mod rng;
mod schedule;
mod tape;
mod tensor;

pub use optim::{Sgd, SgdConfig};
pub use rng::Rng;
pub use schedule::Schedule;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tensor::{add_row_bias_kernel, matmul_kernel, relu_kernel};
pub use tensor::{l2_normalize, log_softmax_rows, matmul, matmul_nt_kernel, softmax_rows, Tensor, NORM_EPS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch, {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range 0..{bound} (row {row})")]
    Index { op: &'static str, index: usize, bound: usize, row: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl NumericsError {
    pub(crate) fn dims(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        NumericsError::Shape { op, detail: format!("{a:?} vs {b:?}") }
    }
}
