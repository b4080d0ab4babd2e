//! Reverse-mode automatic differentiation.

pub mod gradcheck;
mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use optim::{Sgd, SgdConfig};
pub use tape::{Gradients, Node, OpKind, Tape, TapeStats, Var};
pub use tensor::{DType, ParamId, ParamStore, Tensor};
