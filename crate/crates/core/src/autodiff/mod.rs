//! Reverse-mode automatic differentiation and parameter optimizers.

mod gradcheck;
mod kernels;
mod optim;
mod tape;

pub use gradcheck::check_gradient;
pub use optim::{Param, ParamStore};
pub use tape::{PrimitiveKind, Tape, Var};
