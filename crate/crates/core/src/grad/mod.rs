//! Dense arrays, a reverse-mode tape, parameters, RMSProp and gradient checks.

mod array;
pub mod check;
pub mod nn;
mod optim;
mod params;
mod tape;

pub use array::Array;
pub use optim::{RmsProp, RmsPropConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Activation, Gradients, Tape, Var};
