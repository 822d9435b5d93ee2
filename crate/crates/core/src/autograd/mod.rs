//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

pub mod check;
mod param;
mod tape;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
