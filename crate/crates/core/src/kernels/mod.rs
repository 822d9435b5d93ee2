//! Raw numeric kernels on [`Tensor`](crate::Tensor)s, without graph tracking.

pub mod census;
pub mod conv;
pub mod resample;
