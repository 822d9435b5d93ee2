pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod ppm;
pub mod scalar;
pub mod sparse;
pub mod tensor;
pub mod trainer;
pub mod uen;
pub mod vfi;
pub mod vision;

pub use autograd::{ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type UenTrainer32 = trainer::UenTrainer<f32>;
pub type VfiTrainer32 = trainer::VfiTrainer<f32>;
