pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = networks::Model<f32>;
pub type Model64 = networks::Model<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
