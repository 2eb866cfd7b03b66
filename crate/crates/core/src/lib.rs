pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod scalar;
pub mod seed;
pub mod storage;
pub mod synthdata;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Generator32 = models::Generator<f32>;
pub type Generator64 = models::Generator<f64>;
pub type Discriminator32 = models::Discriminator<f32>;
pub type Discriminator64 = models::Discriminator<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
pub type WeightTable64 = tasks::WeightTable<f64>;
/// Exact class weights, for checking the equal-mass invariant without rounding.
pub type RationalWeightTable = tasks::WeightTable<num_rational::Ratio<i128>>;
