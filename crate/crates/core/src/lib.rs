#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod divergences;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prototypes;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision graph node.
pub type DiffNode = autodiff::Var<f64>;
/// Single-precision graph node.
pub type DiffNode32 = autodiff::Var<f32>;
pub type Aggd = distributions::AggdParams<f64>;
pub type Prior = distributions::FactorizedPrior<f64>;
pub type Kernel = divergences::KernelSpec<f64>;
pub type Labels = distributions::LabelDistribution<f64>;
pub type Model = model::ModelState<f64>;
pub type Prototypes = prototypes::PrototypeStore<f64>;
pub type Optimizer = optim::AdamW<f64>;
pub type Losses = losses::LossBreakdown<f64>;
