//! Kernel dependence and conditional-dependence statistics (NOCCO, COND),
//! their feature gradients, and a full-batch domain-adaptation trainer that
//! uses COND to remove domain information from learned features.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common instantiations.

pub mod data;
pub mod dependence;
pub mod discrepancy;
pub mod error;
pub mod gradients;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod trainer;

pub use data::{AdaptationDataset, LabeledDomain, Scenario, SyntheticKind, SyntheticSpec, TargetTruth};
pub use dependence::{DependenceKind, DependenceReport, PermutationTest, StatBandwidths};
pub use error::{Error, Result};
pub use kernel::{Bandwidth, GramMatrix, KernelConfig, NormalizedGram};
pub use model::{LossBreakdown, ModelParams, ModelShape};
pub use scalar::Scalar;
pub use trainer::{fit, PseudoLabelMode, TrainConfig, TrainTrace, Trainer};

pub type Gram64 = GramMatrix<f64>;
pub type Gram32 = GramMatrix<f32>;
pub type KernelConfig64 = KernelConfig<f64>;
pub type KernelConfig32 = KernelConfig<f32>;
pub type Dataset64 = AdaptationDataset<f64>;
pub type Dataset32 = AdaptationDataset<f32>;
pub type Params64 = ModelParams<f64>;
pub type Params32 = ModelParams<f32>;
pub type Report64 = DependenceReport<f64>;
pub type Report32 = DependenceReport<f32>;
