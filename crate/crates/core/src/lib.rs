//! Joint NTK / QuadNTK training pipeline: spherical-harmonic analysis of the
//! feature covariance, spectral regularizers, perturbed gradient descent on
//! second-order Taylor models, and constructive expressivity checks.

pub mod error;
pub mod experiments;
pub mod expressivity;
pub mod harmonics;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod spectral;
pub mod tasks;

pub use error::{Error, Result};
pub use harmonics::{GegenbauerSeries, HarmonicsContext, SigmaMatrix};
pub use model::{Activation, ModelKind, NetworkInit, WeightDelta, WeightNorms};
pub use objective::{LossKind, LossSpec, RegWeights};
pub use optimizer::{TrainConfig, TrajectoryRecord};
pub use spectral::{FeatureMatrix, SigmaEigPartition, SpectralPartition};
pub use tasks::{Dataset, TargetSpec};
