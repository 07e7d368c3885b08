//! Jacobian-regularized training and analysis of bias-free ReLU MLPs.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common use. Bound calculators and
//! statistics are always `f64`.

pub mod attacks;
pub mod bounds;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod jacobian;
pub mod losses;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use attacks::{pgd_attack, pgd_attack_batch, project_ball, robust_metrics, AttackConfig, Geometry, RobustMetrics};
pub use bounds::{bound_report, BoundInputs, BoundReport, Regime};
pub use checkpoint::Checkpoint;
pub use data::{load_idx, subsample, Dataset, DatasetStats};
pub use error::{Error, Result};
pub use jacobian::{batch_jacobian, input_jacobian, Jacobian, PenaltyNorm};
pub use losses::{cross_entropy, surrogate_loss, RegConfig, LIP_L2, LIP_LINF};
pub use network::{forward, forward_batch, init_params, Activation, MlpParams, ParamGrad, ScaleRule};
pub use scalar::Scalar;
pub use tensor::{Matrix, Rng, Vector};
pub use trainer::{evaluate, objective_grad, train, EpochLog, TrainConfig};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Vector64 = Vector<f64>;
pub type Vector32 = Vector<f32>;
pub type Mlp64 = MlpParams<f64>;
pub type Mlp32 = MlpParams<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
