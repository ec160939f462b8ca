//! Task arithmetic versus multitask gradient descent on small feed-forward
//! classifiers.
//!
//! The crate trains depth-L MLPs with full-batch gradient descent, builds
//! task-arithmetic merges, and measures how far the merge drifts from joint
//! multitask training as a function of the step size. Exact gradients and
//! Hessian-vector products make the second-order terms of that drift
//! computable, and the `analysis` module fits their orders and checks the
//! uniform norm bounds on gradients, Hessians and the curvature coefficient.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod merge;
pub mod network;
pub mod par;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{Activation, MlpArchitecture, MlpModel};
pub use taskgen::{TaskDataset, TaskSpec};
pub use tensor::{DenseMatrix, ParamVector};
pub use trainer::{TrainConfig, Trajectory};

/// Library version written into artifact manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
