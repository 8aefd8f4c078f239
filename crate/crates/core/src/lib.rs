//! Kernelized conditional random fields for sequence labeling.
//!
//! Chain-structured models whose emission and transition parameters live in
//! reproducing kernel Hilbert spaces, trained in dual coefficients by
//! block-Jacobi Newton steps, with incomplete Cholesky for basis selection.

pub mod atomic;
pub mod chain;
pub mod config;
pub mod crossval;
pub mod data;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod lowrank;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod primal;
pub mod synthetic;

pub use chain::{CliqueKind, LabelAlphabet, LabeledSequence};
pub use config::{Schedule, TrainConfig};
pub use data::{load_dataset, Dataset};
pub use error::{Error, Result};
pub use inference::{forward_backward, viterbi, CliqueMarginals, ScoreTable};
pub use kernels::{Anchor, KernelSpec, WindowVector};
pub use lowrank::{incomplete_cholesky, CholeskyFactor, Tolerance};
pub use metrics::{evaluate, Metrics};
pub use model::{fit, FitOutcome, Model};
pub use objective::{BasisSet, Coefficients, Objective};
pub use optimizer::{train, TrainState, Trainer};
