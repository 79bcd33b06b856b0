//! Recursive non-additive multi-fidelity Gaussian-process emulation with
//! cost-aware active learning.

pub mod active_learning;
pub mod benchmarks;
pub mod dataset;
pub mod design;
pub mod emulator;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod metrics;
pub mod moments;
pub mod normal;
pub mod optim;
pub mod par;

pub use error::{Error, Result};
pub use gp::{fit_level, FitOptions, LevelModel};
pub use kernels::{KernelKind, LengthscaleVector};
pub use par::Exec;
