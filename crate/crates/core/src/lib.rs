//! Width-depth maximal update parameterization (μP) for residual networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense matrices, RMS and spectral norms, orthogonalization.
//! * [`scaling`]: per-layer hyperparameter rules for nine optimizers and the
//!   spectral-condition checkers.
//! * [`netsim`]: toy residual networks with exact backpropagation.
//! * [`optim`]: optimizer update rules in reduced and practical form.
//! * [`diagnostics`]: exponent fits, coordinate checks, assumption verifiers.
//! * [`harness`]: configuration, datasets, experiment drivers and result files.

pub mod diagnostics;
pub mod harness;
pub mod linalg;
pub mod netsim;
pub mod optim;
pub mod scaling;

pub use diagnostics::{Axis, ScalingFit, Verdict};
pub use linalg::{LinalgError, Matrix, RandomSource, Vector};
pub use netsim::{Activation, ArchSpec, BlockSpec, ForwardTrace, GradientSet, Loss, ParamSet, ResidualNet};
pub use optim::{OptimizerState, StepConfig};
pub use scaling::{
    BaseHyperparams, DepthConvention, LayerKind, LayerRole, OptimizerKind, ParamKind,
    ScaleRatios, ScaledHyperparams,
};
