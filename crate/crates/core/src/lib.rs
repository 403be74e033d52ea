//! Bounded spline control of small quantum systems.
//!
//! The crate builds drift/control Hamiltonian pairs for a two-qubit model and
//! few-fermion mixtures in a harmonic trap, propagates states under a
//! clamped cubic-spline field, optimizes the field knots with BFGS and
//! measures how the result degrades under knot noise.

pub mod control;
pub mod error;
pub mod linalg;
pub mod models;
pub mod optimizer;
pub mod propagator;
pub mod robustness;

pub use control::{ControlProtocol, RangeScenario};
pub use error::{Error, Result};
pub use linalg::{DensityMatrix, HermitianOperator, Spectrum, StateVector};
pub use models::{ModelInstance, ModelSpec};
pub use optimizer::{ControlProblem, OptimizationOutcome, QslEstimate, Scenario};
pub use propagator::{FidelityEvaluator, FidelityMode, Propagator, Tolerances, Trajectory};
pub use robustness::{NoiseConfig, NoiseReport};
