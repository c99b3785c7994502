//! Minimum-divergence updating of probability models under expert views.
pub mod calibration;
pub mod constraints;
pub mod dist;
pub mod divergence;
pub mod error;
pub mod gaussian;
pub mod marginal;
pub mod payoff;
pub mod quadrature;
pub mod roots;
pub mod sweep;
pub mod tilt;
pub mod wls;

pub use constraints::{ConstraintSet, Sense};
pub use dist::{Density, DensityKind, Estimate, ExpectationEngine, Method, Prior, SampleCloud};
pub use error::{Error, Result};
pub use payoff::Payoff;
pub use tilt::{SolveReport, SolverOptions, Status, TiltedPosterior};
