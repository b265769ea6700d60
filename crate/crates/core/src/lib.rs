//! Radially symmetric normal solutions of Δ²u = K(|x|) e^{4u} on ℝ⁴.
//!
//! A normal solution is written as a logarithmic potential of its own
//! curvature measure plus a constant. The crate discretizes that integral
//! equation on a graded radial grid, solves it with bordered Newton, and
//! checks the results against an independent ODE shooting integrator.

pub mod curvature;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod kernel;
pub mod numerics;
pub mod oracle;
pub mod radial;
pub mod solver;
pub mod tail;

pub use curvature::{thresholds_for, CurvatureKind, CurvatureProfile, Thresholds};
pub use error::{Error, Result};
pub use kernel::Gauge;
pub use radial::{GridSpec, QuadratureRule, RadialField, RadialGrid};

pub use solver::{Constraint, SolutionRecord, SolveSpec};
pub use tail::{LogTail, TailShape};
