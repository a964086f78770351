//! Solver and simulation toolkit for the linear-quadratic collective
//! destination-choice problem under congestion.
//!
//! A population of agents with linear dynamics spreads over a compact region
//! and must reach one of `D` destinations by a horizon `T`, minimizing a
//! common social cost that rewards spreading out (congestion avoidance) and
//! penalizes distance to the chosen destination, control effort, and the
//! terminal miss. The toolkit provides:
//!
//! - the exact finite-population social optimum via backward coefficient
//!   ODEs, a discrete optimal-transport assignment, and exhaustive search
//!   over the rational occupancy grid ([`finite`]);
//! - the asymptotically optimal continuum strategy via the limiting
//!   coefficient system, semi-discrete optimal transport over power
//!   diagrams, and a projected subgradient method ([`continuum`],
//!   [`transport`]);
//! - escape-time certification of the indefinite Riccati equation that
//!   underlies both ([`escape`]);
//! - closed-loop trajectory simulation and realized-cost evaluation for
//!   either strategy ([`sim`]).

pub mod coeffs;
pub mod continuum;
pub mod error;
pub mod escape;
pub mod finite;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod sim;
#[cfg(test)]
pub(crate) mod testutil;
pub mod transport;

pub use coeffs::{FiniteCoeffs, LimitCoeffs};
pub use error::{
    CoeffsError, ContinuumError, EscapeError, FiniteError, SimError, TransportError,
};
pub use escape::EscapeReport;
pub use model::{InitialDistribution, ProblemSpec, SimplexVector, ValidationReport};
pub use transport::TransportPlan;
