use thiserror::Error;

/// Failures while integrating the backward coefficient systems.
#[derive(Debug, Clone, Error)]
pub enum CoeffsError {
    /// The Riccati solution crossed the blow-up threshold at backward time `t`,
    /// i.e. the horizon lies past the escape time.
    #[error("EscapeDetected: coefficient norm exceeded blow-up threshold at t = {t}")]
    EscapeDetected { t: f64 },
    /// The full-system oracle is restricted to small populations.
    #[error("SizeCapExceeded: full-system oracle needs N*n <= {cap}, got {requested}")]
    SizeCapExceeded { requested: usize, cap: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Failures of the escape-time analysis.
#[derive(Debug, Clone, Error)]
pub enum EscapeError {
    /// No real equilibrium of the algebraic Riccati equation with an
    /// invertible state block was found; callers fall back to scanning by
    /// direct integration.
    #[error("NoRealEquilibrium: no real invariant subspace yields an equilibrium")]
    NoRealEquilibrium,
    /// The configured horizon is not certified: `T >= escape_time`.
    #[error("HorizonInfeasible: T = {horizon} is not below escape time {escape_time}")]
    HorizonInfeasible { horizon: f64, escape_time: f64 },
}

/// Failures of the transport solvers.
#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("InfeasibleMarginals: column marginals sum to {sum}, expected 1")]
    InfeasibleMarginals { sum: f64 },
    /// The semi-discrete inner loop ran out of iterations; the best iterate
    /// (smallest marginal residual) is attached.
    #[error("MaxIterExceeded: residual {residual} after {iterations} iterations")]
    MaxIterExceeded {
        iterations: usize,
        residual: f64,
        best_g: Vec<f64>,
        best_value: f64,
    },
    #[error("unsupported state dimension {n} for quadrature (cap {cap})")]
    UnsupportedDimension { n: usize, cap: usize },
}

/// Failures of the exact finite-population solver.
#[derive(Debug, Clone, Error)]
pub enum FiniteError {
    #[error("CapExceeded: occupancy grid has {count} entries, cap is {cap}")]
    CapExceeded { count: u128, cap: u128 },
    #[error(transparent)]
    Escape(#[from] EscapeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Coeffs(#[from] CoeffsError),
}

/// Failures of the continuum solver.
#[derive(Debug, Clone, Error)]
pub enum ContinuumError {
    #[error("MaxOuterExceeded: no convergence after {iterations} outer iterations")]
    MaxOuterExceeded {
        iterations: usize,
        best_p: Vec<f64>,
        best_cost: f64,
    },
    #[error(transparent)]
    Escape(#[from] EscapeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Failures of the closed-loop simulator.
#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error(transparent)]
    Escape(#[from] EscapeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Finite(#[from] FiniteError),
    #[error(transparent)]
    Continuum(#[from] ContinuumError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
