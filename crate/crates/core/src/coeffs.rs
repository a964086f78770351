//! Backward coefficient ODE systems (finite-population and limiting), the
//! assembled affine offsets, the integrated quadratic form behind the
//! constant cost term, and a full-population oracle for cross-checks.
//!
//! The value function of the joint LQ problem decomposes into a diagonal
//! Riccati component `phi1`, an off-diagonal component `phi2`, per-destination
//! affine coefficients `alpha`/`beta`, and a scalar `chi` that is a quadratic
//! form of the occupancy vector. All systems integrate backward from the
//! horizon with fixed-step classic RK4; `phi1`/`phi2` are stored on a
//! half-step grid so the staged linear systems see Riccati values at their
//! RK4 midpoints without interpolation error.

use nalgebra::{DMatrix, DVector};

use crate::error::CoeffsError;
use crate::grid::TimeGrid;
use crate::linalg::{kron, symmetrize};
use crate::model::{ProblemSpec, SimplexVector};
use crate::ode::rk4_step;

/// Matrix max-norm beyond which backward integration reports numerical
/// escape. The determinant criterion in the escape module is the
/// authoritative horizon check; this is a guard.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Full-system oracle size cap on `N * n`.
pub const ORACLE_SIZE_CAP: usize = 12;

/// Recommended coefficient grid step.
pub fn default_dt(horizon: f64) -> f64 {
    horizon / 2000.0
}

/// Population-size coefficients entering the backward systems. The limiting
/// system is the `N -> infinity` member.
#[derive(Debug, Clone, Copy)]
struct PopulationWeights {
    /// `(N-1)/N` on `R_x` in the `phi1` equation and on `phi2 S` in the
    /// `alpha` equation; 1 in the limit.
    rx: f64,
    /// `(N-1)/N^2` on `[phi2]^2_S` in the `phi1` equation; 0 in the limit.
    phi2_sq_diag: f64,
    /// `(N-2)/N` on `[phi2]^2_S` in the `phi2` equation; 1 in the limit.
    phi2_sq_off: f64,
    /// `1/N` on `phi2 S` in the `beta` equation; 0 in the limit.
    inv_n: f64,
}

impl PopulationWeights {
    fn finite(n_agents: usize) -> Self {
        let nf = n_agents as f64;
        Self {
            rx: (nf - 1.0) / nf,
            phi2_sq_diag: (nf - 1.0) / (nf * nf),
            phi2_sq_off: (nf - 2.0) / nf,
            inv_n: 1.0 / nf,
        }
    }

    fn limit() -> Self {
        Self {
            rx: 1.0,
            phi2_sq_diag: 0.0,
            phi2_sq_off: 1.0,
            inv_n: 0.0,
        }
    }
}

/// Time-grid-sampled solution of one backward coefficient system, plus the
/// integrated quantities consumed by the cost and subgradient formulas.
#[derive(Debug, Clone)]
pub struct CoeffGrids {
    /// Diagonal Riccati component, n x n per node.
    pub phi1: TimeGrid<DMatrix<f64>>,
    /// Off-diagonal Riccati component, n x n per node.
    pub phi2: TimeGrid<DMatrix<f64>>,
    /// Affine coefficients on the occupancy vector, n x D per node; column D
    /// is identically zero.
    pub alpha: TimeGrid<DMatrix<f64>>,
    /// Per-destination offsets, n x D per node.
    pub beta: TimeGrid<DMatrix<f64>>,
    /// `W(t) = (alpha/2 - beta)^T S alpha`, D x D per node.
    pub w: TimeGrid<DMatrix<f64>>,
    /// `W_int = 2 * integral of W over [0, T]` (trapezoid).
    pub w_int: DMatrix<f64>,
    /// Subgradient offset vector `H`.
    pub h: DVector<f64>,
    /// `integral of ([beta_j]^2_S - [d_j]^2_{R_d})` per destination.
    pub beta_s_int: DVector<f64>,
    /// `[d_j]^2_M` per destination.
    pub chi_terminal: DVector<f64>,
    /// Half-step samples of `(phi1, phi2)` used by staged integrations.
    phi_half: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    horizon: f64,
}

impl CoeffGrids {
    /// `beta_j(0)` columns as an n x D matrix: the transport sites.
    pub fn sites(&self) -> &DMatrix<f64> {
        self.beta.first()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `(phi1, phi2)` sampled on the internal half-step grid; exact at half
    /// nodes, piecewise linear in between. The staged integrations and their
    /// test oracles read the Riccati components through this.
    pub fn phi_at(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let steps2 = self.phi_half.len() - 1;
        let h2 = self.horizon / steps2 as f64;
        let pos = t.clamp(0.0, self.horizon) / h2;
        let i = (pos.floor() as usize).min(steps2 - 1);
        let w = pos - i as f64;
        let (a0, b0) = &self.phi_half[i];
        if w <= 1e-12 {
            (a0.clone(), b0.clone())
        } else {
            let (a1, b1) = &self.phi_half[i + 1];
            (a0 * (1.0 - w) + a1 * w, b0 * (1.0 - w) + b1 * w)
        }
    }
}

/// Coefficients of the limiting system.
#[derive(Debug, Clone)]
pub struct LimitCoeffs {
    pub grids: CoeffGrids,
}

/// Coefficients of the finite-population system.
#[derive(Debug, Clone)]
pub struct FiniteCoeffs {
    pub n_agents: usize,
    pub grids: CoeffGrids,
}

fn riccati_rhs(
    spec: &ProblemSpec,
    wts: &PopulationWeights,
    phi1: &DMatrix<f64>,
    phi2: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = spec.s();
    let a = spec.a();
    let sp1 = s * phi1;
    let sp2 = s * phi2;
    let mut d1 = phi1.transpose() * &sp1 - phi1 * a - a.transpose() * phi1 - spec.r_d()
        + spec.r_x() * wts.rx;
    if wts.phi2_sq_diag != 0.0 {
        d1 += phi2.transpose() * &sp2 * wts.phi2_sq_diag;
    }
    let mut d2 = phi1.transpose() * &sp2 + phi2.transpose() * &sp1 - phi2 * a
        - a.transpose() * phi2
        - spec.r_x();
    if wts.phi2_sq_off != 0.0 {
        d2 += phi2.transpose() * &sp2 * wts.phi2_sq_off;
    }
    (d1, d2)
}

/// Backward-integrates `(phi1, phi2)` on the half-step grid, symmetrizing
/// after every step. Returns samples indexed 0 ..= 2*steps.
fn solve_phi(
    spec: &ProblemSpec,
    wts: &PopulationWeights,
    steps: usize,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>, CoeffsError> {
    let n = spec.state_dim();
    let horizon = spec.horizon();
    let h = horizon / (2 * steps) as f64;
    let mut nodes = vec![(DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)); 2 * steps + 1];
    let mut state = (spec.m_t().clone(), DMatrix::<f64>::zeros(n, n));
    nodes[2 * steps] = state.clone();
    let mut f = |_t: f64, y: &(DMatrix<f64>, DMatrix<f64>)| riccati_rhs(spec, wts, &y.0, &y.1);
    for i in (0..2 * steps).rev() {
        let t = (i + 1) as f64 * h;
        state = rk4_step(&mut f, t, &state, -h);
        symmetrize(&mut state.0);
        symmetrize(&mut state.1);
        let norm = state
            .0
            .iter()
            .chain(state.1.iter())
            .map(|x| x.abs())
            .fold(0.0f64, f64::max);
        if !norm.is_finite() || norm > BLOWUP_THRESHOLD {
            return Err(CoeffsError::EscapeDetected { t: i as f64 * h });
        }
        nodes[i] = state.clone();
    }
    Ok(nodes)
}

fn solve_system(
    spec: &ProblemSpec,
    wts: PopulationWeights,
    dt: f64,
) -> Result<CoeffGrids, CoeffsError> {
    if !(dt > 0.0) {
        return Err(CoeffsError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let horizon = spec.horizon();
    let steps = ((horizon / dt).round() as usize).max(1);
    let n = spec.state_dim();
    let d = spec.num_destinations();
    let s = spec.s();
    let a_t = spec.a().transpose();
    let dests = spec.destination_matrix();
    let rd_dests = spec.r_d() * &dests;

    let phi_half = solve_phi(spec, &wts, steps)?;

    // beta and alpha, integrated jointly; the alpha equation reads beta at
    // the RK4 stage values, keeping fourth order.
    let h = horizon / steps as f64;
    let ones_row = DMatrix::<f64>::from_element(1, d, 1.0);
    let mut beta_nodes = vec![DMatrix::<f64>::zeros(0, 0); steps + 1];
    let mut alpha_nodes = vec![DMatrix::<f64>::zeros(0, 0); steps + 1];
    let mut state = (spec.m_t() * &dests, DMatrix::<f64>::zeros(n, d));
    beta_nodes[steps] = state.0.clone();
    alpha_nodes[steps] = state.1.clone();
    for i in (0..steps).rev() {
        // stage offsets 0, 1, 2 on the half grid for times t, t - h/2, t - h
        let base = 2 * i;
        let mut stage = 0usize;
        let mut f = |_t: f64, y: &(DMatrix<f64>, DMatrix<f64>)| {
            let idx = match stage {
                0 => base + 2,
                1 | 2 => base + 1,
                _ => base,
            };
            stage += 1;
            let (phi1, phi2) = &phi_half[idx];
            let p1s = phi1 * s;
            let p2s = phi2 * s;
            let (beta, alpha) = y;
            let beta_last = beta.column(d - 1);
            let m_beta = &p1s - &a_t - &p2s * wts.inv_n;
            let dbeta = &m_beta * beta + (&p2s * beta_last) * &ones_row - &rd_dests;
            let m_alpha = &p1s - &a_t + &p2s * wts.rx;
            let mut dalpha = &m_alpha * alpha - &p2s * (beta - beta_last * &ones_row);
            dalpha.column_mut(d - 1).fill(0.0);
            (dbeta, dalpha)
        };
        let t = (i + 1) as f64 * h;
        state = rk4_step(&mut f, t, &state, -h);
        state.1.column_mut(d - 1).fill(0.0);
        beta_nodes[i] = state.0.clone();
        alpha_nodes[i] = state.1.clone();
    }

    // W pointwise, then the trapezoid quadratures.
    let w_nodes: Vec<DMatrix<f64>> = (0..=steps)
        .map(|i| (&alpha_nodes[i] * 0.5 - &beta_nodes[i]).transpose() * s * &alpha_nodes[i])
        .collect();
    let mut w_half = DMatrix::<f64>::zeros(d, d);
    for i in 0..steps {
        w_half += (&w_nodes[i] + &w_nodes[i + 1]) * 0.5;
    }
    w_half *= h;

    let mut beta_s_int = DVector::<f64>::zeros(d);
    for j in 0..d {
        let dj = dests.column(j);
        let stress = (spec.r_d() * dj).dot(&dj);
        let vals: Vec<f64> = (0..=steps)
            .map(|i| {
                let bj = beta_nodes[i].column(j);
                (s * bj).dot(&bj) - stress
            })
            .collect();
        beta_s_int[j] = vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() * h;
    }

    let chi_terminal = DVector::from_fn(d, |j, _| {
        let dj = dests.column(j);
        (spec.m_t() * dj).dot(&dj)
    });

    let mean0 = spec.dist().moments(&DMatrix::identity(n, n)).mean;
    let h_vec = DVector::from_fn(d, |j, _| {
        let beta0_j = beta_nodes[0].column(j);
        -0.5 * beta_s_int[j]
            + alpha_nodes[0].column(j).dot(&mean0)
            + 0.5 * (chi_terminal[j] - beta0_j.norm_squared())
    });

    let phi1_nodes: Vec<DMatrix<f64>> = (0..=steps).map(|i| phi_half[2 * i].0.clone()).collect();
    let phi2_nodes: Vec<DMatrix<f64>> = (0..=steps).map(|i| phi_half[2 * i].1.clone()).collect();

    Ok(CoeffGrids {
        phi1: TimeGrid::new(horizon, phi1_nodes),
        phi2: TimeGrid::new(horizon, phi2_nodes),
        alpha: TimeGrid::new(horizon, alpha_nodes),
        beta: TimeGrid::new(horizon, beta_nodes),
        w: TimeGrid::new(horizon, w_nodes),
        w_int: w_half * 2.0,
        h: h_vec,
        beta_s_int,
        chi_terminal,
        phi_half,
        horizon,
    })
}

/// Solves the limiting coefficient system on a grid of step `dt`.
pub fn solve_limit_coeffs(spec: &ProblemSpec, dt: f64) -> Result<LimitCoeffs, CoeffsError> {
    Ok(LimitCoeffs {
        grids: solve_system(spec, PopulationWeights::limit(), dt)?,
    })
}

/// Solves the finite-population coefficient system for `n_agents` on a grid
/// of step `dt`. `n_agents = 1` follows the convention that the `(N-1)/N`
/// terms vanish and `1/N = 1`.
pub fn solve_finite_coeffs(
    spec: &ProblemSpec,
    n_agents: usize,
    dt: f64,
) -> Result<FiniteCoeffs, CoeffsError> {
    if n_agents == 0 {
        return Err(CoeffsError::InvalidArgument("population size must be positive".into()));
    }
    Ok(FiniteCoeffs {
        n_agents,
        grids: solve_system(spec, PopulationWeights::finite(n_agents), dt)?,
    })
}

/// The affine offset `psi_j(t, P) = sum_{k<D} P_k alpha_k(t) - beta_j(t)`.
pub fn assemble_psi(grids: &CoeffGrids, p: &SimplexVector, j: usize, t: f64) -> DVector<f64> {
    assert!(j < grids.beta.first().ncols(), "destination index out of range");
    let alpha_t = grids.alpha.at(t);
    let beta_t = grids.beta.at(t);
    &alpha_t * p.as_vector() - beta_t.column(j)
}

/// `chi(0, P)`: terminal value minus the integrated quadratic and linear
/// running terms (trapezoid on the coefficient grid).
pub fn chi_at_zero(grids: &CoeffGrids, p: &SimplexVector) -> f64 {
    let pv = p.as_vector();
    let chi_t = 0.5 * grids.chi_terminal.dot(pv);
    let quad = (&grids.w_int * pv).dot(pv) * 0.5;
    let lin = 0.5 * grids.beta_s_int.dot(pv);
    chi_t - quad - lin
}

/// Value of the full joint problem at `t = 0` computed from the
/// un-decomposed `Nn`-dimensional systems. Test oracle for the decomposed
/// path; capped at `N*n <= 12`.
#[derive(Debug, Clone)]
pub struct FullSystemValue {
    pub cost: f64,
    pub quadratic_term: f64,
    pub linear_term: f64,
    pub constant_term: f64,
    /// `phi^N(0)`, for block-structure checks.
    pub phi0: DMatrix<f64>,
    pub psi0: DVector<f64>,
}

/// Integrates the full `Nn`-dimensional Riccati system for a fixed
/// agent-to-destination assignment and evaluates the value function at the
/// given initial states.
pub fn full_system_oracle(
    spec: &ProblemSpec,
    assignment: &[usize],
    x0: &[DVector<f64>],
    dt: f64,
) -> Result<FullSystemValue, CoeffsError> {
    let n = spec.state_dim();
    let n_agents = x0.len();
    if n_agents == 0 || assignment.len() != n_agents {
        return Err(CoeffsError::InvalidArgument(
            "assignment and initial states must be nonempty and equal length".into(),
        ));
    }
    if n_agents * n > ORACLE_SIZE_CAP {
        return Err(CoeffsError::SizeCapExceeded {
            requested: n_agents * n,
            cap: ORACLE_SIZE_CAP,
        });
    }
    if let Some(&j) = assignment.iter().find(|&&j| j >= spec.num_destinations()) {
        return Err(CoeffsError::InvalidArgument(format!("destination index {j} out of range")));
    }

    let nf = n_agents as f64;
    let id_n = DMatrix::<f64>::identity(n_agents, n_agents);
    let ones = DMatrix::<f64>::from_element(n_agents, n_agents, 1.0 / nf);
    let q_full = kron(&id_n, &spec.q_limit()) + kron(&ones, spec.r_x());
    let s_full = kron(&id_n, spec.s());
    let a_full = kron(&id_n, spec.a());
    let m_full = kron(&id_n, spec.m_t());
    let rd_full = kron(&id_n, spec.r_d());
    let mut d_stack = DVector::<f64>::zeros(n_agents * n);
    for (i, &j) in assignment.iter().enumerate() {
        d_stack.rows_mut(i * n, n).copy_from(spec.destination(j));
    }

    let horizon = spec.horizon();
    let steps = ((horizon / dt).round() as usize).max(1);
    let h = horizon / steps as f64;
    let stress = (&rd_full * &d_stack).dot(&d_stack);

    let mut state = (
        m_full.clone(),
        -(&m_full * &d_stack),
        (&m_full * &d_stack).dot(&d_stack) / (2.0 * nf),
    );
    let a_full_t = a_full.transpose();
    let mut f = |_t: f64, y: &(DMatrix<f64>, DVector<f64>, f64)| {
        let (phi, psi, _chi) = y;
        let sp = &s_full * phi;
        let dphi = phi.transpose() * &sp - phi * &a_full - &a_full_t * phi - &q_full;
        let dpsi = (phi * &s_full - &a_full_t) * psi + &rd_full * &d_stack;
        let dchi = ((&s_full * psi).dot(psi) - stress) / (2.0 * nf);
        (dphi, dpsi, dchi)
    };
    for i in (0..steps).rev() {
        let t = (i + 1) as f64 * h;
        state = rk4_step(&mut f, t, &state, -h);
        symmetrize(&mut state.0);
        let norm = state.0.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
        if !norm.is_finite() || norm > BLOWUP_THRESHOLD {
            return Err(CoeffsError::EscapeDetected { t: i as f64 * h });
        }
    }

    let mut x_stack = DVector::<f64>::zeros(n_agents * n);
    for (i, x) in x0.iter().enumerate() {
        x_stack.rows_mut(i * n, n).copy_from(x);
    }
    let quadratic_term = (&state.0 * &x_stack).dot(&x_stack) / (2.0 * nf);
    let linear_term = state.1.dot(&x_stack) / nf;
    let constant_term = state.2;
    Ok(FullSystemValue {
        cost: quadratic_term + linear_term + constant_term,
        quadratic_term,
        linear_term,
        constant_term,
        phi0: state.0,
        psi0: state.1,
    })
}
