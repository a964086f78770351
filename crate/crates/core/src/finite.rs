//! Exact finite-population solver: enumerate the rational occupancy grid,
//! evaluate the optimal social cost at each point (coefficients plus a
//! discrete transport assignment), and pick the minimizer.

use nalgebra::{DMatrix, DVector};

use crate::coeffs::{assemble_psi, chi_at_zero, FiniteCoeffs};
use crate::error::FiniteError;
use crate::escape::assert_horizon;
use crate::grid::TimeGrid;
use crate::model::{ProblemSpec, SimplexVector};
use crate::ode::rk4_step;
use crate::transport::{discrete_ot, TransportPlan};

/// Default cap on the size of the enumerated occupancy grid.
pub const DEFAULT_ENUM_CAP: u128 = 200_000;

/// Result of the exhaustive search over the occupancy grid.
#[derive(Debug, Clone)]
pub struct FiniteSolution {
    pub p_opt: SimplexVector,
    /// Optimal agent-to-destination assignment.
    pub lambda: Vec<usize>,
    pub j_opt: f64,
    /// Every grid point with its cost, in enumeration order.
    pub cost_table: Vec<(SimplexVector, f64)>,
}

/// Number of compositions of `n` into `d` parts: `C(n+d-1, d-1)`.
pub fn composition_count(n: usize, d: usize) -> u128 {
    let mut result: u128 = 1;
    for k in 1..d {
        result = result.saturating_mul((n + k) as u128) / k as u128;
    }
    result
}

/// All occupancy fractions `(N_1/N, ..., N_D/N)` with `sum N_j = N`, in
/// lexicographic order.
pub fn enumerate_fractions(
    n_agents: usize,
    d: usize,
    cap: u128,
) -> Result<Vec<SimplexVector>, FiniteError> {
    let count = composition_count(n_agents, d);
    if count > cap {
        return Err(FiniteError::CapExceeded { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut counts = vec![0usize; d];
    fn recurse(
        counts: &mut Vec<usize>,
        level: usize,
        remaining: usize,
        n_agents: usize,
        out: &mut Vec<SimplexVector>,
    ) {
        if level == counts.len() - 1 {
            counts[level] = remaining;
            let v = DVector::from_fn(counts.len(), |j, _| counts[j] as f64 / n_agents as f64);
            out.push(SimplexVector::new(v).expect("compositions are on the simplex"));
            return;
        }
        for k in (0..=remaining).rev() {
            counts[level] = k;
            recurse(counts, level + 1, remaining - k, n_agents, out);
        }
    }
    recurse(&mut counts, 0, n_agents, n_agents, &mut out);
    Ok(out)
}

/// Squared distances from each initial state to each transport site
/// `beta_j(0)`.
fn site_costs(x0: &[DVector<f64>], sites: &DMatrix<f64>) -> DMatrix<f64> {
    let n_agents = x0.len();
    let d = sites.ncols();
    DMatrix::from_fn(n_agents, d, |i, j| (&x0[i] - sites.column(j)).norm_squared())
}

/// The optimal social cost at a fixed occupancy vector: all value-function
/// terms evaluated at `t = 0` plus half the optimal transport cost.
pub fn finite_cost(
    spec: &ProblemSpec,
    fc: &FiniteCoeffs,
    x0: &[DVector<f64>],
    p: &SimplexVector,
) -> Result<(f64, TransportPlan), FiniteError> {
    let n_agents = x0.len();
    assert_eq!(n_agents, fc.n_agents, "coefficients solved for a different N");
    let nf = n_agents as f64;
    let g = &fc.grids;
    let d = spec.num_destinations();

    let costs = site_costs(x0, g.sites());
    // C^N carries the 1/N averaging through the row marginals of the plan.
    let plan = discrete_ot(&costs, p.as_vector())?;
    let c_n = plan.value;

    let phi1 = g.phi1.first();
    let phi2 = g.phi2.first();
    let alpha0 = g.alpha.first();
    let beta0 = g.beta.first();
    let xbar = x0.iter().fold(DVector::zeros(spec.state_dim()), |acc, x| acc + x) / nf;

    let phi_eff = phi1 - phi2 / nf;
    let quad: f64 = x0.iter().map(|x| (&phi_eff * x).dot(x)).sum::<f64>() / (2.0 * nf);
    let mean_quad = 0.5 * (phi2 * &xbar).dot(&xbar);
    let alpha_term: f64 = (0..d - 1)
        .map(|j| p[j] * alpha0.column(j).dot(&xbar))
        .sum();
    let beta_norm: f64 = (0..d)
        .map(|j| p[j] * beta0.column(j).norm_squared())
        .sum();
    let second: f64 = x0.iter().map(|x| x.norm_squared()).sum::<f64>() / (2.0 * nf);
    let chi = chi_at_zero(g, p);

    let total = quad + mean_quad + 0.5 * c_n + alpha_term - 0.5 * beta_norm - second + chi;
    Ok((total, plan))
}

/// Options for [`solve_finite`].
#[derive(Debug, Clone)]
pub struct FiniteSolveOpts {
    pub enum_cap: u128,
    /// Skip the escape-time certificate (for instances already certified).
    pub skip_horizon_check: bool,
}

impl Default for FiniteSolveOpts {
    fn default() -> Self {
        Self {
            enum_cap: DEFAULT_ENUM_CAP,
            skip_horizon_check: false,
        }
    }
}

/// Exhaustive minimization of the social cost over the occupancy grid.
/// Ties break to the lexicographically smallest occupancy vector (the
/// enumeration order), and the assignment comes from the integral optimal
/// plan at the minimizer.
pub fn solve_finite(
    spec: &ProblemSpec,
    fc: &FiniteCoeffs,
    x0: &[DVector<f64>],
    opts: &FiniteSolveOpts,
) -> Result<FiniteSolution, FiniteError> {
    if !opts.skip_horizon_check {
        assert_horizon(spec)?;
    }
    let d = spec.num_destinations();
    let grid = enumerate_fractions(x0.len(), d, opts.enum_cap)?;
    let mut cost_table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, usize, TransportPlan)> = None;
    for (idx, p) in grid.iter().enumerate() {
        let (cost, plan) = finite_cost(spec, fc, x0, p)?;
        // strict comparison keeps the first (lexicographically smallest) tie
        if best.as_ref().map_or(true, |(b, _, _)| cost < *b) {
            best = Some((cost, idx, plan));
        }
        cost_table.push((p.clone(), cost));
    }
    let (j_opt, idx, plan) = best.expect("grid is nonempty");
    let lambda = plan
        .assignment
        .expect("occupancy grid points have integral marginals");
    Ok(FiniteSolution {
        p_opt: cost_table[idx].0.clone(),
        lambda,
        j_opt,
        cost_table,
    })
}

/// The optimal feedback control of one agent:
/// `u = -R_u^{-1} B^T [(phi1 - phi2/N) x + phi2 xbar + psi_j(t, P)]`.
pub fn finite_control(
    spec: &ProblemSpec,
    fc: &FiniteCoeffs,
    p: &SimplexVector,
    j: usize,
    x: &DVector<f64>,
    xbar: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let g = &fc.grids;
    let nf = fc.n_agents as f64;
    let phi1 = g.phi1.at(t);
    let phi2 = g.phi2.at(t);
    let psi = assemble_psi(g, p, j, t);
    let inner = (&phi1 - &phi2 / nf) * x + &phi2 * xbar + psi;
    let rhs = spec.b().transpose() * inner;
    -(spec
        .r_u()
        .clone()
        .cholesky()
        .expect("R_u is positive definite")
        .solve(&rhs))
}

/// Mean closed-loop dynamics under the exact strategy:
/// `dxbar/dt = [A - S(phi1 + (N-1)/N phi2)] xbar - S sum_j P_j psi_j`,
/// integrated forward on the coefficient grid.
pub fn finite_mean_ode(
    spec: &ProblemSpec,
    fc: &FiniteCoeffs,
    p: &SimplexVector,
    xbar0: DVector<f64>,
) -> TimeGrid<DVector<f64>> {
    let g = &fc.grids;
    let nf = fc.n_agents as f64;
    let s = spec.s();
    let a = spec.a();
    let d = spec.num_destinations();
    let steps = g.phi1.len() - 1;
    let h = g.horizon() / steps as f64;
    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(xbar0.clone());
    let mut state = xbar0;
    let mut f = |t: f64, y: &DVector<f64>| {
        let phi1 = g.phi1.at(t);
        let phi2 = g.phi2.at(t);
        let mut psi_mix = DVector::<f64>::zeros(spec.state_dim());
        for j in 0..d {
            psi_mix += assemble_psi(g, p, j, t) * p[j];
        }
        (a - s * (phi1 + phi2 * ((nf - 1.0) / nf))) * y - s * psi_mix
    };
    for i in 0..steps {
        state = rk4_step(&mut f, i as f64 * h, &state, h);
        nodes.push(state.clone());
    }
    TimeGrid::new(g.horizon(), nodes)
}
