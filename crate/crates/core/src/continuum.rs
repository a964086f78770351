//! Continuum strategy: the limiting cost `J(P)`, its subgradient, the
//! projected subgradient outer loop with the semi-discrete transport inner
//! loop, and the limiting control law and mean-field dynamics.

use nalgebra::{DMatrix, DVector};

use crate::coeffs::{assemble_psi, chi_at_zero, LimitCoeffs};
use crate::error::ContinuumError;
use crate::escape::assert_horizon;
use crate::grid::TimeGrid;
use crate::model::{ProblemSpec, SimplexVector};
use crate::ode::rk4_step;
use crate::transport::{
    project_simplex, solve_semidiscrete, PowerWeights, SemiDiscreteParams,
};

/// Coefficient on the dual weights in the subgradient of `J`. The transport
/// value enters `J` through `C(P)/2`, and the dual maximizer is a
/// subgradient of `C`, so its contribution to the subgradient of `J` is
/// `g*/2`; confirmed against finite differences by the acceptance suite.
pub const DEFAULT_KAPPA: f64 = 0.5;

/// Result of the projected subgradient minimization of `J` over the simplex.
#[derive(Debug, Clone)]
pub struct ContinuumSolution {
    pub p_star: SimplexVector,
    pub g_star: PowerWeights,
    pub j_star: f64,
    /// `(P_k, J(P_k))` per outer iteration, for diagnostics.
    pub iterates: Vec<(SimplexVector, f64)>,
}

/// Parameters of the outer projected subgradient loop.
#[derive(Debug, Clone)]
pub struct ContinuumParams {
    pub p0: Option<SimplexVector>,
    pub g0: Option<DVector<f64>>,
    /// Stopping threshold on the sup-norm change of the iterate.
    pub delta: f64,
    pub max_outer: usize,
    /// Subgradient coefficient on the dual weights (see [`DEFAULT_KAPPA`]).
    pub kappa: f64,
    pub inner: SemiDiscreteParams,
    pub skip_horizon_check: bool,
}

impl Default for ContinuumParams {
    fn default() -> Self {
        Self {
            p0: None,
            g0: None,
            delta: 5e-5,
            max_outer: 500,
            kappa: DEFAULT_KAPPA,
            inner: SemiDiscreteParams::default(),
            skip_horizon_check: false,
        }
    }
}

/// The limiting social cost `J(P)` given a precomputed transport value
/// `C(P)`. Splitting this out lets the outer loop reuse the inner solve.
pub fn limit_cost_with_transport(
    spec: &ProblemSpec,
    lc: &LimitCoeffs,
    p: &SimplexVector,
    transport_value: f64,
) -> f64 {
    let g = &lc.grids;
    let d = spec.num_destinations();
    let phi1 = g.phi1.first();
    let phi2 = g.phi2.first();
    let alpha0 = g.alpha.first();
    let beta0 = g.beta.first();
    let moments = spec.dist().moments(phi1);
    let xbar0 = &moments.mean;

    let quad = 0.5 * moments.quad;
    let mean_quad = 0.5 * (phi2 * xbar0).dot(xbar0);
    let alpha_term: f64 = (0..d - 1)
        .map(|j| p[j] * alpha0.column(j).dot(xbar0))
        .sum();
    let beta_norm: f64 = (0..d)
        .map(|j| p[j] * beta0.column(j).norm_squared())
        .sum();
    quad + mean_quad + 0.5 * transport_value + alpha_term - 0.5 * beta_norm
        - 0.5 * moments.second
        + chi_at_zero(g, p)
}

/// The limiting social cost `J(P)`; solves the semi-discrete transport
/// problem at `P` internally.
pub fn limit_cost(
    spec: &ProblemSpec,
    lc: &LimitCoeffs,
    p: &SimplexVector,
    inner: &SemiDiscreteParams,
) -> Result<f64, ContinuumError> {
    let (_, c_p) = solve_semidiscrete(spec.dist(), lc.grids.sites(), p, inner)?;
    Ok(limit_cost_with_transport(spec, lc, p, c_p))
}

/// Subgradient of `J` at `P`:
/// `kappa g* - sym(W_int) P + H`, where `g*` is the inner-loop maximizer at
/// `P` and `sym(W_int) = (W_int + W_int^T)/2` is the gradient action of the
/// integrated quadratic form (`W(t)` itself is not symmetric since the last
/// column of `alpha` vanishes).
pub fn subgradient(
    lc: &LimitCoeffs,
    p: &SimplexVector,
    g_star: &DVector<f64>,
    kappa: f64,
) -> DVector<f64> {
    let g = &lc.grids;
    let w_sym = (&g.w_int + g.w_int.transpose()) * 0.5;
    g_star * kappa - w_sym * p.as_vector() + &g.h
}

/// Projected subgradient minimization of `J` over the simplex with the
/// dynamic level-based step size: `s_k = (J(P_k) - J_lev) / |t_k|^2` with
/// `J_lev = J_best - delta_lev`, `t_k` the subgradient projected on the
/// simplex tangent (steps scale along the tangent only), and `delta_lev`
/// halved whenever an iteration fails to improve the best value. Returns the
/// best iterate, not the last.
pub fn solve_continuum(
    spec: &ProblemSpec,
    lc: &LimitCoeffs,
    params: &ContinuumParams,
) -> Result<ContinuumSolution, ContinuumError> {
    if !params.skip_horizon_check {
        assert_horizon(spec)?;
    }
    let d = spec.num_destinations();
    let sites = lc.grids.sites();
    let mut p = params
        .p0
        .clone()
        .unwrap_or_else(|| SimplexVector::uniform(d));
    if d == 1 {
        let mut inner = params.inner.clone();
        inner.g0 = params.g0.clone();
        let (weights, c_p) = solve_semidiscrete(spec.dist(), sites, &p, &inner)?;
        let j = limit_cost_with_transport(spec, lc, &p, c_p);
        return Ok(ContinuumSolution {
            p_star: p.clone(),
            g_star: weights,
            j_star: j,
            iterates: vec![(p, j)],
        });
    }

    let mut inner = params.inner.clone();
    inner.g0 = params.g0.clone();
    let mut best: Option<(f64, SimplexVector, PowerWeights)> = None;
    let mut delta_lev: Option<f64> = None;
    let mut iterates = Vec::new();

    for iter in 0..params.max_outer {
        let (weights, c_p) = solve_semidiscrete(spec.dist(), sites, &p, &inner)?;
        inner.g0 = Some(weights.g.clone()); // warm start the next inner solve
        let j_val = limit_cost_with_transport(spec, lc, &p, c_p);
        iterates.push((p.clone(), j_val));

        let improved = best.as_ref().map_or(true, |(b, _, _)| j_val < *b);
        if improved {
            best = Some((j_val, p.clone(), weights.clone()));
        }
        let (j_best, _, _) = best.as_ref().unwrap();
        let lev = delta_lev.get_or_insert(0.01 * j_val.abs().max(1e-9));
        if !improved {
            *lev = (*lev / 2.0).max(1e-10 * j_best.abs().max(1.0));
        }

        let sub = subgradient(lc, &p, &weights.g, params.kappa);
        let tangent = &sub - DVector::from_element(d, sub.sum() / d as f64);
        let norm2 = tangent.norm_squared();
        if norm2 <= 1e-30 {
            break;
        }
        let step = (j_val - (j_best - *lev)) / norm2;
        let next = project_simplex(&(p.as_vector() - tangent * step));
        let gap = (next.as_vector() - p.as_vector()).amax();
        p = next;
        if gap <= params.delta {
            break;
        }
        if iter + 1 == params.max_outer {
            let (j_best, p_best, _) = best.as_ref().unwrap();
            return Err(ContinuumError::MaxOuterExceeded {
                iterations: params.max_outer,
                best_p: p_best.as_slice().to_vec(),
                best_cost: *j_best,
            });
        }
    }

    let (j_star, p_star, g_star) = best.expect("at least one outer iteration ran");
    Ok(ContinuumSolution {
        p_star,
        g_star,
        j_star,
        iterates,
    })
}

/// The limiting control law
/// `u = -R_u^{-1} B^T [phi1 x + phi2 xbar(t) + psi_j(t, P)]`.
pub fn continuum_control(
    spec: &ProblemSpec,
    lc: &LimitCoeffs,
    p: &SimplexVector,
    j: usize,
    x: &DVector<f64>,
    xbar_t: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let g = &lc.grids;
    let phi1 = g.phi1.at(t);
    let phi2 = g.phi2.at(t);
    let psi = assemble_psi(g, p, j, t);
    let inner = phi1 * x + phi2 * xbar_t + psi;
    let rhs = spec.b().transpose() * inner;
    -(spec
        .r_u()
        .clone()
        .cholesky()
        .expect("R_u is positive definite")
        .solve(&rhs))
}

/// Deterministic mean-field path
/// `dxbar/dt = [A - S(phi1 + phi2)] xbar - S sum_j P_j psi_j`,
/// from `xbar(0) = ∫ x dP0`, forward RK4 on the coefficient grid.
pub fn mean_field_ode(
    spec: &ProblemSpec,
    lc: &LimitCoeffs,
    p: &SimplexVector,
) -> TimeGrid<DVector<f64>> {
    let g = &lc.grids;
    let s = spec.s();
    let a = spec.a();
    let d = spec.num_destinations();
    let n = spec.state_dim();
    let xbar0 = spec.dist().moments(&DMatrix::identity(n, n)).mean;
    let steps = g.phi1.len() - 1;
    let h = g.horizon() / steps as f64;
    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(xbar0.clone());
    let mut state = xbar0;
    let mut f = |t: f64, y: &DVector<f64>| {
        let phi1 = g.phi1.at(t);
        let phi2 = g.phi2.at(t);
        let mut psi_mix = DVector::<f64>::zeros(n);
        for j in 0..d {
            psi_mix += assemble_psi(g, p, j, t) * p[j];
        }
        (a - s * (phi1 + phi2)) * y - s * psi_mix
    };
    for i in 0..steps {
        state = rk4_step(&mut f, i as f64 * h, &state, h);
        nodes.push(state.clone());
    }
    TimeGrid::new(g.horizon(), nodes)
}
