//! Closed-loop simulation of finite populations under the exact or the
//! continuum strategy, realized-cost evaluation, and the strategy-comparison
//! experiment.

use nalgebra::{DMatrix, DVector};

use crate::coeffs::{assemble_psi, FiniteCoeffs, LimitCoeffs};
use crate::continuum::{mean_field_ode, ContinuumSolution};
use crate::error::SimError;
use crate::finite::{finite_cost, FiniteSolution};
use crate::model::{ProblemSpec, SimplexVector};
use crate::ode::rk4_step;
use crate::transport::{assign_destination, solve_semidiscrete, SemiDiscreteParams};

/// Closed-loop trajectories of one finite population.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub times: Vec<f64>,
    /// `states[i][k]`: state of agent `i` at node `k`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// `controls[i][k]`: control of agent `i` at node `k`.
    pub controls: Vec<Vec<DVector<f64>>>,
    /// Empirical mean of the states per node.
    pub mean_path: Vec<DVector<f64>>,
    pub assignments: Vec<usize>,
    /// Realized social cost of the bundle (trapezoid in time).
    pub realized_cost: f64,
}

/// Which control law the population deploys.
#[derive(Clone, Copy)]
pub enum Strategy<'a> {
    /// The exact strategy at the computed optimum: every agent tracks the
    /// coupled empirical mean.
    Finite(&'a FiniteSolution, &'a FiniteCoeffs),
    /// The continuum strategy at its optimizer.
    Continuum(&'a ContinuumSolution, &'a LimitCoeffs),
    /// The continuum control law at an arbitrary occupancy vector with
    /// precomputed dual weights.
    ContinuumAt {
        p: &'a SimplexVector,
        g: &'a DVector<f64>,
        coeffs: &'a LimitCoeffs,
    },
}

/// Occupancy fractions realized by a finite population using the power
/// cells: entries are multiples of `1/N`.
#[derive(Debug, Clone)]
pub struct OccupancyVector {
    pub f: SimplexVector,
}

/// Fraction of agents in each power cell at time zero.
pub fn occupancy(
    x0: &[DVector<f64>],
    sites: &DMatrix<f64>,
    g: &DVector<f64>,
) -> OccupancyVector {
    let d = sites.ncols();
    let mut counts = vec![0usize; d];
    for x in x0 {
        counts[assign_destination(sites, g, x)] += 1;
    }
    let n = x0.len() as f64;
    let f = DVector::from_fn(d, |j, _| counts[j] as f64 / n);
    OccupancyVector {
        f: SimplexVector::new(f).expect("counts lie on the rational simplex"),
    }
}

/// `R_u^{-1} B^T`
fn gain(spec: &ProblemSpec) -> DMatrix<f64> {
    spec.r_u()
        .clone()
        .cholesky()
        .expect("R_u is positive definite")
        .solve(&spec.b().transpose())
}

/// Simulates the closed loop forward from the given initial states with
/// fixed-step RK4 of step `dt_fwd`, recording states and controls at every
/// node. The finite strategy integrates all agents jointly (the empirical
/// mean couples them); the continuum strategy drives each agent with the
/// precomputed deterministic mean path.
pub fn simulate(
    spec: &ProblemSpec,
    x0: &[DVector<f64>],
    strategy: Strategy<'_>,
    dt_fwd: f64,
) -> Result<TrajectoryBundle, SimError> {
    if x0.is_empty() {
        return Err(SimError::InvalidArgument("need at least one agent".into()));
    }
    let horizon = spec.horizon();
    let steps = ((horizon / dt_fwd).round() as usize).max(1);
    let h = horizon / steps as f64;
    let n = spec.state_dim();
    let n_agents = x0.len();
    let k_gain = gain(spec);
    let a = spec.a();
    let s = spec.s();

    // per-strategy data
    enum Mode<'a> {
        Finite {
            p: &'a SimplexVector,
            coeffs: &'a FiniteCoeffs,
        },
        Continuum {
            p: SimplexVector,
            coeffs: &'a LimitCoeffs,
            xbar: crate::grid::TimeGrid<DVector<f64>>,
        },
    }
    let (mode, assignments): (Mode<'_>, Vec<usize>) = match strategy {
        Strategy::Finite(solution, coeffs) => {
            if solution.lambda.len() != n_agents {
                return Err(SimError::InvalidArgument(format!(
                    "finite solution assigns {} agents, got {n_agents}",
                    solution.lambda.len()
                )));
            }
            (
                Mode::Finite {
                    p: &solution.p_opt,
                    coeffs,
                },
                solution.lambda.clone(),
            )
        }
        Strategy::Continuum(solution, coeffs) => {
            let assignments: Vec<usize> = x0
                .iter()
                .map(|x| assign_destination(coeffs.grids.sites(), &solution.g_star.g, x))
                .collect();
            let xbar = mean_field_ode(spec, coeffs, &solution.p_star);
            (
                Mode::Continuum {
                    p: solution.p_star.clone(),
                    coeffs,
                    xbar,
                },
                assignments,
            )
        }
        Strategy::ContinuumAt { p, g, coeffs } => {
            let assignments: Vec<usize> = x0
                .iter()
                .map(|x| assign_destination(coeffs.grids.sites(), g, x))
                .collect();
            let xbar = mean_field_ode(spec, coeffs, p);
            (
                Mode::Continuum {
                    p: p.clone(),
                    coeffs,
                    xbar,
                },
                assignments,
            )
        }
    };

    // feedback argument phi x_i + phi2 xbar + psi_{lambda_i} of every agent,
    // stacked as columns; the control is -R_u^{-1} B^T times this, and the
    // drift is A x - S times this
    let inner_matrix = |t: f64, states: &DMatrix<f64>| -> DMatrix<f64> {
        let mut inner = DMatrix::<f64>::zeros(n, n_agents);
        let (g, p, phi_eff, phi2_xbar) = match &mode {
            Mode::Finite { p, coeffs } => {
                let g = &coeffs.grids;
                let nf = coeffs.n_agents as f64;
                let phi2 = g.phi2.at(t);
                let xbar = states.column_sum() / n_agents as f64;
                (g, *p, g.phi1.at(t) - &phi2 / nf, &phi2 * xbar)
            }
            Mode::Continuum { p, coeffs, xbar } => {
                let g = &coeffs.grids;
                let phi2 = g.phi2.at(t);
                (g, p, g.phi1.at(t), phi2 * xbar.at(t))
            }
        };
        let psi: Vec<DVector<f64>> = (0..spec.num_destinations())
            .map(|j| assemble_psi(g, p, j, t))
            .collect();
        for i in 0..n_agents {
            let col = &phi_eff * states.column(i) + &phi2_xbar + &psi[assignments[i]];
            inner.set_column(i, &col);
        }
        inner
    };

    let mut state = DMatrix::<f64>::zeros(n, n_agents);
    for (i, x) in x0.iter().enumerate() {
        state.set_column(i, x);
    }

    let mut times = Vec::with_capacity(steps + 1);
    let mut states: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(steps + 1); n_agents];
    let mut controls: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(steps + 1); n_agents];
    let mut mean_path = Vec::with_capacity(steps + 1);

    let record =
        |t: f64,
         state: &DMatrix<f64>,
         times: &mut Vec<f64>,
         states: &mut Vec<Vec<DVector<f64>>>,
         controls: &mut Vec<Vec<DVector<f64>>>,
         mean_path: &mut Vec<DVector<f64>>| {
            let u = -(&k_gain * inner_matrix(t, state));
            times.push(t);
            for i in 0..n_agents {
                states[i].push(state.column(i).into_owned());
                controls[i].push(u.column(i).into_owned());
            }
            mean_path.push(state.column_sum() / n_agents as f64);
        };

    record(0.0, &state, &mut times, &mut states, &mut controls, &mut mean_path);
    // dx = A x + B u with B R_u^{-1} B^T collapsing to S
    let mut rhs = |t: f64, y: &DMatrix<f64>| a * y - s * inner_matrix(t, y);
    for k in 0..steps {
        state = rk4_step(&mut rhs, k as f64 * h, &state, h);
        record(
            (k + 1) as f64 * h,
            &state,
            &mut times,
            &mut states,
            &mut controls,
            &mut mean_path,
        );
    }

    let mut bundle = TrajectoryBundle {
        times,
        states,
        controls,
        mean_path,
        assignments,
        realized_cost: f64::NAN,
    };
    bundle.realized_cost = realized_social_cost(spec, &bundle);
    Ok(bundle)
}

/// Average realized individual cost of a bundle: running congestion, stress
/// and control terms by trapezoid over the stored nodes (using the bundle's
/// own empirical mean), plus the exact terminal term.
pub fn realized_social_cost(spec: &ProblemSpec, bundle: &TrajectoryBundle) -> f64 {
    let n_agents = bundle.states.len();
    let count = bundle.times.len();
    let mut total = 0.0;
    for i in 0..n_agents {
        let dest = spec.destination(bundle.assignments[i]);
        let running: Vec<f64> = (0..count)
            .map(|k| {
                let x = &bundle.states[i][k];
                let u = &bundle.controls[i][k];
                let dx = x - &bundle.mean_path[k];
                let dd = x - dest;
                0.5 * (-(spec.r_x() * &dx).dot(&dx)
                    + (spec.r_d() * &dd).dot(&dd)
                    + (spec.r_u() * u).dot(u))
            })
            .collect();
        let mut integral = 0.0;
        for k in 0..count - 1 {
            integral +=
                0.5 * (running[k] + running[k + 1]) * (bundle.times[k + 1] - bundle.times[k]);
        }
        let xt = &bundle.states[i][count - 1] - dest;
        total += integral + 0.5 * (spec.m_t() * &xt).dot(&xt);
    }
    total / n_agents as f64
}

/// One row of the strategy-comparison experiment.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub n_agents: usize,
    pub seed: u64,
    /// Grid occupancy vector the continuum strategy was evaluated at.
    pub p: Vec<f64>,
    /// Nearest rational occupancy point used for the exact cost.
    pub p_snapped: Vec<f64>,
    /// Realized cell occupancy of the sampled population.
    pub f_n: Vec<f64>,
    pub j_limit: f64,
    pub j_finite: f64,
    pub j_tilde: f64,
}

/// Seed-aggregated statistics at one grid point.
#[derive(Debug, Clone)]
pub struct ComparisonAggregate {
    pub n_agents: usize,
    pub p: Vec<f64>,
    pub j_limit: f64,
    pub j_finite_mean: f64,
    pub j_finite_std: f64,
    pub j_tilde_mean: f64,
    pub j_tilde_std: f64,
    pub f_n_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub aggregates: Vec<ComparisonAggregate>,
}

/// Sweep parameters for [`comparison_experiment`].
#[derive(Debug, Clone)]
pub struct ComparisonParams {
    pub n_list: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Step of the occupancy grid along the first destination (two
    /// destinations only).
    pub p_grid_step: f64,
    pub dt: f64,
    pub inner: SemiDiscreteParams,
}

/// Evaluates, on a one-dimensional occupancy grid, the exact cost at the
/// nearest rational point, the realized cost of the continuum strategy, and
/// the limiting cost, over populations and seeds; aggregates means and
/// standard deviations per grid point.
pub fn comparison_experiment(
    spec: &ProblemSpec,
    lc: &LimitCoeffs,
    params: &ComparisonParams,
) -> Result<ComparisonTable, SimError> {
    let d = spec.num_destinations();
    if d != 2 {
        return Err(SimError::InvalidArgument(
            "the occupancy sweep is defined for exactly two destinations".into(),
        ));
    }
    let steps = (1.0 / params.p_grid_step).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| k as f64 * params.p_grid_step).collect();

    // dual weights per grid point, warm-started along the sweep;
    // independent of N and seed
    let sites = lc.grids.sites();
    let mut weights: Vec<(SimplexVector, DVector<f64>, f64)> = Vec::with_capacity(grid.len());
    let mut inner = params.inner.clone();
    for &p1 in &grid {
        let p = SimplexVector::new(DVector::from_column_slice(&[p1, 1.0 - p1]))
            .expect("grid point is on the simplex");
        let (w, c_p) = solve_semidiscrete(spec.dist(), sites, &p, &inner)?;
        inner.g0 = Some(w.g.clone());
        weights.push((p, w.g, c_p));
    }

    let mut rows = Vec::new();
    for &n_agents in &params.n_list {
        let fc = crate::coeffs::solve_finite_coeffs(spec, n_agents, params.dt)
            .map_err(crate::error::FiniteError::from)?;
        for &seed in &params.seeds {
            let x0 = spec.dist().sample(n_agents, seed);
            for (p, g_star, c_p) in &weights {
                let j_limit = crate::continuum::limit_cost_with_transport(spec, lc, p, *c_p);
                // nearest rational occupancy point
                let k = (p[0] * n_agents as f64).round();
                let snapped = SimplexVector::new(DVector::from_column_slice(&[
                    k / n_agents as f64,
                    1.0 - k / n_agents as f64,
                ]))
                .expect("snapped point is on the simplex");
                let (j_finite, _) = finite_cost(spec, &fc, &x0, &snapped)?;
                let bundle = simulate(
                    spec,
                    &x0,
                    Strategy::ContinuumAt {
                        p,
                        g: g_star,
                        coeffs: lc,
                    },
                    params.dt,
                )?;
                let f_n = occupancy(&x0, sites, g_star);
                rows.push(ComparisonRow {
                    n_agents,
                    seed,
                    p: p.as_slice().to_vec(),
                    p_snapped: snapped.as_slice().to_vec(),
                    f_n: f_n.f.as_slice().to_vec(),
                    j_limit,
                    j_finite,
                    j_tilde: bundle.realized_cost,
                });
            }
        }
    }

    // aggregate over seeds per (N, grid point)
    let mut aggregates = Vec::new();
    for &n_agents in &params.n_list {
        for (gi, (p, _, _)) in weights.iter().enumerate() {
            let group: Vec<&ComparisonRow> = rows
                .iter()
                .filter(|r| r.n_agents == n_agents && r.p[0] == grid[gi])
                .collect();
            if group.is_empty() {
                continue;
            }
            let count = group.len() as f64;
            let mean = |f: &dyn Fn(&ComparisonRow) -> f64| -> f64 {
                group.iter().map(|r| f(r)).sum::<f64>() / count
            };
            let std = |f: &dyn Fn(&ComparisonRow) -> f64, mu: f64| -> f64 {
                (group.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / count).sqrt()
            };
            let j_finite_mean = mean(&|r| r.j_finite);
            let j_tilde_mean = mean(&|r| r.j_tilde);
            let f_n_mean = (0..2)
                .map(|j| group.iter().map(|r| r.f_n[j]).sum::<f64>() / count)
                .collect();
            aggregates.push(ComparisonAggregate {
                n_agents,
                p: p.as_slice().to_vec(),
                j_limit: group[0].j_limit,
                j_finite_mean,
                j_finite_std: std(&|r| r.j_finite, j_finite_mean),
                j_tilde_mean,
                j_tilde_std: std(&|r| r.j_tilde, j_tilde_mean),
                f_n_mean,
            });
        }
    }

    Ok(ComparisonTable { rows, aggregates })
}
