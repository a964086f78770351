//! Transport solvers: the discrete assignment problem between sampled agents
//! and destination sites (exact, via the transportation simplex), and the
//! semi-discrete problem between the initial distribution and weighted sites
//! (power-diagram cells, projected supergradient ascent on the dual), plus
//! the simplex and ball projections used by the outer optimization.

use nalgebra::{DMatrix, DVector};

use crate::error::TransportError;
use crate::model::{InitialDistribution, SimplexVector};

/// Reduced-cost threshold in the transportation simplex.
const REDUCED_COST_EPS: f64 = 1e-12;

/// A joint mass matrix between agents (rows, marginal `1/N` each) and
/// destinations (columns, marginals `P_j`).
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub gamma: DMatrix<f64>,
    /// `sum_ij c_ij gamma_ij`
    pub value: f64,
    /// Populated when the optimal plan is integral (every `N P_j` integer):
    /// `assignment[i]` is the destination of agent `i`.
    pub assignment: Option<Vec<usize>>,
}

/// Dual weights of the semi-discrete problem together with the cell measures
/// they induce.
#[derive(Debug, Clone)]
pub struct PowerWeights {
    pub g: DVector<f64>,
    pub measures: DVector<f64>,
}

/// Quadrature settings for cell-measure and dual-value integrals over a
/// uniform box. `per_axis = None` picks 2^20 nodes in one dimension, 1024
/// per axis in two, and 101 per axis in three.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureOpts {
    pub per_axis: Option<usize>,
    pub dim_cap: usize,
}

impl Default for QuadratureOpts {
    fn default() -> Self {
        Self {
            per_axis: None,
            dim_cap: 3,
        }
    }
}

impl QuadratureOpts {
    pub fn with_per_axis(per_axis: usize) -> Self {
        Self {
            per_axis: Some(per_axis),
            ..Self::default()
        }
    }

    fn resolve(&self, n: usize) -> Result<usize, TransportError> {
        if n > self.dim_cap || n == 0 {
            return Err(TransportError::UnsupportedDimension {
                n,
                cap: self.dim_cap,
            });
        }
        Ok(self.per_axis.unwrap_or(match n {
            1 => 1 << 20,
            2 => 1024,
            _ => 101,
        }))
    }
}

/// Euclidean projection onto the probability simplex by sort and threshold,
/// O(D log D).
pub fn project_simplex(v: &DVector<f64>) -> SimplexVector {
    let d = v.len();
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    let projected = DVector::from_fn(d, |i, _| (v[i] - tau).max(0.0));
    let sum: f64 = projected.sum();
    SimplexVector::new(projected / sum).expect("projection lands on the simplex")
}

/// Projection onto the Euclidean ball of the given radius.
pub fn project_ball(g: &DVector<f64>, radius: f64) -> DVector<f64> {
    assert!(radius > 0.0, "ball radius must be positive");
    let norm = g.norm();
    if norm <= radius {
        g.clone()
    } else {
        g * (radius / norm)
    }
}

/// Squared-distance upper bound `sup_{x in E, j} |x - site_j|^2`, the radius
/// of the ball known to contain a dual maximizer.
pub fn power_radius(dist: &InitialDistribution, sites: &DMatrix<f64>) -> f64 {
    let n = sites.nrows();
    let d = sites.ncols();
    let mut worst: f64 = 0.0;
    match dist {
        InitialDistribution::UniformBox { lower, upper } => {
            // |x - s|^2 is convex, so the sup over the box is at a corner
            for j in 0..d {
                let mut r = 0.0;
                for k in 0..n {
                    let lo = (lower[k] - sites[(k, j)]).powi(2);
                    let hi = (upper[k] - sites[(k, j)]).powi(2);
                    r += lo.max(hi);
                }
                worst = worst.max(r);
            }
        }
        InitialDistribution::Empirical { points } => {
            for p in points {
                for j in 0..d {
                    let r = (p - sites.column(j)).norm_squared();
                    worst = worst.max(r);
                }
            }
        }
    }
    worst
}

/// Destination of a point under the power diagram: the index minimizing
/// `|x - site_j|^2 - g_j`, smallest index on ties.
pub fn assign_destination(sites: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> usize {
    let mut best = 0usize;
    let mut best_val = f64::INFINITY;
    for j in 0..sites.ncols() {
        let val = (x - sites.column(j)).norm_squared() - g[j];
        if val < best_val {
            best_val = val;
            best = j;
        }
    }
    best
}

/// Visits every quadrature node of the initial distribution with its weight.
fn for_each_node<F: FnMut(&[f64], f64)>(
    dist: &InitialDistribution,
    opts: &QuadratureOpts,
    mut visit: F,
) -> Result<(), TransportError> {
    match dist {
        InitialDistribution::UniformBox { lower, upper } => {
            let n = lower.len();
            let per_axis = opts.resolve(n)?;
            let total = (per_axis as f64).powi(n as i32);
            let weight = 1.0 / total;
            let steps: Vec<f64> = (0..n)
                .map(|k| (upper[k] - lower[k]) / per_axis as f64)
                .collect();
            let mut idx = vec![0usize; n];
            let mut x = vec![0.0f64; n];
            loop {
                for k in 0..n {
                    x[k] = lower[k] + (idx[k] as f64 + 0.5) * steps[k];
                }
                visit(&x, weight);
                // odometer increment, last axis fastest
                let mut k = n;
                loop {
                    if k == 0 {
                        return Ok(());
                    }
                    k -= 1;
                    idx[k] += 1;
                    if idx[k] < per_axis {
                        break;
                    }
                    idx[k] = 0;
                }
            }
        }
        InitialDistribution::Empirical { points } => {
            let weight = 1.0 / points.len() as f64;
            for p in points {
                visit(p.as_slice(), weight);
            }
            Ok(())
        }
    }
}

fn measures_and_dual_integral(
    dist: &InitialDistribution,
    sites: &DMatrix<f64>,
    g: &DVector<f64>,
    opts: &QuadratureOpts,
) -> Result<(DVector<f64>, f64), TransportError> {
    let d = sites.ncols();
    let n = sites.nrows();
    let mut measures = DVector::<f64>::zeros(d);
    // compensated summation: the integral accumulates ~1e6 terms and feeds
    // concavity checks at absolute tolerances far below n*eps*|sum|
    let mut integral = 0.0f64;
    let mut carry = 0.0f64;
    for_each_node(dist, opts, |x, w| {
        let mut best = 0usize;
        let mut best_val = f64::INFINITY;
        for j in 0..d {
            let mut dist2 = 0.0;
            for k in 0..n {
                let delta = x[k] - sites[(k, j)];
                dist2 += delta * delta;
            }
            let val = dist2 - g[j];
            if val < best_val {
                best_val = val;
                best = j;
            }
        }
        measures[best] += w;
        let term = w * best_val - carry;
        let next = integral + term;
        carry = (next - integral) - term;
        integral = next;
    })?;
    Ok((measures, integral))
}

/// Initial-distribution measure of each power cell. Ties on cell boundaries
/// go to the smallest index.
pub fn cell_measures(
    dist: &InitialDistribution,
    sites: &DMatrix<f64>,
    g: &DVector<f64>,
    opts: &QuadratureOpts,
) -> Result<DVector<f64>, TransportError> {
    Ok(measures_and_dual_integral(dist, sites, g, opts)?.0)
}

/// Dual objective `J^D(g, P) = ∫ min_j(|x - site_j|^2 - g_j) dP0 + Σ P_j g_j`.
pub fn dual_value(
    dist: &InitialDistribution,
    sites: &DMatrix<f64>,
    g: &DVector<f64>,
    p: &SimplexVector,
    opts: &QuadratureOpts,
) -> Result<f64, TransportError> {
    let (_, integral) = measures_and_dual_integral(dist, sites, g, opts)?;
    Ok(integral + p.as_vector().dot(g))
}

/// Parameters of the semi-discrete inner loop.
#[derive(Debug, Clone)]
pub struct SemiDiscreteParams {
    /// Fixed ascent step on the dual weights.
    pub s_in: f64,
    /// Stopping threshold on `||P - measures||_inf`.
    pub delta: f64,
    pub max_iter: usize,
    pub quad: QuadratureOpts,
    /// Warm-start weights; zeros when absent.
    pub g0: Option<DVector<f64>>,
}

impl Default for SemiDiscreteParams {
    fn default() -> Self {
        Self {
            s_in: 3500.0,
            delta: 5e-5,
            max_iter: 100_000,
            quad: QuadratureOpts::default(),
            g0: None,
        }
    }
}

/// Fixed-step projected supergradient ascent
/// `g <- Proj_G(g + s_in (P - measures(g)))` until the cell measures match
/// `P` within `delta`. Returns the weights and the transport value
/// `C(P) = J^D(g*, P)`.
pub fn solve_semidiscrete(
    dist: &InitialDistribution,
    sites: &DMatrix<f64>,
    p: &SimplexVector,
    params: &SemiDiscreteParams,
) -> Result<(PowerWeights, f64), TransportError> {
    assert!(params.s_in > 0.0 && params.delta > 0.0);
    let d = sites.ncols();
    let radius = power_radius(dist, sites);
    let mut g = params.g0.clone().unwrap_or_else(|| DVector::zeros(d));
    let pv = p.as_vector();
    let mut best_residual = f64::INFINITY;
    let mut best_g = g.clone();
    let mut best_value = f64::NAN;
    for _iter in 0..params.max_iter {
        let (measures, integral) = measures_and_dual_integral(dist, sites, &g, &params.quad)?;
        let residual = (pv - &measures).amax();
        if residual < best_residual {
            best_residual = residual;
            best_g = g.clone();
            best_value = integral + pv.dot(&g);
        }
        if residual <= params.delta {
            let value = integral + pv.dot(&g);
            return Ok((PowerWeights { g, measures }, value));
        }
        g += (pv - &measures) * params.s_in;
        g = project_ball(&g, radius);
    }
    Err(TransportError::MaxIterExceeded {
        iterations: params.max_iter,
        residual: best_residual,
        best_g: best_g.as_slice().to_vec(),
        best_value,
    })
}

/// Exact solution of the discrete transport problem with row marginals
/// `1/N` and the given column marginals, by the transportation simplex
/// (northwest-corner start, MODI pivoting, Bland's rule). When every
/// `N P_j` is an integer the optimal vertex is integral and the assignment
/// is extracted.
pub fn discrete_ot(
    costs: &DMatrix<f64>,
    col_marginals: &DVector<f64>,
) -> Result<TransportPlan, TransportError> {
    let n_rows = costs.nrows();
    let d = costs.ncols();
    assert!(n_rows > 0 && d == col_marginals.len());
    let sum: f64 = col_marginals.sum();
    if (sum - 1.0).abs() > 1e-9 || col_marginals.iter().any(|&x| x < -1e-12) {
        return Err(TransportError::InfeasibleMarginals { sum });
    }

    let supply = 1.0 / n_rows as f64;

    // Northwest-corner starting basis: exactly n_rows + d - 1 arcs forming a
    // spanning tree of the bipartite row/column graph.
    let mut basis: Vec<(usize, usize, f64)> = Vec::with_capacity(n_rows + d - 1);
    {
        let mut s = vec![supply; n_rows];
        let mut c: Vec<f64> = col_marginals.iter().copied().collect();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let amount = s[i].min(c[j]).max(0.0);
            basis.push((i, j, amount));
            s[i] -= amount;
            c[j] -= amount;
            if i == n_rows - 1 && j == d - 1 {
                break;
            }
            if s[i] <= 1e-15 && i + 1 < n_rows {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let mut u = vec![0.0f64; n_rows];
    let mut v = vec![0.0f64; d];
    let max_pivots = 10_000 + 50 * n_rows * d;
    for _pivot in 0..max_pivots {
        // Node potentials over the basis tree: u_i + v_j = c_ij.
        let mut row_adj: Vec<Vec<usize>> = vec![Vec::new(); n_rows];
        let mut col_adj: Vec<Vec<usize>> = vec![Vec::new(); d];
        for (idx, &(i, j, _)) in basis.iter().enumerate() {
            row_adj[i].push(idx);
            col_adj[j].push(idx);
        }
        let mut u_known = vec![false; n_rows];
        let mut v_known = vec![false; d];
        u[0] = 0.0;
        u_known[0] = true;
        let mut stack: Vec<(bool, usize)> = vec![(true, 0)]; // (is_row, index)
        while let Some((is_row, node)) = stack.pop() {
            if is_row {
                for &idx in &row_adj[node] {
                    let (_, j, _) = basis[idx];
                    if !v_known[j] {
                        v[j] = costs[(node, j)] - u[node];
                        v_known[j] = true;
                        stack.push((false, j));
                    }
                }
            } else {
                for &idx in &col_adj[node] {
                    let (i, _, _) = basis[idx];
                    if !u_known[i] {
                        u[i] = costs[(i, node)] - v[node];
                        u_known[i] = true;
                        stack.push((true, i));
                    }
                }
            }
        }

        // Entering arc: first cell (row-major) with negative reduced cost.
        let in_basis: std::collections::HashSet<(usize, usize)> =
            basis.iter().map(|&(i, j, _)| (i, j)).collect();
        let mut entering: Option<(usize, usize)> = None;
        'outer: for i in 0..n_rows {
            for j in 0..d {
                if in_basis.contains(&(i, j)) {
                    continue;
                }
                if costs[(i, j)] - u[i] - v[j] < -REDUCED_COST_EPS {
                    entering = Some((i, j));
                    break 'outer;
                }
            }
        }
        let (ei, ej) = match entering {
            Some(e) => e,
            None => break,
        };

        // Unique tree path from row ei to column ej; the entering arc closes
        // the cycle. BFS over basis arcs.
        let mut parent_arc: Vec<Option<usize>> = vec![None; n_rows + d]; // node -> arc used to reach it
        let mut visited = vec![false; n_rows + d];
        let row_node = |i: usize| i;
        let col_node = |j: usize| n_rows + j;
        let mut queue = std::collections::VecDeque::new();
        visited[row_node(ei)] = true;
        queue.push_back(row_node(ei));
        while let Some(node) = queue.pop_front() {
            if node == col_node(ej) {
                break;
            }
            let arcs = if node < n_rows {
                &row_adj[node]
            } else {
                &col_adj[node - n_rows]
            };
            for &idx in arcs {
                let (i, j, _) = basis[idx];
                let other = if node < n_rows {
                    col_node(j)
                } else {
                    row_node(i)
                };
                if !visited[other] {
                    visited[other] = true;
                    parent_arc[other] = Some(idx);
                    queue.push_back(other);
                }
            }
        }
        // Walk back from column ej collecting the path arcs.
        let mut path: Vec<usize> = Vec::new();
        let mut node = col_node(ej);
        while node != row_node(ei) {
            let idx = parent_arc[node].expect("basis is a spanning tree");
            path.push(idx);
            let (i, j, _) = basis[idx];
            node = if node >= n_rows {
                row_node(i)
            } else {
                col_node(j)
            };
        }
        // Signs alternate around the cycle; the arc adjacent to ej gets "-".
        // path[0] touches ej, so even positions in `path` are "-".
        let mut theta = f64::INFINITY;
        let mut leaving: Option<usize> = None;
        for (pos, &idx) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let amount = basis[idx].2;
                if amount < theta - 1e-18 {
                    theta = amount;
                    leaving = Some(idx);
                }
            }
        }
        let leaving = leaving.expect("cycle has at least one minus arc");
        let theta = theta.max(0.0);
        for (pos, &idx) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis[idx].2 -= theta;
            } else {
                basis[idx].2 += theta;
            }
        }
        basis[leaving] = (ei, ej, theta);
    }

    let mut gamma = DMatrix::<f64>::zeros(n_rows, d);
    for &(i, j, amount) in &basis {
        gamma[(i, j)] = amount;
    }
    let value = basis
        .iter()
        .map(|&(i, j, amount)| amount * costs[(i, j)])
        .sum();

    // Integral extraction when the scaled marginals are integers.
    let integral = (0..d).all(|j| {
        let scaled = col_marginals[j] * n_rows as f64;
        (scaled - scaled.round()).abs() <= 1e-9
    });
    let assignment = if integral {
        let mut lambda = Vec::with_capacity(n_rows);
        for i in 0..n_rows {
            let mut best = 0usize;
            let mut best_mass = -1.0;
            for j in 0..d {
                if gamma[(i, j)] > best_mass {
                    best_mass = gamma[(i, j)];
                    best = j;
                }
            }
            lambda.push(best);
        }
        Some(lambda)
    } else {
        None
    };

    Ok(TransportPlan {
        gamma,
        value,
        assignment,
    })
}
