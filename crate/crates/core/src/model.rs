//! Problem instances: dynamics, cost weights, destinations, horizon, and the
//! initial distribution with its moments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative tolerance for positive-semidefiniteness of user-entered weights.
pub const PSD_TOL: f64 = 1e-12;
/// Tolerance on the simplex constraint `sum p_j = 1`.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Initial distribution of agent states over a compact subset of R^n.
///
/// The uniform-box kind covers the experiments of interest and keeps the
/// cell-measure quadrature tractable. For empirical inputs, the requirement
/// that hyperplanes carry zero mass is the caller's responsibility.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDistribution {
    UniformBox {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    Empirical {
        points: Vec<DVector<f64>>,
    },
}

/// Moments of the initial distribution used by the cost functions.
#[derive(Debug, Clone)]
pub struct Moments {
    /// `mean = ∫ x dP0`
    pub mean: DVector<f64>,
    /// `quad = ∫ x^T Q x dP0`
    pub quad: f64,
    /// `second = ∫ |x|^2 dP0`
    pub second: f64,
}

impl InitialDistribution {
    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::UniformBox { lower, .. } => lower.len(),
            InitialDistribution::Empirical { points } => points[0].len(),
        }
    }

    /// Mean, Q-weighted quadratic moment, and second moment.
    ///
    /// Uniform boxes use the closed-form box moments
    /// `E[x_k x_l] = m_k m_l + δ_kl (u_k - l_k)^2 / 12`; empirical
    /// distributions use sample averages.
    pub fn moments(&self, q: &DMatrix<f64>) -> Moments {
        match self {
            InitialDistribution::UniformBox { lower, upper } => {
                let n = lower.len();
                let mean = (lower + upper) * 0.5;
                let var: DVector<f64> =
                    DVector::from_fn(n, |k, _| (upper[k] - lower[k]).powi(2) / 12.0);
                let mut quad = (q * &mean).dot(&mean);
                for k in 0..n {
                    quad += q[(k, k)] * var[k];
                }
                let second = mean.norm_squared() + var.sum();
                Moments { mean, quad, second }
            }
            InitialDistribution::Empirical { points } => {
                let n = points[0].len();
                let w = 1.0 / points.len() as f64;
                let mut mean = DVector::zeros(n);
                let mut quad = 0.0;
                let mut second = 0.0;
                for x in points {
                    mean.axpy(w, x, 1.0);
                    quad += w * (q * x).dot(x);
                    second += w * x.norm_squared();
                }
                Moments { mean, quad, second }
            }
        }
    }

    /// Draws `count` i.i.d. initial states, deterministically in `seed`.
    ///
    /// An empirical distribution with `count` equal to its support size
    /// returns the points verbatim; otherwise it resamples with replacement.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        assert!(count >= 1, "need at least one sample");
        match self {
            InitialDistribution::UniformBox { lower, upper } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = lower.len();
                (0..count)
                    .map(|_| DVector::from_fn(n, |k, _| rng.gen_range(lower[k]..upper[k])))
                    .collect()
            }
            InitialDistribution::Empirical { points } => {
                if count == points.len() {
                    return points.clone();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count)
                    .map(|_| points[rng.gen_range(0..points.len())].clone())
                    .collect()
            }
        }
    }

    fn violations(&self, n: usize, out: &mut Vec<String>) {
        match self {
            InitialDistribution::UniformBox { lower, upper } => {
                if lower.len() != n || upper.len() != n {
                    out.push(format!(
                        "uniform box bounds have dimension {}/{}, expected {n}",
                        lower.len(),
                        upper.len()
                    ));
                } else if (0..n).any(|k| lower[k] >= upper[k]) {
                    out.push("uniform box needs lower < upper componentwise".into());
                }
            }
            InitialDistribution::Empirical { points } => {
                if points.is_empty() {
                    out.push("empirical distribution needs at least one point".into());
                } else if points.iter().any(|p| p.len() != n) {
                    out.push(format!("empirical points must all have dimension {n}"));
                }
            }
        }
    }
}

/// A point of the probability simplex over destinations.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(DVector<f64>);

impl SimplexVector {
    /// Validates nonnegativity and unit sum (within [`SIMPLEX_TOL`] scaled by
    /// dimension roundoff).
    pub fn new(p: DVector<f64>) -> Result<Self, String> {
        if p.is_empty() {
            return Err("simplex vector must be nonempty".into());
        }
        if let Some(k) = (0..p.len()).find(|&k| p[k] < -SIMPLEX_TOL) {
            return Err(format!("component {k} is negative: {}", p[k]));
        }
        let sum: f64 = p.sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL * p.len() as f64 {
            return Err(format!("components sum to {sum}, expected 1"));
        }
        Ok(Self(p))
    }

    /// Uniform vector `(1/D, ..., 1/D)`.
    pub fn uniform(d: usize) -> Self {
        Self(DVector::from_element(d, 1.0 / d as f64))
    }

    /// The vertex `e_j`.
    pub fn vertex(d: usize, j: usize) -> Self {
        let mut v = DVector::zeros(d);
        v[j] = 1.0;
        Self(v)
    }

    /// Convex combination `θ a + (1-θ) b`.
    pub fn blend(a: &Self, b: &Self, theta: f64) -> Self {
        Self(&a.0 * theta + &b.0 * (1.0 - theta))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Outcome of validating a problem instance: empty means valid.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_valid() {
            write!(f, "valid")
        } else {
            write!(f, "{}", self.violations.join("; "))
        }
    }
}

/// A full model instance: dynamics `dx = (A x + B u) dt`, cost weights,
/// destination set, horizon, and initial distribution.
///
/// Immutable once constructed; `S = B R_u^{-1} B^T` is computed and cached at
/// construction time.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    r_x: DMatrix<f64>,
    r_d: DMatrix<f64>,
    r_u: DMatrix<f64>,
    m_t: DMatrix<f64>,
    destinations: Vec<DVector<f64>>,
    horizon: f64,
    dist: InitialDistribution,
    s: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
impl ProblemSpec {
    /// Validates the parts and builds the instance. The error side carries
    /// every violation found.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        r_x: DMatrix<f64>,
        r_d: DMatrix<f64>,
        r_u: DMatrix<f64>,
        m_t: DMatrix<f64>,
        destinations: Vec<DVector<f64>>,
        horizon: f64,
        dist: InitialDistribution,
    ) -> Result<Self, ValidationReport> {
        let report = validate_spec(
            &a,
            &b,
            &r_x,
            &r_d,
            &r_u,
            &m_t,
            &destinations,
            horizon,
            &dist,
        );
        if !report.is_valid() {
            return Err(report);
        }
        let r_u_inv = r_u
            .clone()
            .cholesky()
            .expect("validated R_u is positive definite")
            .inverse();
        let s = &b * r_u_inv * b.transpose();
        Ok(Self {
            a,
            b,
            r_x,
            r_d,
            r_u,
            m_t,
            destinations,
            horizon,
            dist,
            s,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn num_destinations(&self) -> usize {
        self.destinations.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn r_x(&self) -> &DMatrix<f64> {
        &self.r_x
    }

    pub fn r_d(&self) -> &DMatrix<f64> {
        &self.r_d
    }

    pub fn r_u(&self) -> &DMatrix<f64> {
        &self.r_u
    }

    pub fn m_t(&self) -> &DMatrix<f64> {
        &self.m_t
    }

    pub fn destinations(&self) -> &[DVector<f64>] {
        &self.destinations
    }

    pub fn destination(&self, j: usize) -> &DVector<f64> {
        &self.destinations[j]
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dist(&self) -> &InitialDistribution {
        &self.dist
    }

    /// Cached `S = B R_u^{-1} B^T`.
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// `R_d - R_x`, the state weight of the limiting Riccati equation.
    pub fn q_limit(&self) -> DMatrix<f64> {
        &self.r_d - &self.r_x
    }

    /// Stacked destination matrix `[d_1 ... d_D]` (n x D).
    pub fn destination_matrix(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let d = self.num_destinations();
        DMatrix::from_fn(n, d, |i, j| self.destinations[j][i])
    }
}

fn check_symmetric(name: &str, m: &DMatrix<f64>, out: &mut Vec<String>) -> bool {
    if m.nrows() != m.ncols() {
        out.push(format!("{name} must be square, got {}x{}", m.nrows(), m.ncols()));
        return false;
    }
    let scale = m.iter().map(|x| x.abs()).fold(1.0f64, f64::max);
    if crate::linalg::asymmetry(m) > 1e-9 * scale {
        out.push(format!("{name} must be symmetric"));
        return false;
    }
    true
}

fn check_psd(name: &str, m: &DMatrix<f64>, out: &mut Vec<String>) {
    if !check_symmetric(name, m, out) {
        return;
    }
    let scale = m.iter().map(|x| x.abs()).fold(1.0f64, f64::max);
    if crate::linalg::min_symmetric_eigenvalue(m) < -PSD_TOL * scale {
        out.push(format!("{name} not positive semidefinite"));
    }
}

fn check_pd(name: &str, m: &DMatrix<f64>, out: &mut Vec<String>) {
    if !check_symmetric(name, m, out) {
        return;
    }
    if m.clone().cholesky().is_none() {
        out.push(format!("{name} not positive definite"));
    }
}

/// Collects every violation of the model invariants; an empty report means
/// the parts form a valid [`ProblemSpec`].
#[allow(clippy::too_many_arguments)]
pub fn validate_spec(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r_x: &DMatrix<f64>,
    r_d: &DMatrix<f64>,
    r_u: &DMatrix<f64>,
    m_t: &DMatrix<f64>,
    destinations: &[DVector<f64>],
    horizon: f64,
    dist: &InitialDistribution,
) -> ValidationReport {
    let mut v = Vec::new();
    let n = a.nrows();
    if n == 0 {
        v.push("state dimension must be positive".into());
    }
    if a.ncols() != n {
        v.push(format!("A must be square, got {}x{}", a.nrows(), a.ncols()));
    }
    if b.nrows() != n {
        v.push(format!("B has {} rows, expected {n}", b.nrows()));
    }
    if b.ncols() == 0 {
        v.push("control dimension must be positive".into());
    }
    let m = b.ncols();
    for (name, mat, dim) in [("R_x", r_x, n), ("R_d", r_d, n), ("M", m_t, n)] {
        if mat.nrows() != dim || mat.ncols() != dim {
            v.push(format!(
                "{name} has shape {}x{}, expected {dim}x{dim}",
                mat.nrows(),
                mat.ncols()
            ));
        }
    }
    if r_u.nrows() != m || r_u.ncols() != m {
        v.push(format!(
            "R_u has shape {}x{}, expected {m}x{m}",
            r_u.nrows(),
            r_u.ncols()
        ));
    }
    if v.is_empty() {
        check_psd("R_x", r_x, &mut v);
        check_psd("R_d", r_d, &mut v);
        check_pd("R_u not positive definite: R_u", r_u, &mut v);
        check_pd("M not positive definite: M", m_t, &mut v);
    }
    if destinations.is_empty() {
        v.push("destination list is empty".into());
    }
    for (j, d) in destinations.iter().enumerate() {
        if d.len() != n {
            v.push(format!(
                "destination {} has dimension {}, expected {n}",
                j + 1,
                d.len()
            ));
        }
    }
    if !(horizon > 0.0) {
        v.push(format!("horizon T must be positive, got {horizon}"));
    }
    dist.violations(n, &mut v);
    ValidationReport { violations: v }
}
