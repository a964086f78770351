//! Seeded random problem instances for the oracle and acceptance suites.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cct_core::model::{InitialDistribution, ProblemSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n, scale);
    &g * g.transpose()
}

fn random_pd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    random_psd(rng, n, scale) + DMatrix::identity(n, n) * floor
}

/// A random instance with moderate magnitudes, dimensions drawn from the
/// given sets, and a horizon shrunk until it is certified below the escape
/// time.
pub fn random_spec(
    rng: &mut ChaCha8Rng,
    n_choices: &[usize],
    d_choices: &[usize],
) -> ProblemSpec {
    let n = n_choices[rng.gen_range(0..n_choices.len())];
    let d = d_choices[rng.gen_range(0..d_choices.len())];
    let m = rng.gen_range(1..=n);
    let a = random_matrix(rng, n, n, 0.6);
    let b = random_matrix(rng, n, m, 1.0);
    let r_x = random_psd(rng, n, 0.8);
    let r_d = random_psd(rng, n, 0.7);
    let r_u = random_pd(rng, m, 0.5, 0.4);
    let m_t = random_pd(rng, n, 0.8, 0.5);
    let destinations: Vec<DVector<f64>> = (0..d)
        .map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.5..1.5)))
        .collect();
    let dist = InitialDistribution::UniformBox {
        lower: DVector::from_element(n, -1.0),
        upper: DVector::from_element(n, 1.0),
    };
    let mut horizon = rng.gen_range(0.4..1.0);
    loop {
        let spec = ProblemSpec::new(
            a.clone(),
            b.clone(),
            r_x.clone(),
            r_d.clone(),
            r_u.clone(),
            m_t.clone(),
            destinations.clone(),
            horizon,
            dist.clone(),
        )
        .expect("random parts are valid");
        if cct_core::escape::assert_horizon(&spec).is_ok() {
            return spec;
        }
        horizon *= 0.5;
    }
}

/// All assignments of `n_agents` agents to `d` destinations.
pub fn all_assignments(n_agents: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n_agents {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<usize>| {
                (0..d).map(move |j| {
                    let mut next = prefix.clone();
                    next.push(j);
                    next
                })
            })
            .collect();
    }
    out
}

use cct_core::coeffs::FiniteCoeffs;
use cct_core::model::SimplexVector;
use cct_core::ode::rk4_step;

/// Backward integration of the coupled per-destination offset system,
/// reading the Riccati components from the same half-step grid the
/// production solver uses. Returns samples at every grid node.
pub fn coupled_psi_oracle(
    spec: &ProblemSpec,
    fc: &FiniteCoeffs,
    p: &SimplexVector,
    steps: usize,
) -> Vec<DMatrix<f64>> {
    let n = spec.state_dim();
    let d = spec.num_destinations();
    let horizon = spec.horizon();
    let h = horizon / steps as f64;
    let s = spec.s();
    let a_t = spec.a().transpose();
    let inv_n = 1.0 / fc.n_agents as f64;
    let dests = spec.destination_matrix();
    let rd_dests = spec.r_d() * &dests;

    let mut psi = DMatrix::<f64>::zeros(n, d);
    for j in 0..d {
        psi.set_column(j, &(-(spec.m_t() * dests.column(j))));
    }
    let mut nodes = vec![DMatrix::zeros(0, 0); steps + 1];
    nodes[steps] = psi.clone();
    let mut f = |t: f64, y: &DMatrix<f64>| {
        let (phi1, phi2) = fc.grids.phi_at(t);
        let p1s = &phi1 * s;
        let p2s = &phi2 * s;
        let mix = y * p.as_vector(); // sum_k P_k psi_k
        (&p1s - &a_t - &p2s * inv_n) * y
            + &rd_dests
            + (&p2s * mix) * DMatrix::<f64>::from_element(1, d, 1.0)
    };
    for i in (0..steps).rev() {
        let t = (i + 1) as f64 * h;
        psi = rk4_step(&mut f, t, &psi, -h);
        nodes[i] = psi.clone();
    }
    nodes
}
