//! Independent-route oracles for the coefficient systems: the coupled
//! offset ODE, the scalar cost ODE, and the full-population value function,
//! plus convergence and regression anchors for the reference instance.

mod common;

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use cct_core::coeffs::{
    assemble_psi, chi_at_zero, full_system_oracle, solve_finite_coeffs, solve_limit_coeffs,
};
use cct_core::escape::{assert_horizon, escape_time, EscapeOpts};
use cct_core::model::{InitialDistribution, ProblemSpec, SimplexVector};
use cct_core::ode::rk4_step;

fn paper_sec7_spec(horizon: f64) -> ProblemSpec {
    let i2 = DMatrix::<f64>::identity(2, 2);
    ProblemSpec::new(
        DMatrix::zeros(2, 2),
        i2.clone(),
        i2.clone(),
        &i2 * 0.1,
        &i2 * 50.0,
        &i2 * 400.0,
        vec![
            DVector::from_column_slice(&[-5.0, -3.0]),
            DVector::from_column_slice(&[7.0, 8.0]),
        ],
        horizon,
        InitialDistribution::UniformBox {
            lower: DVector::from_element(2, -50.0),
            upper: DVector::from_element(2, 50.0),
        },
    )
    .unwrap()
}

#[test]
fn psi_affinity_matches_coupled_ode_oracle() {
    let mut rng = common::rng(501);
    let spec = common::random_spec(&mut rng, &[1, 2], &[3]);
    let d = spec.num_destinations();
    let n_agents = 5;
    let steps = 2000;
    let dt = spec.horizon() / steps as f64;
    let fc = solve_finite_coeffs(&spec, n_agents, dt).unwrap();
    let p = SimplexVector::new(DVector::from_column_slice(&[0.4, 0.4, 0.2])).unwrap();

    let oracle = common::coupled_psi_oracle(&spec, &fc, &p, steps);
    for _ in 0..20 {
        let node = rng.gen_range(0..=steps);
        let j = rng.gen_range(0..d);
        let t = node as f64 * dt;
        let assembled = assemble_psi(&fc.grids, &p, j, t);
        let direct = oracle[node].column(j);
        assert!(
            (&assembled - direct).amax() <= 1e-8,
            "node {node} destination {j}: assembled {assembled:?} direct {:?}",
            oracle[node].column(j)
        );
    }
}

#[test]
fn psi_is_affine_in_the_occupancy_vector() {
    let mut rng = common::rng(502);
    let spec = common::random_spec(&mut rng, &[2], &[3]);
    let fc = solve_finite_coeffs(&spec, 7, spec.horizon() / 500.0).unwrap();
    let p = SimplexVector::new(DVector::from_column_slice(&[0.6, 0.1, 0.3])).unwrap();
    let q = SimplexVector::new(DVector::from_column_slice(&[0.2, 0.5, 0.3])).unwrap();
    for &theta in &[0.25, 0.5, 0.75] {
        let blend = SimplexVector::blend(&p, &q, theta);
        for j in 0..3 {
            for &t in &[0.0, 0.3 * spec.horizon(), spec.horizon()] {
                let lhs = assemble_psi(&fc.grids, &blend, j, t);
                let rhs = assemble_psi(&fc.grids, &p, j, t) * theta
                    + assemble_psi(&fc.grids, &q, j, t) * (1.0 - theta);
                assert!((lhs - rhs).amax() <= 1e-12);
            }
        }
    }
}

#[test]
fn chi_matches_ode_oracle() {
    // scalar instance, fine grid: the trapezoid route and a direct RK4
    // integration of the cost ODE agree to 1e-8
    let spec = ProblemSpec::new(
        DMatrix::from_element(1, 1, 0.2),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.4),
        DMatrix::from_element(1, 1, 0.3),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.5),
        vec![
            DVector::from_element(1, 0.8),
            DVector::from_element(1, -0.6),
        ],
        0.5,
        InitialDistribution::UniformBox {
            lower: DVector::from_element(1, -1.0),
            upper: DVector::from_element(1, 1.0),
        },
    )
    .unwrap();
    let n_agents = 4;
    let steps = 20_000;
    let dt = spec.horizon() / steps as f64;
    let fc = solve_finite_coeffs(&spec, n_agents, dt).unwrap();
    let p = SimplexVector::new(DVector::from_column_slice(&[0.75, 0.25])).unwrap();

    let s = spec.s()[(0, 0)];
    let stress: Vec<f64> = (0..2)
        .map(|j| {
            let dj = spec.destination(j)[0];
            spec.r_d()[(0, 0)] * dj * dj
        })
        .collect();
    let chi_terminal: f64 = (0..2)
        .map(|j| {
            let dj = spec.destination(j)[0];
            0.5 * p[j] * spec.m_t()[(0, 0)] * dj * dj
        })
        .sum();
    let mut chi = chi_terminal;
    let mut f = |t: f64, _y: &f64| {
        (0..2)
            .map(|j| {
                let psi = assemble_psi(&fc.grids, &p, j, t)[0];
                0.5 * p[j] * (s * psi * psi - stress[j])
            })
            .sum::<f64>()
    };
    for i in (0..steps).rev() {
        chi = rk4_step(&mut f, (i + 1) as f64 * dt, &chi, -dt);
    }
    let trapezoid_route = chi_at_zero(&fc.grids, &p);
    assert!(
        (chi - trapezoid_route).abs() <= 1e-8,
        "ode {chi} vs quadrature {trapezoid_route}"
    );
}

#[test]
fn finite_cost_matches_full_system_oracle_at_every_grid_point() {
    let mut rng = common::rng(507);
    for round in 0..4 {
        let spec = common::random_spec(&mut rng, &[1], &[2]);
        let n_agents = 3;
        let dt = spec.horizon() / 4000.0;
        let fc = solve_finite_coeffs(&spec, n_agents, dt).unwrap();
        let x0 = spec.dist().sample(n_agents, 900 + round);
        let grid = cct_core::finite::enumerate_fractions(n_agents, 2, 100).unwrap();
        for p in grid {
            let (j_n, plan) = cct_core::finite::finite_cost(&spec, &fc, &x0, &p).unwrap();
            // best assignment with these counts, by exhaustive oracle
            let target: Vec<usize> = (0..2).map(|j| (p[j] * n_agents as f64).round() as usize).collect();
            let mut best = f64::INFINITY;
            for lambda in common::all_assignments(n_agents, 2) {
                let counts: Vec<usize> =
                    (0..2).map(|j| lambda.iter().filter(|&&l| l == j).count()).collect();
                if counts != target {
                    continue;
                }
                let value = full_system_oracle(&spec, &lambda, &x0, dt).unwrap().cost;
                best = best.min(value);
            }
            assert!(
                (j_n - best).abs() <= 1e-7 * best.abs().max(1.0),
                "round {round}: J^N({p:?}) = {j_n} vs oracle {best}"
            );
            let lambda = plan.assignment.expect("grid marginals are integral");
            let oracle_at_plan = full_system_oracle(&spec, &lambda, &x0, dt).unwrap().cost;
            assert!((j_n - oracle_at_plan).abs() <= 1e-7 * best.abs().max(1.0));
        }
    }
}

#[test]
fn finite_riccati_matches_block_extraction() {
    // two agents, scalar dynamics in the style of the reference instance
    let spec = ProblemSpec::new(
        DMatrix::zeros(1, 1),
        DMatrix::identity(1, 1),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.1),
        DMatrix::from_element(1, 1, 50.0),
        DMatrix::from_element(1, 1, 400.0),
        vec![DVector::from_element(1, -5.0), DVector::from_element(1, 7.0)],
        3.0,
        InitialDistribution::UniformBox {
            lower: DVector::from_element(1, -50.0),
            upper: DVector::from_element(1, 50.0),
        },
    )
    .unwrap();
    let dt = 1.5e-3;
    let fc = solve_finite_coeffs(&spec, 2, dt).unwrap();
    let oracle = full_system_oracle(
        &spec,
        &[0, 1],
        &[DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        dt,
    )
    .unwrap();
    // phi^N = I (x) phi1 + (1_NN - I)/N (x) phi2
    let phi1 = fc.grids.phi1.first()[(0, 0)];
    let phi2 = fc.grids.phi2.first()[(0, 0)];
    assert_relative_eq!(oracle.phi0[(0, 0)], phi1, epsilon = 1e-8 * phi1.abs());
    assert_relative_eq!(oracle.phi0[(1, 1)], phi1, epsilon = 1e-8 * phi1.abs());
    assert_relative_eq!(
        oracle.phi0[(0, 1)],
        phi2 / 2.0,
        epsilon = 1e-8 * phi1.abs()
    );
}

#[test]
fn halving_the_step_shows_fourth_order() {
    let mut rng = common::rng(509);
    let spec = common::random_spec(&mut rng, &[2], &[2]);
    let phi_at = |steps: usize| {
        let lc = solve_limit_coeffs(&spec, spec.horizon() / steps as f64).unwrap();
        lc.grids.phi1.first().clone()
    };
    let coarse = phi_at(50);
    let medium = phi_at(100);
    let fine = phi_at(200);
    let e1 = (&coarse - &medium).norm();
    let e2 = (&medium - &fine).norm();
    let order = (e1 / e2).log2();
    assert!(order >= 3.5, "observed order {order}");
}

#[test]
fn finite_coefficients_converge_monotonically_to_the_limit() {
    let mut rng = common::rng(523);
    let spec = common::random_spec(&mut rng, &[2], &[2]);
    let dt = spec.horizon() / 2000.0;
    let lc = solve_limit_coeffs(&spec, dt).unwrap();
    let phi1_limit = lc.grids.phi1.first();
    let beta_limit = lc.grids.beta.first();
    let mut prev_phi = f64::INFINITY;
    let mut prev_beta = f64::INFINITY;
    for n_agents in [10usize, 100, 1000, 10_000] {
        let fc = solve_finite_coeffs(&spec, n_agents, dt).unwrap();
        let dphi = (fc.grids.phi1.first() - phi1_limit).norm();
        let dbeta = (fc.grids.beta.first() - beta_limit).norm();
        assert!(dphi < prev_phi, "phi gap not decreasing at N={n_agents}");
        // the offset system is N-independent (see the reduction test below),
        // so its gap sits at roundoff for every N: non-increase up to noise
        assert!(dbeta <= prev_beta.max(1e-12), "beta gap grew at N={n_agents}");
        prev_phi = dphi;
        prev_beta = dbeta.max(1e-12);
    }

    // large-N bound on the reference instance: the gap is O(1/N)
    let spec = paper_sec7_spec(3.0);
    let dt = 1.5e-3;
    let lc = solve_limit_coeffs(&spec, dt).unwrap();
    let fc = solve_finite_coeffs(&spec, 1_000_000, dt).unwrap();
    let gap = (fc.grids.phi1.first() - lc.grids.phi1.first()).norm();
    assert!(
        gap <= 10.0 / 1_000_000.0 * lc.grids.phi1.first().norm(),
        "gap {gap}"
    );
}

#[test]
fn finite_system_is_the_limit_system_plus_a_riccati_correction() {
    // The joint Riccati block-diagonalizes along mean and difference
    // directions, both blocks independent of the population size. In the
    // decomposed variables that reads: phi2^N = phi2, beta^N = beta,
    // alpha^N = alpha, and phi1^N = phi1 + phi2 / N, exactly.
    let mut rng = common::rng(524);
    let spec = common::random_spec(&mut rng, &[2], &[3]);
    let dt = spec.horizon() / 1000.0;
    let lc = solve_limit_coeffs(&spec, dt).unwrap();
    for n_agents in [2usize, 7, 100] {
        let fc = solve_finite_coeffs(&spec, n_agents, dt).unwrap();
        let scale = lc.grids.phi1.first().norm().max(1.0);
        for i in [0, 300, 1000] {
            let corrected = lc.grids.phi1.node(i) + lc.grids.phi2.node(i) / n_agents as f64;
            assert!((fc.grids.phi1.node(i) - corrected).norm() <= 1e-10 * scale);
            assert!((fc.grids.phi2.node(i) - lc.grids.phi2.node(i)).norm() <= 1e-10 * scale);
            assert!((fc.grids.beta.node(i) - lc.grids.beta.node(i)).norm() <= 1e-10 * scale);
            assert!((fc.grids.alpha.node(i) - lc.grids.alpha.node(i)).norm() <= 1e-10 * scale);
        }
    }
}

#[test]
fn reference_instance_coefficient_anchor() {
    // frozen from an independent implementation of the same systems
    // (backward RK4, 3000 steps, trapezoid quadratures)
    let spec = paper_sec7_spec(3.0);
    let lc = solve_limit_coeffs(&spec, 1e-3).unwrap();
    let g = &lc.grids;
    assert_relative_eq!(g.phi1.first()[(0, 0)], 15.05139009, max_relative = 1e-7);
    assert_relative_eq!(g.phi1.first()[(1, 1)], 15.05139009, max_relative = 1e-7);
    assert!(g.phi1.first()[(0, 1)].abs() < 1e-10);
    assert_relative_eq!(g.phi2.first()[(0, 0)], 1.05263457, max_relative = 1e-6);
    let sites = g.sites();
    assert_relative_eq!(sites[(0, 0)], -86.88711772, max_relative = 1e-7);
    assert_relative_eq!(sites[(1, 0)], -54.14848553, max_relative = 1e-7);
    assert_relative_eq!(sites[(0, 1)], 112.72817263, max_relative = 1e-7);
    assert_relative_eq!(sites[(1, 1)], 128.83219729, max_relative = 1e-7);
    assert_relative_eq!(g.w_int[(0, 0)], 2.0 * -44.08150118, max_relative = 1e-5);
    assert_relative_eq!(g.w_int[(1, 0)], 2.0 * 80.13754123, max_relative = 1e-5);
    assert!(g.w_int[(0, 1)].abs() < 1e-10 && g.w_int[(1, 1)].abs() < 1e-10);
    assert_relative_eq!(g.h[0], -5011.10046243, max_relative = 1e-6);
    assert_relative_eq!(g.h[1], -13743.05162946, max_relative = 1e-6);
}

#[test]
fn escape_time_of_the_reference_instance() {
    // blow-down of the limiting Riccati flow: first zero of the determinant
    // criterion and the direct integration agree near 23.291
    let spec = paper_sec7_spec(3.0);
    let report = escape_time(&spec, EscapeOpts::default());
    assert!(
        (report.escape_time - 23.2911).abs() <= 2e-3,
        "escape at {}",
        report.escape_time
    );
    assert!(report.horizon_ok);
    assert!((report.margin - (report.escape_time - 3.0)).abs() < 1e-12);

    assert!(assert_horizon(&paper_sec7_spec(10.0)).is_ok());
    match assert_horizon(&paper_sec7_spec(30.0)) {
        Err(cct_core::error::EscapeError::HorizonInfeasible { escape_time, .. }) => {
            assert!((escape_time - 23.2911).abs() <= 2e-3);
        }
        other => panic!("expected HorizonInfeasible, got {other:?}"),
    }
}

#[test]
fn escape_time_never_grows_with_congestion_weight() {
    let mut prev = f64::INFINITY;
    for r_x in [0.5, 1.0, 2.0] {
        let spec = ProblemSpec::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, r_x),
            DMatrix::from_element(1, 1, 0.1),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 5.0),
            vec![DVector::from_element(1, 1.0)],
            0.5,
            InitialDistribution::UniformBox {
                lower: DVector::from_element(1, -1.0),
                upper: DVector::from_element(1, 1.0),
            },
        )
        .unwrap();
        let report = escape_time(&spec, EscapeOpts::default());
        assert!(
            report.escape_time <= prev + 1e-9,
            "escape grew with congestion: {} > {prev}",
            report.escape_time
        );
        prev = report.escape_time;
    }
    assert!(prev.is_finite());
}


