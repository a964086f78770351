//! Shared fixtures for unit tests.

use nalgebra::{DMatrix, DVector};

use crate::model::{InitialDistribution, ProblemSpec};

/// The two-destination planar instance used throughout the experiments:
/// integrator dynamics, strong terminal pull, congestion outweighing stress.
pub fn paper_sec7_spec(horizon: f64) -> ProblemSpec {
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
    .expect("reference spec is valid")
}

/// One-dimensional instance with everything scalar.
#[allow(clippy::too_many_arguments)]
pub fn scalar_spec(
    a: f64,
    b: f64,
    r_x: f64,
    r_d: f64,
    r_u: f64,
    m: f64,
    dests: &[f64],
    horizon: f64,
) -> ProblemSpec {
    ProblemSpec::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, b),
        DMatrix::from_element(1, 1, r_x),
        DMatrix::from_element(1, 1, r_d),
        DMatrix::from_element(1, 1, r_u),
        DMatrix::from_element(1, 1, m),
        dests.iter().map(|&d| DVector::from_element(1, d)).collect(),
        horizon,
        InitialDistribution::UniformBox {
            lower: DVector::from_element(1, -1.0),
            upper: DVector::from_element(1, 1.0),
        },
    )
    .unwrap()
}
