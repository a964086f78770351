//! Dense linear-algebra helpers: Kronecker products, matrix exponential,
//! definiteness tests, and eigenvectors of real nonsymmetric matrices.

use nalgebra::{Complex, DMatrix, DVector};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
            }
        }
    }
    out
}

/// `(a + a^T) / 2`
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let at = a.transpose();
    *a += at;
    *a *= 0.5;
}

/// Largest absolute asymmetry `max |a_ij - a_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Matrix exponential by scaling-and-squaring with a [13/13] Pade
/// approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    const THETA_13: f64 = 5.371920351148152;
    #[rustfmt::skip]
    const B: [f64; 14] = [
        64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
        1187353796428800.0, 129060195264000.0, 10559470521600.0,
        670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
        960960.0, 16380.0, 182.0, 1.0,
    ];
    let n = a.nrows();
    let norm = a.iter().map(|x| x.abs()).fold(0.0f64, f64::max) * n as f64;
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as u32
    } else {
        0
    };
    let a = a / 2f64.powi(s as i32);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u_inner = &a6 * (&a6 * B[13] + &a4 * B[11] + &a2 * B[9])
        + &a6 * B[7]
        + &a4 * B[5]
        + &a2 * B[3]
        + &id * B[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * B[12] + &a4 * B[10] + &a2 * B[8])
        + &a6 * B[6]
        + &a4 * B[4]
        + &a2 * B[2]
        + &id * B[0];
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut r = lhs
        .lu()
        .solve(&rhs)
        .expect("Pade denominator is singular; matrix exponential failed");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// An eigenpair of a real matrix, possibly complex.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: Complex<f64>,
    pub vector: DVector<Complex<f64>>,
}

/// Eigenvalues and eigenvectors of a real square matrix, via the real Schur
/// eigenvalues plus shifted inverse iteration. Eigenvectors of a repeated
/// eigenvalue are orthogonalized against each other, so a full eigenspace is
/// recovered when the eigenvalue is non-defective.
pub fn eigenpairs(a: &DMatrix<f64>) -> Vec<EigenPair> {
    let n = a.nrows();
    let scale = a.iter().map(|x| x.abs()).fold(1.0f64, f64::max);
    let eigenvalues = a.clone().complex_eigenvalues();
    let ac = a.map(|x| Complex::new(x, 0.0));

    // Group approximately equal eigenvalues so repeated ones get independent
    // vectors.
    let tol = 1e-8 * scale;
    let mut groups: Vec<(Complex<f64>, usize)> = Vec::new();
    for ev in eigenvalues.iter() {
        match groups.iter_mut().find(|(v, _)| (v - ev).norm() <= tol) {
            Some((_, count)) => *count += 1,
            None => groups.push((*ev, 1)),
        }
    }

    let mut pairs = Vec::with_capacity(n);
    for (value, multiplicity) in groups {
        if value.im.abs() <= tol {
            // Real eigenvalue: iterate in real arithmetic so the eigenspace
            // basis comes out real even under multiplicity.
            let shifted = a - DMatrix::<f64>::identity(n, n) * (value.re + 1e-9 * scale);
            let lu = shifted.lu();
            let mut found: Vec<DVector<f64>> = Vec::new();
            for k in 0..multiplicity {
                let mut v = DVector::<f64>::from_fn(n, |i, _| {
                    0.5 + ((i * 2654435761 + k * 40503 + 12345) % 1000) as f64 / 1000.0
                });
                for _ in 0..20 {
                    let mut w = match lu.solve(&v) {
                        Some(w) => w,
                        None => break,
                    };
                    for prev in &found {
                        let proj = prev.dot(&w);
                        w -= prev * proj;
                    }
                    let nrm = w.norm();
                    if nrm == 0.0 {
                        break;
                    }
                    v = w / nrm;
                }
                if (a * &v - &v * value.re).norm() <= 1e-6 * scale {
                    found.push(v.clone());
                    pairs.push(EigenPair {
                        value: Complex::new(value.re, 0.0),
                        vector: v.map(|x| Complex::new(x, 0.0)),
                    });
                }
            }
            continue;
        }
        let shift = value + Complex::new(1e-9 * scale, 1e-9 * scale);
        let shifted = &ac - DMatrix::<Complex<f64>>::identity(n, n) * shift;
        let lu = shifted.lu();
        let mut found: Vec<DVector<Complex<f64>>> = Vec::new();
        for k in 0..multiplicity {
            // Deterministic start vector, different per repetition.
            let mut v = DVector::<Complex<f64>>::from_fn(n, |i, _| {
                let x = ((i * 2654435761 + k * 40503 + 12345) % 1000) as f64 / 1000.0;
                Complex::new(0.5 + x, 0.25 + x * x)
            });
            for _ in 0..20 {
                let mut w = match lu.solve(&v) {
                    Some(w) => w,
                    None => break,
                };
                for prev in &found {
                    let proj = prev.dotc(&w);
                    w -= prev * proj;
                }
                let nrm = w.norm();
                if nrm == 0.0 {
                    break;
                }
                v = w / Complex::new(nrm, 0.0);
            }
            let residual = (&ac * &v - &v * value).norm();
            if residual <= 1e-6 * scale {
                found.push(v.clone());
                pairs.push(EigenPair { value, vector: v });
            }
        }
    }
    pairs
}
