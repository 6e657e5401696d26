//! Stationary AR(1) dynamics and separable space-time precisions.
//!
//! Space-time vectors are stored time-major: entry `t * n + i` is node `i`
//! at time `t` (0-based).

use crate::error::{Error, Result};
use crate::sparse::CscMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ar1Params {
    pub a: f64,
    pub t: usize,
}

impl Ar1Params {
    pub fn new(a: f64, t: usize) -> Result<Self> {
        if !(a.abs() < 1.0) {
            return Err(Error::Input(format!("AR(1) coefficient must satisfy |a| < 1, got {a}")));
        }
        if t == 0 {
            return Err(Error::Input("AR(1) needs at least one time point".into()));
        }
        Ok(Self { a, t })
    }
}

/// Tridiagonal precision of a unit-variance stationary AR(1) process.
pub fn ar1_precision(params: &Ar1Params) -> Result<CscMatrix> {
    let Ar1Params { a, t } = Ar1Params::new(params.a, params.t)?;
    if t == 1 {
        return Ok(CscMatrix::identity(1));
    }
    let s = 1.0 / (1.0 - a * a);
    let mut trips = Vec::with_capacity(3 * t);
    for i in 0..t {
        let d = if i == 0 || i == t - 1 { 1.0 } else { 1.0 + a * a };
        trips.push((i, i, d * s));
        if i + 1 < t {
            trips.push((i, i + 1, -a * s));
            trips.push((i + 1, i, -a * s));
        }
    }
    Ok(CscMatrix::from_triplets(t, t, &trips))
}

/// `log det` of [`ar1_precision`].
pub fn ar1_log_det(a: f64, t: usize) -> f64 {
    -((t.max(1) - 1) as f64) * (1.0 - a * a).ln()
}

/// `Q_time ⊗ Q_space` in time-major layout.
pub fn kron_assemble(q_time: &CscMatrix, q_space: &CscMatrix) -> CscMatrix {
    q_time.kron(q_space)
}

/// `η₁ = μ₁`, `η_t = a η_{t−1} + √(1−a²) μ_t`.
pub fn simulate_ar1_path(spatial_samples: &[Vec<f64>], a: f64) -> Result<Vec<Vec<f64>>> {
    if !(a.abs() < 1.0) {
        return Err(Error::Input(format!("AR(1) coefficient must satisfy |a| < 1, got {a}")));
    }
    let scale = (1.0 - a * a).sqrt();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spatial_samples.len());
    for (t, mu) in spatial_samples.iter().enumerate() {
        let eta = match out.last() {
            None => mu.clone(),
            Some(prev) => {
                if prev.len() != mu.len() {
                    return Err(Error::Dimension(format!("innovation {t} has length {}, expected {}", mu.len(), prev.len())));
                }
                prev.iter().zip(mu).map(|(p, m)| a * p + scale * m).collect()
            }
        };
        out.push(eta);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dense(m: &CscMatrix) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, j, v) in m.iter() {
            d[(i, j)] += v;
        }
        d
    }

    #[test]
    fn zero_coefficient_gives_identity() {
        let q = ar1_precision(&Ar1Params::new(0.0, 5).unwrap()).unwrap();
        assert_eq!(dense(&q), DMatrix::identity(5, 5));
        assert!(Ar1Params::new(1.0, 3).is_err());
        assert!(Ar1Params::new(0.2, 0).is_err());
    }

    #[test]
    fn two_by_two_inverse() {
        let q = ar1_precision(&Ar1Params::new(0.5, 2).unwrap()).unwrap();
        let c = dense(&q).try_inverse().unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-14 && (c[(1, 1)] - 1.0).abs() < 1e-14);
        assert!((c[(0, 1)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn stationary_unit_marginals_and_log_det() {
        for &a in &[-0.9, -0.3, 0.0, 0.45, 0.8] {
            for t in 1..=10 {
                let q = dense(&ar1_precision(&Ar1Params::new(a, t).unwrap()).unwrap());
                let c = q.clone().try_inverse().unwrap();
                for i in 0..t {
                    assert!((c[(i, i)] - 1.0).abs() < 1e-10);
                    for j in 0..t {
                        let lag = (i as i32 - j as i32).unsigned_abs();
                        assert!((c[(i, j)] - a.powi(lag as i32)).abs() < 1e-10);
                    }
                }
                assert!((q.determinant().ln() - ar1_log_det(a, t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kron_inverse_equals_kron_of_inverses() {
        let qs = CscMatrix::from_triplets(
            4,
            4,
            &[(0, 0, 3.0), (1, 1, 2.5), (2, 2, 2.0), (3, 3, 4.0), (0, 1, -1.0), (1, 0, -1.0), (2, 3, 0.5), (3, 2, 0.5), (1, 3, -0.7), (3, 1, -0.7)],
        );
        let qt = ar1_precision(&Ar1Params::new(0.6, 3).unwrap()).unwrap();
        let qst = kron_assemble(&qt, &qs);
        let lhs = dense(&qst).try_inverse().unwrap();
        let rhs = dense(&qt).try_inverse().unwrap().kronecker(&dense(&qs).try_inverse().unwrap());
        assert!((&lhs - &rhs).abs().max() < 1e-10);
        // lag-1 covariance of a node with itself is a times lag-0
        for i in 0..4 {
            assert!((lhs[(4 + i, i)] - 0.6 * lhs[(i, i)]).abs() < 1e-10);
        }
        let block_diag = kron_assemble(&CscMatrix::identity(3), &qs);
        for (i, j, _) in block_diag.iter() {
            assert_eq!(i / 4, j / 4);
        }
    }

    #[test]
    fn sign_flip_negates_odd_lags() {
        let qs = CscMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 2.0), (0, 1, 0.5), (1, 0, 0.5)]);
        let p = dense(&kron_assemble(&ar1_precision(&Ar1Params::new(0.7, 4).unwrap()).unwrap(), &qs)).try_inverse().unwrap();
        let m = dense(&kron_assemble(&ar1_precision(&Ar1Params::new(-0.7, 4).unwrap()).unwrap(), &qs)).try_inverse().unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let lag = (i / 2usize).abs_diff(j / 2);
                let sign = if lag % 2 == 1 { -1.0 } else { 1.0 };
                assert!((m[(i, j)] - sign * p[(i, j)]).abs() < 1e-10);
            }
        }
    }

    fn innovations(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect()).collect()
    }

    #[test]
    fn path_identity_for_zero_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = innovations(&mut rng, 4, 3);
        assert_eq!(simulate_ar1_path(&mu, 0.0).unwrap(), mu);
        assert!(simulate_ar1_path(&mu, -1.0).is_err());
    }

    #[test]
    fn path_moments_match_precision() {
        // Monte Carlo: stationary variance, lag-1 correlation, and the full
        // covariance against the Kronecker precision
        let (n, t, a) = (3usize, 4usize, 0.6);
        let l_space = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 0.8, 0.0, -0.2, 0.3, 0.9]);
        let cov_space = &l_space * l_space.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let reps = 20_000;
        let dim = n * t;
        let mut emp = DMatrix::<f64>::zeros(dim, dim);
        let mut lag1 = 0.0;
        let mut var0 = 0.0;
        for _ in 0..reps {
            let z = innovations(&mut rng, t, n);
            let mu: Vec<Vec<f64>> = z.iter().map(|zz| (&l_space * DMatrix::from_column_slice(n, 1, zz)).column(0).iter().copied().collect()).collect();
            let eta = simulate_ar1_path(&mu, a).unwrap();
            let flat: Vec<f64> = eta.concat();
            for i in 0..dim {
                for j in 0..dim {
                    emp[(i, j)] += flat[i] * flat[j];
                }
            }
            lag1 += eta[t - 1][0] * eta[t - 2][0];
            var0 += eta[t - 1][0] * eta[t - 1][0];
        }
        emp /= reps as f64;
        let nd = reps as f64;
        assert!(((var0 / nd) / cov_space[(0, 0)] - 1.0).abs() < 0.05);
        assert!((lag1 / var0 - a).abs() < 0.05);
        let qs = cov_space.clone().try_inverse().unwrap();
        let mut trips = Vec::new();
        for i in 0..n {
            for j in 0..n {
                trips.push((i, j, qs[(i, j)]));
            }
        }
        let qst = kron_assemble(&ar1_precision(&Ar1Params::new(a, t).unwrap()).unwrap(), &CscMatrix::from_triplets(n, n, &trips));
        let cov = dense(&qst).try_inverse().unwrap();
        assert!((&emp - &cov).norm() / cov.norm() < 0.10);
    }
}
