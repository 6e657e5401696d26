//! Matérn fields through the SPDE/GMRF representation (smoothness ν = 1).

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::geometry::FemMatrices;
use crate::sparse::{CholeskyFactor, CscMatrix, LowerFactor, SymbolicCholesky};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaternParams {
    pub range: f64,
    pub sd: f64,
    pub nu: f64,
}

impl MaternParams {
    pub fn new(range: f64, sd: f64, nu: f64) -> Result<Self> {
        if !(range > 0.0 && sd > 0.0 && nu > 0.0) || !(range.is_finite() && sd.is_finite() && nu.is_finite()) {
            return Err(Error::Input(format!("Matérn parameters must be positive (range {range}, sd {sd}, nu {nu})")));
        }
        Ok(Self { range, sd, nu })
    }

    pub fn kappa(&self) -> f64 {
        (8.0 * self.nu).sqrt() / self.range
    }
}

/// `κ = √(8ν) / ρ`
pub fn kappa_from_range(range: f64, nu: f64) -> Result<f64> {
    if !(range > 0.0 && nu > 0.0) {
        return Err(Error::Input(format!("range and smoothness must be positive, got {range}, {nu}")));
    }
    Ok((8.0 * nu).sqrt() / range)
}

/// Modified Bessel function of the second kind, `K_ν(x)` for `x > 0`, from
/// `∫₀^∞ exp(−x cosh t) cosh(νt) dt` by the trapezoidal rule (the integrand
/// decays doubly exponentially, so the rule converges geometrically).
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k needs x > 0");
    // integrand below e^-60 of its peak beyond t_max
    let t_max = ((60.0 + nu.abs() * 30.0) / x + 1.0).acosh().max(1.0) + 1.0;
    let h = 0.01;
    let n = (t_max / h).ceil() as usize;
    let mut s = 0.5 * (-x).exp();
    for i in 1..=n {
        let t = i as f64 * h;
        let v = (-x * t.cosh() + nu * t).exp() * 0.5 * (1.0 + (-2.0 * nu * t).exp());
        s += v;
        if v < 1e-300 {
            break;
        }
    }
    s * h
}

/// Matérn correlation at distance `d`.
pub fn matern_correlation(d: f64, params: &MaternParams) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let x = params.kappa() * d;
    if x > 700.0 {
        return 0.0;
    }
    let nu = params.nu;
    (2f64.powf(1.0 - nu) / gamma(nu) * x.powf(nu) * bessel_k(nu, x)).min(1.0)
}

/// Marginal variance of the SPDE solution, `Γ(ν) / (Γ(ν + d/2) (4π)^{d/2} κ^{2ν})`.
pub fn matern_marginal_variance(kappa: f64, nu: f64, d_dim: u32) -> Result<f64> {
    if d_dim != 2 {
        return Err(Error::Input(format!("only 2-D domains are supported, got dimension {d_dim}")));
    }
    if !(kappa > 0.0 && nu > 0.0) {
        return Err(Error::Input("kappa and nu must be positive".into()));
    }
    Ok(gamma(nu) / (gamma(nu + 1.0) * 4.0 * PI * kappa.powf(2.0 * nu)))
}

/// Precomputed pieces of `Q = (κ⁴C + 2κ²G + G C⁻¹ G) / (4πκ²σ²)` on a fixed
/// union pattern, so that precisions for new hyperparameters are cheap.
#[derive(Clone, Debug)]
pub struct SpdeBasis {
    pattern: CscMatrix,
    c_vals: Vec<f64>,
    g_vals: Vec<f64>,
    gcg_vals: Vec<f64>,
}

impl SpdeBasis {
    pub fn new(fem: &FemMatrices) -> Self {
        let cinv = CscMatrix::diagonal(&fem.c_diag.iter().map(|c| 1.0 / c).collect::<Vec<_>>());
        let gcg = fem.g.matmul(&cinv).matmul(&fem.g);
        // union pattern holding explicit zeros
        let mut pattern = gcg.add_scaled(&fem.g, 1.0).add_scaled(&fem.c, 1.0);
        pattern.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let spread = |m: &CscMatrix| {
            let mut out = vec![0.0; pattern.nnz()];
            for (i, j, v) in m.iter() {
                out[pattern.position(i, j).unwrap()] += v;
            }
            out
        };
        let c_vals = spread(&fem.c);
        let g_vals = spread(&fem.g);
        let gcg_vals = spread(&gcg);
        Self { pattern, c_vals, g_vals, gcg_vals }
    }

    pub fn dim(&self) -> usize {
        self.pattern.nrows()
    }

    /// Sparsity pattern shared by every precision built from this basis.
    pub fn pattern(&self) -> &CscMatrix {
        &self.pattern
    }

    /// Fills `out` (aligned with [`SpdeBasis::pattern`]) with the precision
    /// values for the given parameters.
    pub fn precision_values(&self, params: &MaternParams, out: &mut [f64]) -> Result<()> {
        if params.nu != 1.0 {
            return Err(Error::Input(format!("only smoothness nu = 1 is supported, got {}", params.nu)));
        }
        let k2 = params.kappa().powi(2);
        let scale = 1.0 / (4.0 * PI * k2 * params.sd * params.sd);
        for (p, o) in out.iter_mut().enumerate() {
            *o = scale * (k2 * k2 * self.c_vals[p] + 2.0 * k2 * self.g_vals[p] + self.gcg_vals[p]);
        }
        Ok(())
    }

    pub fn precision(&self, params: &MaternParams) -> Result<CscMatrix> {
        let mut q = self.pattern.clone();
        self.precision_values(params, q.values_mut())?;
        Ok(q)
    }
}

/// Sparse Matérn precision on a mesh.
#[derive(Clone, Debug)]
pub struct SpatialPrecision {
    pub q: CscMatrix,
    pub params: MaternParams,
}

impl SpatialPrecision {
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn factor(&self) -> Result<CholeskyFactor> {
        CholeskyFactor::new(&self.q.lower_triangle())
    }
}

pub fn build_precision(fem: &FemMatrices, params: &MaternParams) -> Result<SpatialPrecision> {
    let q = SpdeBasis::new(fem).precision(params)?;
    Ok(SpatialPrecision { q, params: *params })
}

/// Draws from `N(0, Q⁻¹)` by back substitution on the Cholesky factor.
#[derive(Clone, Debug)]
pub struct FieldSampler {
    factor: LowerFactor,
}

impl FieldSampler {
    pub fn new(q: &CscMatrix) -> Result<Self> {
        let lower = q.lower_triangle();
        let sym: Arc<SymbolicCholesky> = SymbolicCholesky::analyze(&lower)?;
        Ok(Self { factor: CholeskyFactor::factorize(&sym, &lower)?.lower_factor() })
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        self.factor.transpose_solve(&z)
    }
}

/// One field draw, deterministic in `seed`.
pub fn sample_field(prec: &SpatialPrecision, seed: u64) -> Result<Vec<f64>> {
    let sampler = FieldSampler::new(&prec.q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assemble_fem, build_structured_mesh, Point2, Rect};
    use nalgebra::DMatrix;

    fn dense(m: &CscMatrix) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, j, v) in m.iter() {
            d[(i, j)] += v;
        }
        d
    }

    #[test]
    fn kappa_examples() {
        assert!((kappa_from_range(8f64.sqrt(), 1.0).unwrap() - 1.0).abs() < 1e-15);
        let k1 = kappa_from_range(3.0, 1.0).unwrap();
        let k2 = kappa_from_range(6.0, 1.0).unwrap();
        assert!((k1 / k2 - 2.0).abs() < 1e-15);
        assert!(kappa_from_range(0.0, 1.0).is_err());
        assert!(kappa_from_range(1.0, -1.0).is_err());
    }

    #[test]
    fn bessel_matches_reference_values() {
        // reference values from scipy.special.kv
        let cases = [
            (1.0, 8f64.sqrt(), 0.049379908993704834),
            (1.0, 1.0, 0.6019072301972346),
            (1.0, 0.1, 9.853844780870606),
            (1.5, 1.3, 0.530017146474073),
            (2.3, 0.7, 5.975961761210585),
        ];
        for (nu, x, expect) in cases {
            let got = bessel_k(nu, x);
            assert!((got - expect).abs() < 1e-12 * expect, "K_{nu}({x}) = {got}, expected {expect}");
        }
    }

    #[test]
    fn matern_correlation_examples() {
        let p = MaternParams::new(2.0, 1.0, 1.0).unwrap();
        assert_eq!(matern_correlation(0.0, &p), 1.0);
        assert!((matern_correlation(2.0, &p) - 0.1396674740152931).abs() < 1e-10);
        // ν = 1/2 is the exponential covariance
        let h = MaternParams::new(1.7, 1.0, 0.5).unwrap();
        for i in 1..40 {
            let d = i as f64 * 0.1;
            let e = (-h.kappa() * d).exp();
            assert!((matern_correlation(d, &h) - e).abs() < 1e-10);
        }
        let mut prev = 1.0;
        for i in 1..200 {
            let c = matern_correlation(i as f64 * 0.05, &p);
            assert!(c < prev && c > 0.0);
            prev = c;
        }
    }

    #[test]
    fn marginal_variance_formula() {
        let v = matern_marginal_variance(1.0, 1.0, 2).unwrap();
        assert!((v - 1.0 / (4.0 * PI)).abs() < 1e-15);
        let v2 = matern_marginal_variance(2.0, 1.0, 2).unwrap();
        assert!((v / v2 - 4.0).abs() < 1e-12);
        assert!(matern_marginal_variance(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn unsupported_smoothness_rejected() {
        let mesh = build_structured_mesh(Rect::new(0.0, 1.0, 0.0, 1.0), 0.5, 0.0).unwrap();
        let fem = assemble_fem(&mesh);
        assert!(build_precision(&fem, &MaternParams::new(1.0, 1.0, 1.5).unwrap()).is_err());
    }

    fn test_mesh() -> (crate::geometry::Mesh, FemMatrices) {
        // 4×4 interior, range 2, buffer ρ, edge ρ/8
        let mesh = build_structured_mesh(Rect::new(0.0, 4.0, 0.0, 4.0), 0.25, 2.0).unwrap();
        let fem = assemble_fem(&mesh);
        (mesh, fem)
    }

    #[test]
    fn interior_variance_close_to_target_and_sd_homogeneity() {
        let (mesh, fem) = test_mesh();
        let p = MaternParams::new(2.0, 0.7, 1.0).unwrap();
        let prec = build_precision(&fem, &p).unwrap();
        assert!(prec.q.is_symmetric(1e-12));
        let var = prec.factor().unwrap().lower_factor().selected_inverse().diagonal();
        for i in mesh.interior_vertices() {
            assert!((var[i] / 0.49 - 1.0).abs() < 0.10, "node {i}: variance {}", var[i]);
        }
        // dense oracle: Q⁻¹ scales with sd²
        let small = build_structured_mesh(Rect::new(0.0, 2.0, 0.0, 2.0), 0.5, 0.5).unwrap();
        let sf = assemble_fem(&small);
        let a = dense(&build_precision(&sf, &MaternParams::new(1.0, 1.0, 1.0).unwrap()).unwrap().q)
            .try_inverse()
            .unwrap();
        let b = dense(&build_precision(&sf, &MaternParams::new(1.0, 3.0, 1.0).unwrap()).unwrap().q)
            .try_inverse()
            .unwrap();
        assert!((b - a.scale(9.0)).norm() < 1e-9 * a.norm());
    }

    #[test]
    fn sampling_is_deterministic_and_whitened() {
        let mesh = build_structured_mesh(Rect::new(0.0, 1.0, 0.0, 1.0), 0.5, 0.0).unwrap();
        let fem = assemble_fem(&mesh);
        let prec = build_precision(&fem, &MaternParams::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(sample_field(&prec, 11).unwrap(), sample_field(&prec, 11).unwrap());
        assert_ne!(sample_field(&prec, 11).unwrap(), sample_field(&prec, 12).unwrap());

        // L L^T = P Q P^T, so whitened draws are L^T P x; check via Q-norm:
        // E[x^T Q x] = n, and component variance of the whitened vector ~ 1
        let f = prec.factor().unwrap();
        let lf = f.lower_factor();
        let sampler = FieldSampler::new(&prec.q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = sampler.dim();
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let x = sampler.sample(&mut rng);
            let qx = prec.q.matvec(&x);
            acc += x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>();
        }
        let mean_quad = acc / draws as f64;
        assert!((mean_quad / n as f64 - 1.0).abs() < 0.05, "{mean_quad}");
        assert_eq!(lf.dim(), n);
    }

    #[test]
    fn sample_covariance_matches_dense_inverse() {
        let mesh = build_structured_mesh(Rect::new(0.0, 2.0, 0.0, 2.0), 0.5, 0.5).unwrap();
        let fem = assemble_fem(&mesh);
        let prec = build_precision(&fem, &MaternParams::new(1.5, 1.0, 1.0).unwrap()).unwrap();
        let cov = dense(&prec.q).try_inverse().unwrap();
        let n = prec.dim();
        let sampler = FieldSampler::new(&prec.q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000;
        let mut emp = DMatrix::<f64>::zeros(n, n);
        let mut mean = vec![0.0; n];
        for _ in 0..draws {
            let x = sampler.sample(&mut rng);
            for i in 0..n {
                mean[i] += x[i];
                for j in 0..n {
                    emp[(i, j)] += x[i] * x[j];
                }
            }
        }
        emp /= draws as f64;
        assert!((&emp - &cov).norm() / cov.norm() < 0.10);
        for i in 0..n {
            let m = mean[i] / draws as f64;
            assert!(m.abs() < 4.0 * cov[(i, i)].sqrt() / (draws as f64).sqrt(), "mean[{i}] = {m}");
        }
    }

    #[test]
    fn empirical_correlation_at_half_range() {
        let (mesh, fem) = test_mesh();
        let p = MaternParams::new(2.0, 1.0, 1.0).unwrap();
        let prec = build_precision(&fem, &p).unwrap();
        let sampler = FieldSampler::new(&prec.q).unwrap();
        let nearest = |p: Point2| (0..mesh.n_vertices()).min_by(|&i, &j| mesh.vertices()[i].distance(&p).total_cmp(&mesh.vertices()[j].distance(&p))).unwrap();
        let (ia, ib) = (nearest(Point2::new(1.5, 2.0)), nearest(Point2::new(2.5, 2.0)));
        assert!((mesh.vertices()[ia].distance(&mesh.vertices()[ib]) - 1.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let draws = 5000;
        for _ in 0..draws {
            let x = sampler.sample(&mut rng);
            sa += x[ia];
            sb += x[ib];
            sab += x[ia] * x[ib];
            saa += x[ia] * x[ia];
            sbb += x[ib] * x[ib];
        }
        let nd = draws as f64;
        let cov = sab / nd - sa * sb / nd / nd;
        let corr = cov / ((saa / nd - (sa / nd).powi(2)) * (sbb / nd - (sb / nd).powi(2))).sqrt();
        let expect = matern_correlation(1.0, &p);
        assert!((corr - expect).abs() < 0.05, "corr {corr} vs {expect}");
    }
}
