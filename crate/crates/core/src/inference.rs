//! Hyperparameter inference: priors, exact Gaussian marginal likelihood,
//! simplex search for the posterior mode and grid integration around it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use faer::{Mat, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{ConditionalPosterior, FusionModel, GaussianSystem, HyperVector, ParamId};
use crate::sparse::CholeskyFactor;

/// Base model of the PC prior on an AR(1) coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ar1Base {
    /// Shrinks toward independence in time.
    Zero,
    /// Shrinks toward a random walk.
    One,
}

/// Prior on one hyperparameter. Noise priors are stated on the noise
/// standard deviation; `Fixed` values are on the reported scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorKind {
    /// `P(ρ < rho0) = alpha`
    PcRange { rho0: f64, alpha: f64 },
    /// `P(σ > sigma0) = alpha`
    PcSd { sigma0: f64, alpha: f64 },
    /// Base 0: `P(|a| > u) = alpha`; base 1: `P(a > u) = alpha`.
    PcAr1 { base: Ar1Base, u: f64, alpha: f64 },
    /// `ln x ~ N(mu, sd²)`
    LogNormal { mu: f64, sd: f64 },
    Normal { mean: f64, sd: f64 },
    Fixed { value: f64 },
}

impl PriorKind {
    pub fn validate(&self) -> Result<()> {
        let tail = |a: f64| a > 0.0 && a < 1.0;
        let ok = match *self {
            PriorKind::PcRange { rho0, alpha } => rho0 > 0.0 && rho0.is_finite() && tail(alpha),
            PriorKind::PcSd { sigma0, alpha } => sigma0 > 0.0 && sigma0.is_finite() && tail(alpha),
            PriorKind::PcAr1 { base, u, alpha } => {
                u.abs() < 1.0 && tail(alpha) && (base == Ar1Base::Zero && u > 0.0 || base == Ar1Base::One && pc_cor1_lambda(u, alpha).is_some())
            }
            PriorKind::LogNormal { mu, sd } | PriorKind::Normal { mean: mu, sd } => mu.is_finite() && sd > 0.0 && sd.is_finite(),
            PriorKind::Fixed { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior {self:?}")))
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, PriorKind::Fixed { .. })
    }

    /// Log density at `x`; `-inf` outside the support. `Fixed` contributes 0.
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            PriorKind::PcRange { rho0, alpha } => {
                if !(x > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let lambda = -alpha.ln() * rho0;
                lambda.ln() - 2.0 * x.ln() - lambda / x
            }
            PriorKind::PcSd { sigma0, alpha } => {
                if !(x >= 0.0) {
                    return f64::NEG_INFINITY;
                }
                let lambda = -alpha.ln() / sigma0;
                lambda.ln() - lambda * x
            }
            PriorKind::PcAr1 { base: Ar1Base::Zero, u, alpha } => {
                if !(x.abs() < 1.0) {
                    return f64::NEG_INFINITY;
                }
                let lambda = -alpha.ln() / (-(1.0 - u * u).ln()).sqrt();
                let d2 = -(1.0 - x * x).ln();
                // |a| / d(a) -> 1 as a -> 0
                let ratio = if d2 < 1e-12 { 1.0 } else { x.abs() / d2.sqrt() };
                (lambda / 2.0).ln() - lambda * d2.sqrt() + ratio.ln() - (1.0 - x * x).ln()
            }
            PriorKind::PcAr1 { base: Ar1Base::One, u, alpha } => {
                if !(x.abs() < 1.0) {
                    return f64::NEG_INFINITY;
                }
                let Some(lambda) = pc_cor1_lambda(u, alpha) else {
                    return f64::NEG_INFINITY;
                };
                let d = (1.0 - x).sqrt();
                let norm = 1.0 - (-lambda * 2f64.sqrt()).exp();
                lambda.ln() - lambda * d - (2.0 * d).ln() - norm.ln()
            }
            PriorKind::LogNormal { mu, sd } => {
                if !(x > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let z = (x.ln() - mu) / sd;
                -0.5 * z * z - x.ln() - sd.ln() - 0.5 * (2.0 * PI).ln()
            }
            PriorKind::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
            }
            PriorKind::Fixed { .. } => 0.0,
        }
    }
}

/// Rate of the base-1 PC prior solving `P(a > u) = alpha`.
fn pc_cor1_lambda(u: f64, alpha: f64) -> Option<f64> {
    let du = (1.0 - u).sqrt();
    let dmax = 2f64.sqrt();
    // P(a > u) = P(d < du) = (1 - e^{-λ du}) / (1 - e^{-λ √2}), rising from du/√2 toward 1
    let tail = |l: f64| (1.0 - (-l * du).exp()) / (1.0 - (-l * dmax).exp());
    if !(alpha > du / dmax && alpha < 1.0) {
        return None;
    }
    let (mut lo, mut hi) = (1e-10, 1.0);
    while tail(hi) < alpha {
        hi *= 2.0;
        if hi > 1e8 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Log density of a prior kind at `value`.
pub fn pc_prior_logdensity(kind: &PriorKind, value: f64) -> f64 {
    kind.log_density(value)
}

/// Priors for every hyperparameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub priors: BTreeMap<ParamId, PriorKind>,
}

impl PriorSpec {
    /// Data-scaled defaults: `P(ρ < 0.1·diag) = 0.05`, `P(σ > 2·sd_data) = 0.05`
    /// for field and noise sds, PC(0.8, 0.5) toward 0 for AR coefficients,
    /// `N(0, 10)` for β.
    pub fn defaults(model: &FusionModel) -> Self {
        let diag = model.mesh().interior_bbox().diagonal();
        let template = model.hyper_template(1.0, 1.0, 0.0, 1.0, 0.0);
        let mut priors = BTreeMap::new();
        for id in template.ids() {
            let data_sd = |k: usize| {
                let s = model.data_summary(k).1;
                if s.is_finite() && s > 0.0 { s } else { 1.0 }
            };
            let kind = match id {
                ParamId::Range(_) => PriorKind::PcRange { rho0: 0.1 * diag, alpha: 0.05 },
                ParamId::Sd(k) | ParamId::NoisePoint(k) | ParamId::NoiseGrid(k) => PriorKind::PcSd { sigma0: 2.0 * data_sd(k), alpha: 0.05 },
                ParamId::Ar(_) => PriorKind::PcAr1 { base: Ar1Base::Zero, u: 0.8, alpha: 0.5 },
                ParamId::Beta(_) => PriorKind::Normal { mean: 0.0, sd: 10f64.sqrt() },
            };
            priors.insert(id, kind);
        }
        Self { priors }
    }

    pub fn validate(&self) -> Result<()> {
        for (id, p) in &self.priors {
            p.validate().map_err(|e| Error::Config(format!("{}: {e}", id.name())))?;
        }
        Ok(())
    }

    /// Sum of log prior densities on the natural scale (no Jacobian).
    pub fn log_prior(&self, h: &HyperVector) -> f64 {
        h.ids().into_iter().map(|id| self.prior_of(id).map_or(f64::NEG_INFINITY, |p| p.log_density(prior_variable(id, h.get(id))))).sum()
    }

    /// Replaces priors by parameter name (`rho_1`, `tau2_p_3`, ...).
    pub fn apply_overrides(&mut self, overrides: &BTreeMap<String, PriorKind>) -> Result<()> {
        for (name, kind) in overrides {
            let id = self
                .priors
                .keys()
                .copied()
                .find(|id| id.name() == *name)
                .ok_or_else(|| Error::Config(format!("prior given for unknown parameter {name:?}")))?;
            kind.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
            self.priors.insert(id, *kind);
        }
        Ok(())
    }

    fn prior_of(&self, id: ParamId) -> Option<&PriorKind> {
        self.priors.get(&id)
    }
}

/// Variable a prior is stated on: the noise sd for noise variances.
fn prior_variable(id: ParamId, natural: f64) -> f64 {
    match id {
        ParamId::NoisePoint(_) | ParamId::NoiseGrid(_) => natural.sqrt(),
        _ => natural,
    }
}

/// Natural value to unconstrained transform space.
pub fn to_psi(id: ParamId, natural: f64) -> f64 {
    match id {
        ParamId::Range(_) | ParamId::Sd(_) | ParamId::NoisePoint(_) | ParamId::NoiseGrid(_) => natural.ln(),
        ParamId::Ar(_) => natural.atanh(),
        ParamId::Beta(_) => natural,
    }
}

pub fn from_psi(id: ParamId, psi: f64) -> f64 {
    match id {
        ParamId::Range(_) | ParamId::Sd(_) | ParamId::NoisePoint(_) | ParamId::NoiseGrid(_) => psi.exp(),
        ParamId::Ar(_) => psi.tanh(),
        ParamId::Beta(_) => psi,
    }
}

/// Reported-scale value (σ² for field sds) from transform space.
pub fn reported_from_psi(id: ParamId, psi: f64) -> f64 {
    match id {
        ParamId::Sd(_) => (2.0 * psi).exp(),
        _ => from_psi(id, psi),
    }
}

/// `ln |d prior-variable / dψ|`
fn log_jacobian(id: ParamId, natural: f64) -> f64 {
    match id {
        ParamId::Range(_) | ParamId::Sd(_) => natural.ln(),
        ParamId::NoisePoint(_) | ParamId::NoiseGrid(_) => 0.5 * natural.ln() - 2f64.ln(),
        ParamId::Ar(_) => (1.0 - natural * natural).ln(),
        ParamId::Beta(_) => 0.0,
    }
}

/// `log π(y | h)`, exact for the all-Gaussian model.
pub fn log_marginal_likelihood(model: &FusionModel, h: &HyperVector) -> Result<f64> {
    Ok(model.conditional(h)?.log_lik)
}

/// Log posterior kernel `log π(y | h) + log π(h)` on the natural scale;
/// `-inf` when the factorisation fails.
pub fn log_posterior(model: &FusionModel, priors: &PriorSpec, h: &HyperVector) -> f64 {
    match log_marginal_likelihood(model, h) {
        Ok(l) => l + priors.log_prior(h),
        Err(e) => {
            log::debug!("log posterior infeasible: {e}");
            f64::NEG_INFINITY
        }
    }
}

/// Log posterior as a function of the free parameters in transform space.
pub struct Objective<'a> {
    model: &'a FusionModel,
    priors: &'a PriorSpec,
    free: Vec<ParamId>,
    base: HyperVector,
}

impl<'a> Objective<'a> {
    /// `base` supplies the values of fixed parameters; its other entries
    /// are overwritten on evaluation.
    pub fn new(model: &'a FusionModel, priors: &'a PriorSpec, base: &HyperVector) -> Result<Self> {
        priors.validate()?;
        let mut base = base.clone();
        let mut free = Vec::new();
        for id in base.ids() {
            match priors.prior_of(id) {
                None => return Err(Error::Config(format!("no prior for hyperparameter {}", id.name()))),
                Some(PriorKind::Fixed { value }) => base.set_reported(id, *value),
                Some(_) => free.push(id),
            }
        }
        base.validate()?;
        Ok(Self { model, priors, free, base })
    }

    pub fn free(&self) -> &[ParamId] {
        &self.free
    }

    pub fn dim(&self) -> usize {
        self.free.len()
    }

    pub fn psi_of(&self, h: &HyperVector) -> Vec<f64> {
        self.free.iter().map(|&id| to_psi(id, h.get(id))).collect()
    }

    pub fn hyper_of(&self, psi: &[f64]) -> HyperVector {
        let mut h = self.base.clone();
        for (&id, &p) in self.free.iter().zip(psi) {
            h.set(id, from_psi(id, p));
        }
        h
    }

    /// Log posterior density of ψ (priors include the change of variables).
    pub fn eval(&self, psi: &[f64]) -> f64 {
        if psi.iter().any(|p| !p.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let h = self.hyper_of(psi);
        if h.validate().is_err() {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        for &id in &self.free {
            let v = h.get(id);
            lp += self.priors.priors[&id].log_density(prior_variable(id, v)) + log_jacobian(id, v);
        }
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.model.conditional(&h) {
            Ok(c) => lp + c.log_lik,
            Err(e) => {
                log::debug!("objective infeasible at {psi:?}: {e}");
                f64::NEG_INFINITY
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmOptions {
    pub max_evals: usize,
    pub xtol: f64,
    pub ftol: f64,
    pub initial_step: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        Self { max_evals: 4000, xtol: 1e-4, ftol: 1e-6, initial_step: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimises `f` with the adaptive Nelder–Mead simplex. Non-finite values
/// are treated as `+inf`. Converged when every vertex is within `xtol` of
/// the best one and the value spread is below `ftol`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &NmOptions) -> NmResult {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() { f64::INFINITY } else { v }
    };
    if n == 0 {
        let v = eval(x0, &mut evals);
        return NmResult { x: Vec::new(), f: v, evals, converged: true };
    }
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evals)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    let point = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> { c.iter().zip(w).map(|(ci, wi)| ci + t * (wi - ci)).collect() };
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if best.is_finite() && diameter < opts.xtol && worst - best < opts.ftol {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }
        let mut c = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (ci, xi) in c.iter_mut().zip(x) {
                *ci += xi / nf;
            }
        }
        let xw = simplex[n].0.clone();
        let xr = point(&c, &xw, -alpha);
        let fr = eval(&xr, &mut evals);
        if fr < best {
            let xe = point(&c, &xw, -alpha * gamma);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc, accept) = if fr < worst {
            let xc = point(&c, &xr, rho);
            let fc = eval(&xc, &mut evals);
            let ok = fc <= fr;
            (xc, fc, ok)
        } else {
            let xc = point(&c, &xw, rho);
            let fc = eval(&xc, &mut evals);
            let ok = fc < worst;
            (xc, fc, ok)
        };
        if accept {
            simplex[n] = (xc, fc);
            continue;
        }
        let x0 = simplex[0].0.clone();
        for (x, v) in simplex[1..].iter_mut() {
            *x = point(&x0, x, sigma);
            *v = eval(x, &mut evals);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    NmResult { x, f, evals, converged }
}

/// Hessian of `f` at `x` by finite differences with step `h`, using one
/// extra evaluation per off-diagonal pair. Evaluations run in parallel.
pub fn numerical_hessian<F: Fn(&[f64]) -> f64 + Sync>(f: F, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut pts: Vec<Vec<f64>> = vec![x.to_vec()];
    for i in 0..n {
        for s in [h, -h] {
            let mut p = x.to_vec();
            p[i] += s;
            pts.push(p);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let mut p = x.to_vec();
            p[i] += h;
            p[j] += h;
            pts.push(p);
        }
    }
    let vals: Vec<f64> = pts.par_iter().map(|p| f(p)).collect();
    let f0 = vals[0];
    let plus = |i: usize| vals[1 + 2 * i];
    let minus = |i: usize| vals[2 + 2 * i];
    let mut hess = vec![vec![0.0; n]; n];
    let mut q = 1 + 2 * n;
    for i in 0..n {
        hess[i][i] = (plus(i) - 2.0 * f0 + minus(i)) / (h * h);
        for j in 0..i {
            let v = (vals[q] - plus(i) - plus(j) + f0) / (h * h);
            hess[i][j] = v;
            hess[j][i] = v;
            q += 1;
        }
    }
    hess
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridDesign {
    /// Full factorial for dimension ≤ 6, central composite otherwise.
    Auto,
    Ccd,
    Factorial,
    /// Single point at the mode.
    Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceOptions {
    pub optimizer: NmOptions,
    pub hessian_step: f64,
    pub design: GridDesign,
    /// Radius inflation of the central composite design (must exceed 1).
    pub ccd_f: f64,
    pub compute_latent_sd: bool,
    /// Latent dimension up to which marginal variances use dense solves.
    pub dense_threshold: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            optimizer: NmOptions::default(),
            hessian_step: 0.02,
            design: GridDesign::Auto,
            ccd_f: 1.1,
            compute_latent_sd: true,
            dense_threshold: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeResult {
    pub hyper: HyperVector,
    pub psi: Vec<f64>,
    pub log_post: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Posterior mode of the hyperparameters by simplex search in transform
/// space, started from `init`.
pub fn optimize_mode(model: &FusionModel, priors: &PriorSpec, init: &HyperVector, opts: &NmOptions) -> Result<ModeResult> {
    let obj = Objective::new(model, priors, init)?;
    let x0 = obj.psi_of(init);
    let start = obj.eval(&x0);
    if !start.is_finite() {
        return Err(Error::Numerical("log posterior is not finite at the initial hyperparameters".into()));
    }
    let res = nelder_mead(|p| -obj.eval(p), &x0, opts);
    if !res.converged {
        log::warn!("mode search stopped after {} evaluations without meeting the tolerance", res.evals);
    }
    Ok(ModeResult { hyper: obj.hyper_of(&res.x), psi: res.x, log_post: -res.f, evals: res.evals, converged: res.converged })
}

/// Design points in standardised coordinates and their Gaussian weights.
pub fn design_points(design: GridDesign, d: usize, f: f64) -> Result<Vec<(Vec<f64>, f64)>> {
    let design = match design {
        GridDesign::Auto if d <= 6 => GridDesign::Factorial,
        GridDesign::Auto => GridDesign::Ccd,
        other => other,
    };
    if d == 0 {
        return Ok(vec![(Vec::new(), 1.0)]);
    }
    match design {
        GridDesign::Mode => Ok(vec![(vec![0.0; d], 1.0)]),
        GridDesign::Factorial => {
            if d > 10 {
                return Err(Error::Config(format!("full factorial design in {d} dimensions is too large")));
            }
            // three-point Gauss–Hermite rule per axis
            let nodes = [(-3f64.sqrt(), 1.0 / 6.0), (0.0, 2.0 / 3.0), (3f64.sqrt(), 1.0 / 6.0)];
            let mut pts = Vec::with_capacity(3usize.pow(d as u32));
            for idx in 0..3usize.pow(d as u32) {
                let mut z = Vec::with_capacity(d);
                let mut w = 1.0;
                let mut r = idx;
                for _ in 0..d {
                    let (x, wi) = nodes[r % 3];
                    z.push(x);
                    w *= wi;
                    r /= 3;
                }
                pts.push((z, w));
            }
            Ok(pts)
        }
        GridDesign::Ccd | GridDesign::Auto => {
            if !(f > 1.0) {
                return Err(Error::Config(format!("ccd_f must exceed 1, got {f}")));
            }
            let m = (d + 1).next_power_of_two();
            let mut pts = Vec::new();
            // Sylvester–Hadamard columns 1..=d: H[i][j] = (-1)^popcount(i & j)
            for i in 0..m {
                let z: Vec<f64> = (1..=d).map(|j| if (i & j).count_ones() % 2 == 0 { f } else { -f }).collect();
                pts.push(z);
            }
            let r = f * (d as f64).sqrt();
            for j in 0..d {
                for s in [r, -r] {
                    let mut z = vec![0.0; d];
                    z[j] = s;
                    pts.push(z);
                }
            }
            let w = 1.0 / (pts.len() as f64 * f * f);
            let mut out = vec![(vec![0.0; d], 1.0 - 1.0 / (f * f))];
            out.extend(pts.into_iter().map(|z| (z, w)));
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub z: Vec<f64>,
    pub psi: Vec<f64>,
    pub hyper: HyperVector,
    pub log_post: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Moments of the conditional Gaussian at one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMoments {
    pub mean: Vec<f64>,
    /// Latent marginal variances (empty when not computed).
    pub var: Vec<f64>,
    /// Marginal variances of the intercepts and fixed-effect coefficients.
    pub linear_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub mode: ModeResult,
    pub free: Vec<ParamId>,
    pub grid: Vec<GridPoint>,
    pub hessian_fallback: bool,
    pub hyper_summary: Vec<ParamSummary>,
    pub latent_mean: Vec<f64>,
    pub latent_sd: Option<Vec<f64>>,
    /// Intercepts then fixed-effect coefficients.
    pub linear: Vec<ParamSummary>,
    pub linear_sd: Vec<f64>,
    pub log_lik_mode: f64,
}

/// Mixture quantile by inverting the mixture CDF tabulated on 1000 points.
pub fn mixture_quantile(weights: &[f64], means: &[f64], sds: &[f64], p: f64) -> f64 {
    let std = Normal::standard();
    let lo = means.iter().zip(sds).map(|(m, s)| m - 8.0 * s).fold(f64::INFINITY, f64::min);
    let hi = means.iter().zip(sds).map(|(m, s)| m + 8.0 * s).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return lo;
    }
    let cdf = |x: f64| -> f64 {
        weights
            .iter()
            .zip(means.iter().zip(sds))
            .map(|(w, (m, s))| if *s > 0.0 { w * std.cdf((x - m) / s) } else if x >= *m { *w } else { 0.0 })
            .sum()
    };
    const N: usize = 1000;
    let step = (hi - lo) / (N - 1) as f64;
    let mut prev = (lo, cdf(lo));
    for i in 1..N {
        let x = lo + step * i as f64;
        let c = cdf(x);
        if c >= p {
            if c > prev.1 {
                return prev.0 + (p - prev.1) / (c - prev.1) * (x - prev.0);
            }
            return x;
        }
        prev = (x, c);
    }
    hi
}

/// Marginal variances of selected latent indices by unit-vector solves.
fn variances_by_solves(factor: &CholeskyFactor, idx: &[usize]) -> Vec<f64> {
    let dim = factor.dim();
    let rhs: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            e
        })
        .collect();
    factor.solve_columns(&rhs).iter().zip(idx).map(|(x, &i)| x[i]).collect()
}

/// Mean and marginal sds of `x | y, h` from an explicit system.
pub fn conditional_latent_posterior(system: &GaussianSystem, dense_threshold: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = system.q.nrows();
    if system.a.ncols() != dim || system.a.nrows() != system.d.len() || system.d.len() != system.y.len() {
        return Err(Error::Dimension("inconsistent Gaussian system".into()));
    }
    let dmat = crate::sparse::CscMatrix::diagonal(&system.d);
    let at = system.a.transpose();
    let qp = system.q.add_scaled(&at.matmul(&dmat).matmul(&system.a), 1.0);
    let factor = CholeskyFactor::new(&qp.lower_triangle())?;
    let dy: Vec<f64> = system.d.iter().zip(&system.y).map(|(d, y)| d * y).collect();
    let mut mean = at.matvec(&dy);
    factor.solve_in_place(&mut mean);
    let var = if dim <= dense_threshold {
        variances_by_solves(&factor, &(0..dim).collect::<Vec<_>>())
    } else {
        factor.lower_factor().selected_inverse().diagonal()
    };
    Ok((mean, var.into_iter().map(|v| v.max(0.0).sqrt()).collect()))
}

/// Summary of one grid point's conditional posterior.
pub fn point_moments(model: &FusionModel, cond: &ConditionalPosterior, latent_var: bool) -> PointMoments {
    let lin: Vec<usize> = (model.linear_offset()..model.dim()).collect();
    let linear_var = variances_by_solves(&cond.factor, &lin);
    let var = if latent_var { cond.factor.lower_factor().selected_inverse().diagonal() } else { Vec::new() };
    PointMoments { mean: cond.mean.clone(), var, linear_var }
}

/// Names of the linear parameters in latent order.
pub fn linear_names(model: &FusionModel) -> Vec<String> {
    let mut names: Vec<String> = (1..=model.n_fields()).map(|k| format!("alpha_{k}")).collect();
    names.extend(model.spec().fixed_effects.iter().enumerate().map(|(j, _)| format!("theta_{}", j + 1)));
    names
}

/// Grid exploration around the mode.
pub fn explore_grid(model: &FusionModel, priors: &PriorSpec, mode: &ModeResult, opts: &InferenceOptions) -> Result<FitResult> {
    explore_grid_with(model, priors, mode, opts, |_, _| ()).map(|(f, _)| f)
}

/// As [`explore_grid`], additionally calling `visit` with each grid point's
/// hyperparameters and conditional posterior; results come back in grid order.
pub fn explore_grid_with<R, F>(
    model: &FusionModel,
    priors: &PriorSpec,
    mode: &ModeResult,
    opts: &InferenceOptions,
    visit: F,
) -> Result<(FitResult, Vec<R>)>
where
    R: Send,
    F: Fn(&HyperVector, &ConditionalPosterior) -> R + Sync,
{
    let obj = Objective::new(model, priors, &mode.hyper)?;
    let d = obj.dim();
    let center = obj.psi_of(&mode.hyper);
    let lp0 = obj.eval(&center);
    if !lp0.is_finite() {
        return Err(Error::Numerical("log posterior is not finite at the mode".into()));
    }

    // ψ = mode + S z with S = L⁻ᵀ, where -∇²lp = L Lᵀ
    let mut hessian_fallback = false;
    let mut scale = vec![vec![0.0; d]; d];
    for (i, row) in scale.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let design = opts.design;
    if d > 0 && design != GridDesign::Mode {
        let hess = numerical_hessian(|p| obj.eval(p), &center, opts.hessian_step);
        let neg = Mat::<f64>::from_fn(d, d, |i, j| -hess[i][j]);
        match neg.llt(Side::Lower) {
            Ok(llt) if hess.iter().flatten().all(|v| v.is_finite()) => {
                let l = llt.L();
                for c in 0..d {
                    // solve Lᵀ s = e_c
                    let mut s = vec![0.0; d];
                    for i in (0..d).rev() {
                        let mut v = if i == c { 1.0 } else { 0.0 };
                        for k in i + 1..d {
                            v -= l[(k, i)] * s[k];
                        }
                        s[i] = v / l[(i, i)];
                    }
                    for i in 0..d {
                        scale[i][c] = s[i];
                    }
                }
            }
            _ => {
                log::warn!("hessian at the mode is not negative definite; using identity scaling for the grid");
                hessian_fallback = true;
            }
        }
    }

    let design_pts = design_points(design, d, opts.ccd_f)?;
    let evaluated: Vec<Option<(GridPoint, PointMoments, R)>> = design_pts
        .par_iter()
        .map(|(z, w)| {
            let psi: Vec<f64> = (0..d).map(|i| center[i] + (0..d).map(|j| scale[i][j] * z[j]).sum::<f64>()).collect();
            let lp = obj.eval(&psi);
            if !lp.is_finite() {
                return None;
            }
            let h = obj.hyper_of(&psi);
            let cond = model.conditional(&h).ok()?;
            let z2: f64 = z.iter().map(|v| v * v).sum();
            let weight = w * (lp - lp0 + 0.5 * z2).exp();
            let moments = point_moments(model, &cond, opts.compute_latent_sd);
            let r = visit(&h, &cond);
            Some((GridPoint { z: z.clone(), psi, hyper: h, log_post: lp, weight }, moments, r))
        })
        .collect();
    let kept = sort_and_normalise(evaluated.into_iter().flatten().collect())?;
    let (grid, rest): (Vec<GridPoint>, Vec<(PointMoments, R)>) = kept.into_iter().map(|(g, m, r)| (g, (m, r))).unzip();
    let (moments, results): (Vec<PointMoments>, Vec<R>) = rest.into_iter().unzip();
    let fit = combine(model, &obj, mode, grid, &moments, hessian_fallback, opts.compute_latent_sd)?;
    Ok((fit, results))
}

fn cmp_vec(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let c = x.total_cmp(y);
        if c != std::cmp::Ordering::Equal {
            return c;
        }
    }
    a.len().cmp(&b.len())
}

/// Puts grid points in a fixed order (by design coordinate) and normalises
/// the weights, so every later reduction is independent of evaluation order.
fn sort_and_normalise<R>(mut kept: Vec<(GridPoint, PointMoments, R)>) -> Result<Vec<(GridPoint, PointMoments, R)>> {
    if kept.is_empty() {
        return Err(Error::Numerical("no grid point has a finite log posterior".into()));
    }
    kept.sort_by(|a, b| cmp_vec(&a.0.z, &b.0.z));
    let total: f64 = kept.iter().map(|k| k.0.weight).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical("grid weights do not normalise".into()));
    }
    for k in kept.iter_mut() {
        k.0.weight /= total;
    }
    Ok(kept)
}

fn combine(
    model: &FusionModel,
    obj: &Objective,
    mode: &ModeResult,
    grid: Vec<GridPoint>,
    moments: &[PointMoments],
    hessian_fallback: bool,
    latent_sd: bool,
) -> Result<FitResult> {
    let dim = model.dim();
    let mut mean = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    for (g, m) in grid.iter().zip(moments) {
        for i in 0..dim {
            mean[i] += g.weight * m.mean[i];
            if latent_sd {
                second[i] += g.weight * (m.var[i] + m.mean[i] * m.mean[i]);
            }
        }
    }
    let latent_sd = latent_sd.then(|| (0..dim).map(|i| (second[i] - mean[i] * mean[i]).max(0.0).sqrt()).collect());

    let std = Normal::standard();
    let zq = std.inverse_cdf(0.975);
    let weights: Vec<f64> = grid.iter().map(|g| g.weight).collect();
    let mut hyper_summary = Vec::new();
    for id in mode.hyper.ids() {
        let name = id.name();
        match obj.free.iter().position(|&f| f == id) {
            Some(i) => {
                let m = grid.iter().map(|g| g.weight * g.psi[i]).sum::<f64>();
                let v = grid.iter().map(|g| g.weight * (g.psi[i] - m).powi(2)).sum::<f64>();
                let mean = grid.iter().map(|g| g.weight * g.hyper.reported(id)).sum::<f64>();
                let (a, b) = (reported_from_psi(id, m - zq * v.sqrt()), reported_from_psi(id, m + zq * v.sqrt()));
                hyper_summary.push(ParamSummary { name, mean, q025: a.min(b), q975: a.max(b) });
            }
            None => {
                let v = mode.hyper.reported(id);
                hyper_summary.push(ParamSummary { name, mean: v, q025: v, q975: v });
            }
        }
    }

    let lin0 = model.linear_offset();
    let mut linear = Vec::new();
    let mut linear_sd = Vec::new();
    for (j, name) in linear_names(model).into_iter().enumerate() {
        let means: Vec<f64> = moments.iter().map(|m| m.mean[lin0 + j]).collect();
        let sds: Vec<f64> = moments.iter().map(|m| m.linear_var[j].max(0.0).sqrt()).collect();
        let mu: f64 = weights.iter().zip(&means).map(|(w, m)| w * m).sum();
        let s2: f64 = weights.iter().zip(means.iter().zip(&sds)).map(|(w, (m, s))| w * (s * s + m * m)).sum::<f64>() - mu * mu;
        linear_sd.push(s2.max(0.0).sqrt());
        linear.push(ParamSummary {
            name,
            mean: mu,
            q025: mixture_quantile(&weights, &means, &sds, 0.025),
            q975: mixture_quantile(&weights, &means, &sds, 0.975),
        });
    }
    let log_lik_mode = log_marginal_likelihood(model, &mode.hyper)?;
    Ok(FitResult {
        mode: mode.clone(),
        free: obj.free.clone(),
        grid,
        hessian_fallback,
        hyper_summary,
        latent_mean: mean,
        latent_sd,
        linear,
        linear_sd,
        log_lik_mode,
    })
}

/// Starting hyperparameters scaled to the data: range a quarter of the
/// domain diagonal, field sd 0.7 of the data sd, noise variance a quarter
/// of the data variance, AR coefficient 0.5, β = 0.
pub fn initial_hyper(model: &FusionModel) -> HyperVector {
    let diag = model.mesh().interior_bbox().diagonal();
    let mut h = model.hyper_template(0.25 * diag, 1.0, 0.5, 1.0, 0.0);
    for k in 0..model.n_fields() {
        let s = model.data_summary(k).1;
        let s = if s.is_finite() && s > 0.0 { s } else { 1.0 };
        h.sd[k] = 0.7 * s;
        for slot in [&mut h.noise_point[k], &mut h.noise_grid[k]] {
            if slot.is_some() {
                *slot = Some(0.25 * s * s);
            }
        }
    }
    h
}

/// Mode search followed by grid exploration.
pub fn fit(model: &FusionModel, priors: &PriorSpec, init: &HyperVector, opts: &InferenceOptions) -> Result<FitResult> {
    let mode = optimize_mode(model, priors, init, &opts.optimizer)?;
    explore_grid(model, priors, &mode, opts)
}

impl FitResult {
    pub fn weights(&self) -> Vec<f64> {
        self.grid.iter().map(|g| g.weight).collect()
    }

    /// Hyperparameter and linear-parameter summaries: `param,mean,q025,q975`.
    pub fn write_summary<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["param", "mean", "q025", "q975"])?;
        for s in self.hyper_summary.iter().chain(&self.linear) {
            wr.write_record([s.name.clone(), fmt(s.mean), fmt(s.q025), fmt(s.q975)])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Latent field summaries: `field,node,time,mean,sd` (sd empty when not
    /// computed).
    pub fn write_latent<W: Write>(&self, model: &FusionModel, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["field", "node", "time", "mean", "sd"])?;
        for (k, f) in model.spec().fields.iter().enumerate() {
            for time in 1..=model.n_times() {
                for node in 0..model.n_nodes() {
                    let i = model.latent_index(k, time, node);
                    let sd = self.latent_sd.as_ref().map_or(String::new(), |s| fmt(s[i]));
                    wr.write_record([f.name.clone(), node.to_string(), time.to_string(), fmt(self.latent_mean[i]), sd])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Grid points with weights and reported-scale hyperparameters; read
    /// back by [`read_grid`].
    pub fn write_grid<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let ids = self.mode.hyper.ids();
        let mut header = vec!["point".to_string(), "weight".into(), "log_post".into()];
        header.extend(ids.iter().map(|id| id.name()));
        wr.write_record(&header)?;
        for (i, g) in self.grid.iter().enumerate() {
            let mut rec = vec![i.to_string(), fmt(g.weight), fmt(g.log_post)];
            rec.extend(ids.iter().map(|&id| fmt(g.hyper.reported(id))));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_metadata<W: Write>(&self, mut w: W, extra: &[(&str, String)]) -> Result<()> {
        for (k, v) in extra {
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w, "converged = {}", self.mode.converged)?;
        writeln!(w, "evaluations = {}", self.mode.evals)?;
        writeln!(w, "log_posterior_mode = {}", fmt(self.mode.log_post))?;
        writeln!(w, "log_marginal_likelihood_mode = {}", fmt(self.log_lik_mode))?;
        writeln!(w, "hessian_fallback = {}", self.hessian_fallback)?;
        writeln!(w, "grid_points = {}", self.grid.len())?;
        Ok(())
    }
}

/// Reads grid points written by [`FitResult::write_grid`] into weighted
/// hyperparameter vectors shaped like `template`.
pub fn read_grid<R: std::io::Read>(r: R, template: &HyperVector) -> Result<Vec<(HyperVector, f64)>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let mut cols = Vec::new();
    for id in template.ids() {
        let c = header
            .iter()
            .position(|h| h == id.name())
            .ok_or_else(|| Error::Input(format!("grid file lacks column {}", id.name())))?;
        cols.push((id, c));
    }
    let wcol = header.iter().position(|h| h == "weight").ok_or_else(|| Error::Input("grid file lacks column weight".into()))?;
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c).and_then(|s| s.trim().parse().ok()).ok_or_else(|| Error::Input(format!("grid file row {}: bad number", line + 2)))
        };
        let mut h = template.clone();
        for &(id, c) in &cols {
            h.set_reported(id, num(c)?);
        }
        h.validate()?;
        out.push((h, num(wcol)?));
    }
    if out.is_empty() {
        return Err(Error::Input("grid file has no points".into()));
    }
    Ok(out)
}

/// Shortest representation that round-trips.
pub(crate) fn fmt(v: f64) -> String {
    format!("{v}")
}
