//! Synthetic replicates of the three-variable fusion design: two latent
//! covariate fields (one observed at sensors disjoint from the response's),
//! a response field, a linear trend, point sensors and gridded block means.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assemble_fem, build_structured_mesh, Mesh, Point2, Rect};
use crate::inference::{explore_grid_with, fmt, initial_hyper, optimize_mode, InferenceOptions, ParamSummary, PriorKind, PriorSpec};
use crate::model::{FieldSpec, FixedEffect, FusionModel, FusionModelSpec, HyperVector};
use crate::observation::{point_weights, write_blocks, write_points, BlockObs, NodeWeights, ObservationBatch, PointObs};
use crate::prediction::{combine_moments, target_moments, PredictionSurface, QuantileMethod};
use crate::spde::{FieldSampler, MaternParams, SpdeBasis};
use crate::temporal::simulate_ar1_path;

/// Generation settings. Defaults reproduce the reference design: true
/// values per variable `y1` (misaligned covariate), `y2` (aligned
/// covariate), `y3` (response).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Coefficient of the trend covariate in the response.
    pub theta: f64,
    /// Trend covariate `x = trend[0]·easting + trend[1]·northing`.
    pub trend: [f64; 2],
    pub range: Vec<f64>,
    /// Marginal variances of the latent fields.
    pub sigma2: Vec<f64>,
    pub ar: Vec<f64>,
    pub tau2_point: Vec<f64>,
    pub tau2_grid: Vec<f64>,
    /// `[xmin, xmax, ymin, ymax]`
    pub domain: [f64; 4],
    pub mesh_edge: f64,
    pub mesh_buffer: f64,
    pub t_total: usize,
    pub t_train: Vec<usize>,
    pub n_sensors_response: usize,
    pub n_sensors_misaligned: usize,
    /// Cells along easting and northing.
    pub grid_shape: [usize; 2],
    pub mc_points_per_cell: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.5, 0.8, 1.0],
            beta: vec![-0.3, -0.4],
            theta: -0.2,
            trend: [0.2, 0.3],
            range: vec![4.0, 3.0, 2.0],
            sigma2: vec![1.0, 0.5, 0.3],
            ar: vec![0.4, 0.5, 0.6],
            tau2_point: vec![0.09, 0.04, 0.01],
            tau2_grid: vec![0.25, 0.16, 0.09],
            domain: [0.0, 10.0, 0.0, 5.0],
            mesh_edge: 1.0,
            mesh_buffer: 1.0,
            t_total: 100,
            t_train: vec![3, 7, 10],
            n_sensors_response: 22,
            n_sensors_misaligned: 10,
            grid_shape: [10, 5],
            mc_points_per_cell: 2500,
            n_test: 20,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.alpha.len() != 3
            || self.beta.len() != 2
            || [&self.range, &self.sigma2, &self.ar, &self.tau2_point, &self.tau2_grid].iter().any(|v| v.len() != 3)
        {
            return bad("simulation parameters need 3 values per field (2 for beta)".into());
        }
        if self.range.iter().chain(&self.sigma2).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("ranges and variances must be positive".into());
        }
        if self.tau2_point.iter().chain(&self.tau2_grid).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("noise variances must be non-negative".into());
        }
        if self.ar.iter().any(|a| !(a.abs() < 1.0)) {
            return bad("AR coefficients must lie in (-1, 1)".into());
        }
        if !self.domain_rect().is_valid() {
            return bad(format!("invalid domain {:?}", self.domain));
        }
        if !(self.mesh_edge > 0.0) || !(self.mesh_buffer >= 0.0) {
            return bad("mesh_edge must be positive and mesh_buffer non-negative".into());
        }
        if self.t_total < 2 {
            return bad("t_total must be at least 2".into());
        }
        for &t in &self.t_train {
            if t == 0 || t >= self.t_total {
                return bad(format!("t_train value {t} must lie in 1..t_total (t_total = {})", self.t_total));
            }
        }
        if self.n_sensors_response == 0 || self.n_sensors_misaligned == 0 || self.n_test == 0 || self.mc_points_per_cell == 0 {
            return bad("sensor, test and Monte Carlo counts must be positive".into());
        }
        if self.grid_shape.contains(&0) {
            return bad("grid_shape must be positive".into());
        }
        Ok(())
    }

    pub fn domain_rect(&self) -> Rect {
        Rect::new(self.domain[0], self.domain[1], self.domain[2], self.domain[3])
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        build_structured_mesh(self.domain_rect(), self.mesh_edge, self.mesh_buffer)
    }

    pub fn trend_at(&self, p: &Point2) -> f64 {
        self.trend[0] * p.easting + self.trend[1] * p.northing
    }

    /// Grid cells in row-major order (easting fastest).
    pub fn cells(&self) -> Vec<Rect> {
        let d = self.domain_rect();
        let [nx, ny] = self.grid_shape;
        let (w, h) = (d.width() / nx as f64, d.height() / ny as f64);
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let x0 = d.xmin + w * i as f64;
                let y0 = d.ymin + h * j as f64;
                let x1 = if i + 1 == nx { d.xmax } else { x0 + w };
                let y1 = if j + 1 == ny { d.ymax } else { y0 + h };
                out.push(Rect::new(x0, x1, y0, y1));
            }
        }
        out
    }

    /// True value of a named parameter, if it has one.
    pub fn true_value(&self, name: &str) -> Option<f64> {
        let (head, idx) = name.rsplit_once('_')?;
        let k = idx.parse::<usize>().ok()?.checked_sub(1)?;
        let v = match head {
            "alpha" => self.alpha.get(k),
            "beta" => self.beta.get(k),
            "theta" if k == 0 => Some(&self.theta),
            "rho" => self.range.get(k),
            "sigma2" => self.sigma2.get(k),
            "a" => self.ar.get(k),
            "tau2_p" => self.tau2_point.get(k),
            "tau2_g" => self.tau2_grid.get(k),
            _ => None,
        };
        v.copied()
    }

    /// True hyperparameters in model form for a fitted scenario.
    pub fn true_hyper(&self, template: &HyperVector) -> HyperVector {
        let mut h = template.clone();
        for id in template.ids() {
            if let Some(v) = self.true_value(&id.name()) {
                h.set_reported(id, v);
            }
        }
        h
    }
}

/// Which observations a fitted model receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Sensor data only.
    PointOnly,
    /// Gridded data only.
    GridOnly,
    /// Sensors and grids for every variable.
    Joint,
    /// Sensors for every variable, grids for the response only.
    JointMissingGridCovariates,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::PointOnly => "point",
            Scenario::GridOnly => "grid",
            Scenario::Joint => "joint",
            Scenario::JointMissingGridCovariates => "joint_missing_grid_covariates",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Scenario::PointOnly, Scenario::GridOnly, Scenario::Joint, Scenario::JointMissingGridCovariates].into_iter().find(|m| m.name() == s)
    }

    fn keeps_point(&self, _variable: usize) -> bool {
        !matches!(self, Scenario::GridOnly)
    }

    fn keeps_block(&self, variable: usize) -> bool {
        match self {
            Scenario::PointOnly => false,
            Scenario::GridOnly | Scenario::Joint => true,
            Scenario::JointMissingGridCovariates => variable == 3,
        }
    }
}

/// Full generated series of one replicate. Days are 1-based; observations
/// exist for days `1..t_total`, and day `t_total` is the forecast day.
#[derive(Clone, Debug)]
pub struct Replicate {
    pub cfg: SimConfig,
    pub mesh: Arc<Mesh>,
    pub sensors_response: Vec<Point2>,
    pub sensors_misaligned: Vec<Point2>,
    pub test_locations: Vec<Point2>,
    pub cells: Vec<Rect>,
    /// `fields[k][day - 1][node]`
    pub fields: Vec<Vec<Vec<f64>>>,
    pub points: Vec<PointObs>,
    pub blocks: Vec<BlockObs>,
}

/// Training data and test targets for one window and scenario.
#[derive(Clone, Debug)]
pub struct SimDataset {
    pub observations: ObservationBatch,
    pub t: usize,
    /// Day of model time 1.
    pub first_day: usize,
    pub test_locations: Vec<Point2>,
    /// Noise-free response predictor on the last training day (model time `t`).
    pub truth_last: Vec<f64>,
    /// Same on the following day (model time `t + 1`).
    pub truth_forecast: Vec<f64>,
}

/// Seed of replicate `index`, distinct for distinct indices.
pub fn replicate_seed(base: u64, index: usize) -> u64 {
    // splitmix64 finaliser, a bijection on u64
    let mut z = base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform_point<R: Rng>(rng: &mut R, d: &Rect) -> Point2 {
    Point2::new(rng.random_range(d.xmin..d.xmax), rng.random_range(d.ymin..d.ymax))
}

fn distinct_points<R: Rng>(rng: &mut R, d: &Rect, n: usize, avoid: &[Point2]) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::with_capacity(n);
    while out.len() < n {
        let p = uniform_point(rng, d);
        if !avoid.contains(&p) && !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn dot(w: &NodeWeights, field: &[f64]) -> f64 {
    w.iter().map(|&(v, c)| c * field[v]).sum()
}

/// Generates the full series of one replicate.
pub fn generate_replicate(cfg: &SimConfig, replicate_seed: u64) -> Result<Replicate> {
    cfg.validate()?;
    let mesh = Arc::new(cfg.build_mesh()?);
    let domain = cfg.domain_rect();
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed);

    let sensors_response = distinct_points(&mut rng, &domain, cfg.n_sensors_response, &[]);
    let sensors_misaligned = distinct_points(&mut rng, &domain, cfg.n_sensors_misaligned, &sensors_response);
    let taken: Vec<Point2> = sensors_response.iter().chain(&sensors_misaligned).copied().collect();
    let test_locations = distinct_points(&mut rng, &domain, cfg.n_test, &taken);

    // Monte Carlo cell means are linear in the nodal values, so the
    // averaged interpolation weights are computed once per cell.
    let cells = cfg.cells();
    let mut cell_weights: Vec<NodeWeights> = Vec::with_capacity(cells.len());
    let mut cell_trend = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut acc = vec![0.0; mesh.n_vertices()];
        let mut x = 0.0;
        let inv = 1.0 / cfg.mc_points_per_cell as f64;
        for _ in 0..cfg.mc_points_per_cell {
            let p = uniform_point(&mut rng, cell);
            for (v, w) in point_weights(&mesh, &p)? {
                acc[v] += w * inv;
            }
            x += cfg.trend_at(&p) * inv;
        }
        cell_weights.push(acc.into_iter().enumerate().filter(|&(_, w)| w != 0.0).collect());
        cell_trend.push(x);
    }

    let fem = assemble_fem(&mesh);
    let basis = SpdeBasis::new(&fem);
    let mut fields = Vec::with_capacity(3);
    for k in 0..3 {
        let params = MaternParams::new(cfg.range[k], cfg.sigma2[k].sqrt(), 1.0)?;
        let sampler = FieldSampler::new(&basis.precision(&params)?)?;
        let innovations: Vec<Vec<f64>> = (0..cfg.t_total).map(|_| sampler.sample(&mut rng)).collect();
        fields.push(simulate_ar1_path(&innovations, cfg.ar[k])?);
    }

    let sensor_w: Vec<NodeWeights> = sensors_response.iter().map(|p| point_weights(&mesh, p)).collect::<Result<_>>()?;
    let mis_w: Vec<NodeWeights> = sensors_misaligned.iter().map(|p| point_weights(&mesh, p)).collect::<Result<_>>()?;
    let mut points = Vec::new();
    let mut blocks = Vec::new();
    let noise = |rng: &mut ChaCha8Rng, var: f64| -> f64 { var.sqrt() * rng.sample::<f64, _>(StandardNormal) };
    for day in 1..cfg.t_total {
        let eta = |k: usize, w: &NodeWeights| dot(w, &fields[k][day - 1]);
        let response = |w: &NodeWeights, x: f64| cfg.alpha[2] + cfg.theta * x + cfg.beta[0] * eta(0, w) + cfg.beta[1] * eta(1, w) + eta(2, w);
        for (p, w) in sensors_misaligned.iter().zip(&mis_w) {
            let value = cfg.alpha[0] + eta(0, w) + noise(&mut rng, cfg.tau2_point[0]);
            points.push(PointObs { variable: 1, location: *p, time: day, value });
        }
        for (p, w) in sensors_response.iter().zip(&sensor_w) {
            let value = cfg.alpha[1] + eta(1, w) + noise(&mut rng, cfg.tau2_point[1]);
            points.push(PointObs { variable: 2, location: *p, time: day, value });
        }
        for (p, w) in sensors_response.iter().zip(&sensor_w) {
            let value = response(w, cfg.trend_at(p)) + noise(&mut rng, cfg.tau2_point[2]);
            points.push(PointObs { variable: 3, location: *p, time: day, value });
        }
        for var in 1..=3 {
            for (c, (cell, w)) in cells.iter().zip(&cell_weights).enumerate() {
                let mean = if var == 3 { response(w, cell_trend[c]) } else { cfg.alpha[var - 1] + eta(var - 1, w) };
                let value = mean + noise(&mut rng, cfg.tau2_grid[var - 1]);
                blocks.push(BlockObs { variable: var, cell: *cell, time: day, value });
            }
        }
    }

    Ok(Replicate { cfg: cfg.clone(), mesh, sensors_response, sensors_misaligned, test_locations, cells, fields, points, blocks })
}

pub fn variable_names() -> BTreeMap<usize, String> {
    (1..=3).map(|k| (k, format!("y{k}"))).collect()
}

impl Replicate {
    /// Noise-free response predictor at `p` on `day`.
    pub fn truth(&self, p: &Point2, day: usize) -> Result<f64> {
        let w = point_weights(&self.mesh, p)?;
        let c = &self.cfg;
        let eta = |k: usize| dot(&w, &self.fields[k][day - 1]);
        Ok(c.alpha[2] + c.theta * c.trend_at(p) + c.beta[0] * eta(0) + c.beta[1] * eta(1) + eta(2))
    }

    /// Training window of `t` days ending the day before `t_total`.
    pub fn window(&self, t: usize, scenario: Scenario) -> Result<SimDataset> {
        let total = self.cfg.t_total;
        if t == 0 || t >= total {
            return Err(Error::Input(format!("window length {t} must lie in 1..{total}")));
        }
        let first_day = total - t;
        let in_window = |day: usize| day >= first_day && day < total;
        let points = self
            .points
            .iter()
            .filter(|p| in_window(p.time) && scenario.keeps_point(p.variable))
            .map(|p| PointObs { time: p.time - first_day + 1, ..*p })
            .collect();
        let blocks = self
            .blocks
            .iter()
            .filter(|b| in_window(b.time) && scenario.keeps_block(b.variable))
            .map(|b| BlockObs { time: b.time - first_day + 1, ..*b })
            .collect();
        let truth_last = self.test_locations.iter().map(|p| self.truth(p, total - 1)).collect::<Result<_>>()?;
        let truth_forecast = self.test_locations.iter().map(|p| self.truth(p, total)).collect::<Result<_>>()?;
        Ok(SimDataset {
            observations: ObservationBatch { points, blocks, variable_names: variable_names() },
            t,
            first_day,
            test_locations: self.test_locations.clone(),
            truth_last,
            truth_forecast,
        })
    }
}

impl SimDataset {
    /// Model specification on the replicate mesh with the trend covariate.
    pub fn model_spec(&self, rep: &Replicate) -> FusionModelSpec {
        FusionModelSpec {
            mesh: Arc::clone(&rep.mesh),
            fields: (1..=3).map(|k| FieldSpec { name: format!("y{k}") }).collect(),
            fixed_effects: vec![FixedEffect::trend("trend", rep.cfg.trend[0], rep.cfg.trend[1])],
            observations: self.observations.clone(),
            t: self.t,
            linear_prior_variance: 10.0,
            block_fallback: true,
        }
    }
}

/// Root mean squared prediction error.
pub fn rmspe(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::Input(format!(
            "rmspe needs equal non-empty inputs, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    let ss: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / predictions.len() as f64).sqrt())
}


/// Settings of a replicate study beyond data generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyOptions {
    pub n_replicates: usize,
    pub models: Vec<Scenario>,
    /// Parameter tables cover windows up to this length; longer windows
    /// appear in the RMSPE output only.
    pub param_table_max_t: usize,
    pub inference: InferenceOptions,
    /// Prior overrides by parameter name, applied on top of the data-scaled defaults.
    pub priors: BTreeMap<String, PriorKind>,
    pub gaussian_quantiles: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            n_replicates: 30,
            models: vec![Scenario::PointOnly, Scenario::GridOnly, Scenario::Joint],
            param_table_max_t: 10,
            inference: InferenceOptions { compute_latent_sd: false, ..Default::default() },
            priors: BTreeMap::new(),
            gaussian_quantiles: false,
        }
    }
}

/// Test-point scores of one fit for one prediction day.
#[derive(Clone, Debug, PartialEq)]
pub struct TestScore {
    pub rmspe: f64,
    /// Test points inside their 95% interval.
    pub covered: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub params: Vec<ParamSummary>,
    pub last_day: TestScore,
    pub one_day_ahead: TestScore,
    pub converged: bool,
    pub hessian_fallback: bool,
    pub evals: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateFit {
    pub replicate: usize,
    pub model: Scenario,
    pub t: usize,
    /// Error message when the fit failed.
    pub outcome: std::result::Result<FitOutcome, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub param: String,
    pub model: Scenario,
    pub t: usize,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    /// Empty when the parameter has no true value.
    pub rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyReport {
    pub fits: Vec<ReplicateFit>,
    pub params: Vec<ParamRow>,
}

fn score(surface: &PredictionSurface, truths: &[f64]) -> Result<TestScore> {
    let covered = (0..truths.len()).filter(|&i| surface.q025[i] <= truths[i] && truths[i] <= surface.q975[i]).count();
    Ok(TestScore { rmspe: rmspe(&surface.mean, truths)?, covered, n: truths.len() })
}

/// Fits one scenario on one window and scores both test days.
pub fn fit_window(rep: &Replicate, t: usize, model_kind: Scenario, opts: &StudyOptions) -> Result<FitOutcome> {
    let ds = rep.window(t, model_kind)?;
    let model = FusionModel::new(ds.model_spec(rep))?;
    let mut priors = PriorSpec::defaults(&model);
    priors.apply_overrides(&opts.priors)?;
    let init = initial_hyper(&model);
    let mode = optimize_mode(&model, &priors, &init, &opts.inference.optimizer)?;
    let last: Vec<(Point2, usize)> = ds.test_locations.iter().map(|p| (*p, t)).collect();
    let next: Vec<(Point2, usize)> = ds.test_locations.iter().map(|p| (*p, t + 1)).collect();
    let targets: Vec<(Point2, usize)> = last.iter().chain(&next).copied().collect();
    let (fit, moments) = explore_grid_with(&model, &priors, &mode, &opts.inference, |h, cond| target_moments(&model, h, cond, &targets))?;
    let moments: Vec<Vec<(f64, f64)>> = moments.into_iter().collect::<Result<_>>()?;
    let n = last.len();
    let split = |range: std::ops::Range<usize>| -> Vec<Vec<(f64, f64)>> { moments.iter().map(|m| m[range.clone()].to_vec()).collect() };
    let method = if opts.gaussian_quantiles { QuantileMethod::Gaussian } else { QuantileMethod::Mixture };
    let weights = fit.weights();
    let s_last = combine_moments(&weights, &split(0..n), &last, method);
    let s_next = combine_moments(&weights, &split(n..2 * n), &next, method);
    Ok(FitOutcome {
        params: fit.hyper_summary.iter().chain(&fit.linear).cloned().collect(),
        last_day: score(&s_last, &ds.truth_last)?,
        one_day_ahead: score(&s_next, &ds.truth_forecast)?,
        converged: fit.mode.converged,
        hessian_fallback: fit.hessian_fallback,
        evals: fit.mode.evals,
    })
}

/// Generates `n_replicates` replicates and fits every model on every
/// training window. Failed fits are kept in the report with their error
/// and left out of the parameter table.
pub fn run_study(cfg: &SimConfig, opts: &StudyOptions) -> Result<StudyReport> {
    run_study_with(cfg, opts, |_, _| Ok(()))
}

/// As [`run_study`], calling `on_replicate` with each generated replicate
/// before it is fitted.
pub fn run_study_with<F>(cfg: &SimConfig, opts: &StudyOptions, on_replicate: F) -> Result<StudyReport>
where
    F: Fn(usize, &Replicate) -> Result<()> + Sync,
{
    cfg.validate()?;
    if opts.n_replicates == 0 {
        return Err(Error::Config("n_replicates must be at least 1".into()));
    }
    if opts.models.is_empty() {
        return Err(Error::Config("the study needs at least one model".into()));
    }
    let replicates: Vec<Replicate> = (0..opts.n_replicates)
        .into_par_iter()
        .map(|r| {
            let rep = generate_replicate(cfg, replicate_seed(cfg.seed, r))?;
            on_replicate(r, &rep)?;
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    let mut windows = cfg.t_train.clone();
    windows.sort_unstable();
    windows.dedup();
    let mut jobs: Vec<(usize, Scenario, usize)> = Vec::new();
    for r in 0..opts.n_replicates {
        for &m in &opts.models {
            jobs.extend(windows.iter().map(|&t| (r, m, t)));
        }
    }
    let fits: Vec<ReplicateFit> = jobs
        .into_par_iter()
        .map(|(r, m, t)| {
            let outcome = fit_window(&replicates[r], t, m, opts).map_err(|e| e.to_string());
            match &outcome {
                Ok(o) => log::info!("replicate {r} {} t={t}: rmspe {:.4} / {:.4}, {} evals", m.name(), o.last_day.rmspe, o.one_day_ahead.rmspe, o.evals),
                Err(e) => log::warn!("replicate {r} {} t={t} failed: {e}", m.name()),
            }
            ReplicateFit { replicate: r, model: m, t, outcome }
        })
        .collect();
    let params = aggregate_params(cfg, opts, &fits);
    Ok(StudyReport { fits, params })
}

fn aggregate_params(cfg: &SimConfig, opts: &StudyOptions, fits: &[ReplicateFit]) -> Vec<ParamRow> {
    let mut keys: Vec<(Scenario, usize)> = fits.iter().map(|f| (f.model, f.t)).collect();
    keys.sort_by_key(|&(m, t)| (opts.models.iter().position(|&x| x == m), t));
    keys.dedup();
    let mut rows = Vec::new();
    for (model, t) in keys {
        if t > opts.param_table_max_t {
            continue;
        }
        let ok: Vec<&FitOutcome> = fits.iter().filter(|f| f.model == model && f.t == t).filter_map(|f| f.outcome.as_ref().ok()).collect();
        let Some(first) = ok.first() else { continue };
        for (j, p) in first.params.iter().enumerate() {
            let vals: Vec<&ParamSummary> = ok.iter().filter_map(|o| o.params.get(j)).filter(|q| q.name == p.name).collect();
            let n = vals.len() as f64;
            let avg = |f: &dyn Fn(&ParamSummary) -> f64| vals.iter().map(|q| f(q)).sum::<f64>() / n;
            let rmse = cfg.true_value(&p.name).map(|truth| avg(&|q| (q.mean - truth).powi(2)).sqrt());
            rows.push(ParamRow { param: p.name.clone(), model, t, mean: avg(&|q| q.mean), q025: avg(&|q| q.q025), q975: avg(&|q| q.q975), rmse });
        }
    }
    rows
}

impl StudyReport {
    /// `param,model,t,mean,q025,q975,rmse`
    pub fn write_params<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["param", "model", "t", "mean", "q025", "q975", "rmse"])?;
        for r in &self.params {
            wr.write_record([
                r.param.clone(),
                r.model.name().to_string(),
                r.t.to_string(),
                fmt(r.mean),
                fmt(r.q025),
                fmt(r.q975),
                r.rmse.map(fmt).unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// `replicate,model,t,scenario,rmspe`; scenario is `last_day` or `one_day_ahead`.
    pub fn write_rmspe<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["replicate", "model", "t", "scenario", "rmspe"])?;
        for f in &self.fits {
            if let Ok(o) = &f.outcome {
                for (name, s) in [("last_day", &o.last_day), ("one_day_ahead", &o.one_day_ahead)] {
                    wr.write_record([f.replicate.to_string(), f.model.name().to_string(), f.t.to_string(), name.to_string(), fmt(s.rmspe)])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn failures(&self) -> Vec<&ReplicateFit> {
        self.fits.iter().filter(|f| f.outcome.is_err()).collect()
    }

    /// Pooled 95% interval coverage over successful fits of `model`, or
    /// every model when `None`.
    pub fn coverage(&self, model: Option<Scenario>) -> Option<f64> {
        let (mut hit, mut n) = (0, 0);
        for f in self.fits.iter().filter(|f| model.is_none_or(|m| m == f.model)) {
            if let Ok(o) = &f.outcome {
                for s in [&o.last_day, &o.one_day_ahead] {
                    hit += s.covered;
                    n += s.n;
                }
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    }

    /// Plain-text summary: failures, convergence and coverage per model and window.
    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        let mut keys: Vec<(Scenario, usize)> = self.fits.iter().map(|f| (f.model, f.t)).collect();
        keys.sort();
        keys.dedup();
        writeln!(w, "fits {}", self.fits.len())?;
        writeln!(w, "failed {}", self.failures().len())?;
        for (m, t) in keys {
            let group: Vec<&ReplicateFit> = self.fits.iter().filter(|f| f.model == m && f.t == t).collect();
            let ok: Vec<&FitOutcome> = group.iter().filter_map(|f| f.outcome.as_ref().ok()).collect();
            let unconverged = ok.iter().filter(|o| !o.converged).count();
            let fallback = ok.iter().filter(|o| o.hessian_fallback).count();
            let cov = |sel: &dyn Fn(&FitOutcome) -> &TestScore| {
                let (h, n) = ok.iter().fold((0, 0), |(h, n), o| (h + sel(o).covered, n + sel(o).n));
                if n == 0 { String::new() } else { fmt(h as f64 / n as f64) }
            };
            writeln!(
                w,
                "{} t={t}: ok {} failed {} unconverged {unconverged} hessian_fallback {fallback} coverage_last_day {} coverage_one_day_ahead {}",
                m.name(),
                ok.len(),
                group.len() - ok.len(),
                cov(&|o| &o.last_day),
                cov(&|o| &o.one_day_ahead)
            )?;
        }
        for f in self.failures() {
            if let Err(e) = &f.outcome {
                writeln!(w, "failure replicate {} {} t={}: {e}", f.replicate, f.model.name(), f.t)?;
            }
        }
        Ok(())
    }
}

/// Writes the observations, test design and latent fields of a replicate
/// into `dir` (created if needed).
pub fn dump_replicate(dir: &Path, rep: &Replicate) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let names = variable_names();
    write_points(std::fs::File::create(dir.join("points.csv"))?, &rep.points, &names)?;
    write_blocks(std::fs::File::create(dir.join("blocks.csv"))?, &rep.blocks, &names)?;
    let mut wr = csv::Writer::from_path(dir.join("test_locations.csv"))?;
    wr.write_record(["easting", "northing", "truth_day_before_last", "truth_last"])?;
    let total = rep.cfg.t_total;
    for p in &rep.test_locations {
        wr.write_record([fmt(p.easting), fmt(p.northing), fmt(rep.truth(p, total - 1)?), fmt(rep.truth(p, total)?)])?;
    }
    wr.flush()?;
    let mut wr = csv::Writer::from_path(dir.join("fields.csv"))?;
    wr.write_record(["field", "node", "day", "value"])?;
    for (k, days) in rep.fields.iter().enumerate() {
        for (d, vals) in days.iter().enumerate() {
            for (node, v) in vals.iter().enumerate() {
                wr.write_record([format!("y{}", k + 1), node.to_string(), (d + 1).to_string(), fmt(*v)])?;
            }
        }
    }
    wr.flush()?;
    let mut wr = csv::Writer::from_path(dir.join("nodes.csv"))?;
    wr.write_record(["node", "easting", "northing"])?;
    for (i, v) in rep.mesh.vertices().iter().enumerate() {
        wr.write_record([i.to_string(), fmt(v.easting), fmt(v.northing)])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::NmOptions;

    fn quick_cfg() -> SimConfig {
        SimConfig {
            domain: [0.0, 4.0, 0.0, 2.0],
            mesh_edge: 1.0,
            mesh_buffer: 1.0,
            t_total: 6,
            t_train: vec![2, 3],
            n_sensors_response: 8,
            n_sensors_misaligned: 4,
            grid_shape: [2, 1],
            mc_points_per_cell: 200,
            n_test: 5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn rmspe_values() {
        assert_eq!(rmspe(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        assert_eq!(rmspe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmspe(&[1.0, 5.0, -2.0], &[0.0, 3.0, 1.0]).unwrap(), rmspe(&[-2.0, 1.0, 5.0], &[1.0, 0.0, 3.0]).unwrap());
        assert!(rmspe(&[], &[]).is_err());
        assert!(rmspe(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn default_design_counts_and_sets() {
        let cfg = SimConfig::default();
        assert!(cfg.tau2_grid.iter().zip(&cfg.tau2_point).all(|(g, p)| g > p));
        let rep = generate_replicate(&cfg, replicate_seed(cfg.seed, 0)).unwrap();
        for t in [3, 10] {
            let ds = rep.window(t, Scenario::Joint).unwrap();
            let pts = &ds.observations.points;
            assert_eq!(pts.iter().filter(|p| p.variable == 3).count(), 22 * t);
            assert_eq!(pts.iter().filter(|p| p.variable == 1).count(), 10 * t);
            assert_eq!(ds.observations.blocks.len(), 3 * 50 * t);
            assert!(pts.iter().all(|p| p.time >= 1 && p.time <= t));
        }
        for p in &rep.sensors_misaligned {
            assert!(!rep.sensors_response.contains(p));
        }
        for p in &rep.test_locations {
            assert!(!rep.sensors_response.contains(p));
            assert!(!rep.sensors_misaligned.contains(p));
        }
        let y1: Vec<Point2> = rep.points.iter().filter(|p| p.variable == 1).map(|p| p.location).collect();
        let y3: Vec<Point2> = rep.points.iter().filter(|p| p.variable == 3).map(|p| p.location).collect();
        assert!(y1.iter().all(|p| !y3.contains(p)));
    }

    #[test]
    fn scenarios_select_observations() {
        let rep = generate_replicate(&quick_cfg(), 4).unwrap();
        let get = |s| rep.window(3, s).unwrap().observations;
        let point = get(Scenario::PointOnly);
        assert!(point.blocks.is_empty() && !point.points.is_empty());
        let grid = get(Scenario::GridOnly);
        assert!(grid.points.is_empty() && !grid.blocks.is_empty());
        let joint = get(Scenario::Joint);
        assert_eq!(joint.points.len(), point.points.len());
        assert_eq!(joint.blocks.len(), grid.blocks.len());
        let missing = get(Scenario::JointMissingGridCovariates);
        assert!(missing.blocks.iter().all(|b| b.variable == 3));
        assert_eq!(missing.points.len(), point.points.len());
        for s in [Scenario::PointOnly, Scenario::GridOnly, Scenario::Joint, Scenario::JointMissingGridCovariates] {
            assert_eq!(Scenario::from_name(s.name()), Some(s));
        }
        assert!(rep.window(0, Scenario::Joint).is_err());
        assert!(rep.window(6, Scenario::Joint).is_err());
    }

    #[test]
    fn noise_free_independent_days_observe_the_predictor() {
        let cfg = SimConfig { ar: vec![0.0; 3], tau2_point: vec![0.0; 3], tau2_grid: vec![0.0; 3], ..quick_cfg() };
        let rep = generate_replicate(&cfg, 9).unwrap();
        for p in rep.points.iter().filter(|p| p.variable == 3) {
            assert!((p.value - rep.truth(&p.location, p.time).unwrap()).abs() < 1e-12);
        }
        // a = 0: the day fields are the raw innovations, uncorrelated across days
        let f = &rep.fields[2];
        assert_ne!(f[0], f[1]);
    }

    #[test]
    fn constant_field_blocks_carry_grid_noise() {
        let cfg = SimConfig { sigma2: vec![1e-14; 3], t_total: 200, grid_shape: [4, 2], ..quick_cfg() };
        let rep = generate_replicate(&cfg, 11).unwrap();
        let resid: Vec<f64> = rep.blocks.iter().filter(|b| b.variable == 1).map(|b| b.value - cfg.alpha[0]).collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // 1592 draws: the sample variance has relative sd √(2/n) ≈ 3.5%
        assert!((var / cfg.tau2_grid[0] - 1.0).abs() < 0.15, "{var}");
        assert!(mean.abs() < 4.0 * (cfg.tau2_grid[0] / n).sqrt());
    }

    #[test]
    fn replicates_are_deterministic_and_distinct() {
        let cfg = quick_cfg();
        let a = generate_replicate(&cfg, replicate_seed(7, 0)).unwrap();
        let b = generate_replicate(&cfg, replicate_seed(7, 0)).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.blocks, b.blocks);
        assert_eq!(a.fields, b.fields);
        let c = generate_replicate(&cfg, replicate_seed(7, 1)).unwrap();
        assert_ne!(a.points, c.points);
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| replicate_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { t_train: vec![100], ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { ar: vec![1.0, 0.0, 0.0], ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { n_test: 0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
        assert_eq!(SimConfig::default().true_value("theta_1"), Some(-0.2));
        assert_eq!(SimConfig::default().true_value("sigma2_2"), Some(0.5));
        assert_eq!(SimConfig::default().true_value("beta_3"), None);
    }

    fn quick_opts() -> StudyOptions {
        StudyOptions {
            n_replicates: 2,
            models: vec![Scenario::PointOnly, Scenario::Joint],
            param_table_max_t: 2,
            inference: InferenceOptions { optimizer: NmOptions { max_evals: 150, ..Default::default() }, compute_latent_sd: false, ..Default::default() },
            ..StudyOptions::default()
        }
    }

    #[test]
    fn study_outputs_and_determinism() {
        let cfg = quick_cfg();
        let opts = quick_opts();
        let a = run_study(&cfg, &opts).unwrap();
        assert_eq!(a.fits.len(), 2 * 2 * 2);
        assert!(a.failures().is_empty());
        // t = 3 exceeds the table limit and only appears in the RMSPE output
        assert!(a.params.iter().all(|r| r.t == 2));
        let alpha2: Vec<&ParamRow> = a.params.iter().filter(|r| r.param == "alpha_2").collect();
        assert_eq!(alpha2.len(), 2);
        assert!(alpha2.iter().all(|r| r.rmse.is_some() && r.q025 <= r.q975));
        let mut p1 = Vec::new();
        a.write_params(&mut p1).unwrap();
        let mut r1 = Vec::new();
        a.write_rmspe(&mut r1).unwrap();
        let text = String::from_utf8(r1.clone()).unwrap();
        assert!(text.starts_with("replicate,model,t,scenario,rmspe\n"));
        assert_eq!(text.lines().count(), 1 + 8 * 2);
        assert!(String::from_utf8(p1.clone()).unwrap().starts_with("param,model,t,mean,q025,q975,rmse\n"));
        let cov = a.coverage(None).unwrap();
        assert!((0.0..=1.0).contains(&cov));

        let b = run_study(&cfg, &opts).unwrap();
        let (mut p2, mut r2) = (Vec::new(), Vec::new());
        b.write_params(&mut p2).unwrap();
        b.write_rmspe(&mut r2).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn failed_fits_are_counted_and_excluded() {
        let cfg = SimConfig { t_train: vec![2], ..quick_cfg() };
        let mut opts = quick_opts();
        opts.models = vec![Scenario::PointOnly];
        opts.priors.insert("rho_1".into(), PriorKind::Fixed { value: -1.0 });
        let r = run_study(&cfg, &opts).unwrap();
        assert_eq!(r.failures().len(), 2);
        assert!(r.params.is_empty());
        let mut s = Vec::new();
        r.write_summary(&mut s).unwrap();
        let s = String::from_utf8(s).unwrap();
        assert!(s.contains("failed 2"), "{s}");
        let mut rm = Vec::new();
        r.write_rmspe(&mut rm).unwrap();
        assert_eq!(String::from_utf8(rm).unwrap().lines().count(), 1);
    }

    #[test]
    fn replicate_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let rep = generate_replicate(&quick_cfg(), 3).unwrap();
        dump_replicate(dir.path(), &rep).unwrap();
        for f in ["points.csv", "blocks.csv", "test_locations.csv", "fields.csv", "nodes.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let schema = crate::observation::IngestSchema {
            domain: rep.cfg.domain_rect().expand(rep.cfg.mesh_buffer),
            variables: vec!["y1".into(), "y2".into(), "y3".into()],
            max_time: None,
        };
        let pts = crate::observation::read_points(std::fs::File::open(dir.path().join("points.csv")).unwrap(), &schema).unwrap();
        assert_eq!(pts.len(), rep.points.len());
    }
}
