//! The joint fusion model: K covariate fields plus one response field, each
//! a Matérn-SPDE field with AR(1) dynamics, observed at points and over
//! blocks with source-specific Gaussian noise.
//!
//! Latent layout: field `k` (0-based, response last) occupies
//! `k·T·n .. (k+1)·T·n` in time-major order, followed by the intercepts
//! `α_1..α_{K+1}` and the fixed-effect coefficients `θ_1..θ_l`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{assemble_fem, FemMatrices, Mesh, Point2, Rect};
use crate::observation::{block_weights, point_weights, NodeWeights, ObservationBatch};
use crate::sparse::{CholeskyFactor, CscMatrix, SymbolicCholesky};
use crate::spde::{MaternParams, SpdeBasis};
use crate::temporal::{ar1_log_det, ar1_precision, kron_assemble, Ar1Params};

/// A covariate known everywhere (e.g. a trend surface).
#[derive(Clone, Debug, PartialEq)]
pub enum FixedEffectKind {
    /// `easting·E + northing·N`
    LinearTrend { easting: f64, northing: f64 },
    /// Piecewise-constant surface; points take the value of the cell that
    /// contains them, or of the nearest cell centroid.
    Raster { cells: Vec<(Rect, f64)> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedEffect {
    pub name: String,
    pub kind: FixedEffectKind,
}

impl FixedEffect {
    pub fn trend(name: &str, easting: f64, northing: f64) -> Self {
        Self { name: name.into(), kind: FixedEffectKind::LinearTrend { easting, northing } }
    }

    pub fn eval(&self, p: &Point2, _time: usize) -> f64 {
        match &self.kind {
            FixedEffectKind::LinearTrend { easting, northing } => easting * p.easting + northing * p.northing,
            FixedEffectKind::Raster { cells } => {
                if let Some((_, v)) = cells.iter().find(|(c, _)| c.contains(p)) {
                    return *v;
                }
                cells
                    .iter()
                    .min_by(|a, b| a.0.centroid().distance(p).total_cmp(&b.0.centroid().distance(p)))
                    .map_or(0.0, |(_, v)| *v)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSpec {
    pub name: String,
}

#[derive(Clone, Debug)]
pub struct FusionModelSpec {
    pub mesh: Arc<Mesh>,
    /// `K + 1` fields; observation variable `k` (1-based) maps to `fields[k-1]`
    /// and the last field is the response.
    pub fields: Vec<FieldSpec>,
    pub fixed_effects: Vec<FixedEffect>,
    pub observations: ObservationBatch,
    pub t: usize,
    /// Prior variance of intercepts and fixed-effect coefficients.
    pub linear_prior_variance: f64,
    /// Use the centroid when a block contains no mesh vertex.
    pub block_fallback: bool,
}

impl FusionModelSpec {
    pub fn k(&self) -> usize {
        self.fields.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Support {
    Point,
    Block,
}

/// Hyperparameters. Field vectors have length `K + 1`; noise variances are
/// `None` for sources without observations.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperVector {
    pub range: Vec<f64>,
    pub sd: Vec<f64>,
    pub ar: Vec<f64>,
    pub noise_point: Vec<Option<f64>>,
    pub noise_grid: Vec<Option<f64>>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Range(usize),
    Sd(usize),
    Ar(usize),
    NoisePoint(usize),
    NoiseGrid(usize),
    Beta(usize),
}

impl ParamId {
    /// Output name; indices are 1-based. Field sd is reported as a variance.
    pub fn name(&self) -> String {
        match *self {
            ParamId::Range(k) => format!("rho_{}", k + 1),
            ParamId::Sd(k) => format!("sigma2_{}", k + 1),
            ParamId::Ar(k) => format!("a_{}", k + 1),
            ParamId::NoisePoint(k) => format!("tau2_p_{}", k + 1),
            ParamId::NoiseGrid(k) => format!("tau2_g_{}", k + 1),
            ParamId::Beta(k) => format!("beta_{}", k + 1),
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        let (head, idx) = s.rsplit_once('_')?;
        let k = idx.parse::<usize>().ok()?.checked_sub(1)?;
        Some(match head {
            "rho" => ParamId::Range(k),
            "sigma2" => ParamId::Sd(k),
            "a" => ParamId::Ar(k),
            "tau2_p" => ParamId::NoisePoint(k),
            "tau2_g" => ParamId::NoiseGrid(k),
            "beta" => ParamId::Beta(k),
            _ => return None,
        })
    }
}

impl HyperVector {
    /// Parameters present for this configuration, in canonical order.
    pub fn ids(&self) -> Vec<ParamId> {
        let nf = self.range.len();
        let mut ids = Vec::new();
        for k in 0..nf {
            ids.extend([ParamId::Range(k), ParamId::Sd(k), ParamId::Ar(k)]);
        }
        for k in 0..nf {
            if self.noise_point[k].is_some() {
                ids.push(ParamId::NoisePoint(k));
            }
            if self.noise_grid[k].is_some() {
                ids.push(ParamId::NoiseGrid(k));
            }
        }
        ids.extend((0..self.beta.len()).map(ParamId::Beta));
        ids
    }

    /// Natural-scale value (`sd` for [`ParamId::Sd`], variance for noise).
    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::Range(k) => self.range[k],
            ParamId::Sd(k) => self.sd[k],
            ParamId::Ar(k) => self.ar[k],
            ParamId::NoisePoint(k) => self.noise_point[k].expect("missing point noise"),
            ParamId::NoiseGrid(k) => self.noise_grid[k].expect("missing grid noise"),
            ParamId::Beta(k) => self.beta[k],
        }
    }

    pub fn set(&mut self, id: ParamId, v: f64) {
        match id {
            ParamId::Range(k) => self.range[k] = v,
            ParamId::Sd(k) => self.sd[k] = v,
            ParamId::Ar(k) => self.ar[k] = v,
            ParamId::NoisePoint(k) => self.noise_point[k] = Some(v),
            ParamId::NoiseGrid(k) => self.noise_grid[k] = Some(v),
            ParamId::Beta(k) => self.beta[k] = v,
        }
    }

    /// Value as reported (field variance instead of sd).
    pub fn reported(&self, id: ParamId) -> f64 {
        match id {
            ParamId::Sd(k) => self.sd[k] * self.sd[k],
            _ => self.get(id),
        }
    }

    /// Inverse of [`HyperVector::reported`].
    pub fn set_reported(&mut self, id: ParamId, v: f64) {
        match id {
            ParamId::Sd(_) => self.set(id, v.sqrt()),
            _ => self.set(id, v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nf = self.range.len();
        if [self.sd.len(), self.ar.len(), self.noise_point.len(), self.noise_grid.len()].iter().any(|&l| l != nf)
            || self.beta.len() + 1 != nf
        {
            return Err(Error::Dimension("hyperparameter vector has inconsistent lengths".into()));
        }
        for id in self.ids() {
            let v = self.get(id);
            let ok = match id {
                ParamId::Range(_) | ParamId::Sd(_) | ParamId::NoisePoint(_) | ParamId::NoiseGrid(_) => v > 0.0 && v.is_finite(),
                ParamId::Ar(_) => v.abs() < 1.0,
                ParamId::Beta(_) => v.is_finite(),
            };
            if !ok {
                return Err(Error::Input(format!("hyperparameter {} = {v} is infeasible", id.name())));
            }
        }
        Ok(())
    }
}

/// Support of a prediction or evaluation target for the response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Point { location: Point2, time: usize },
    Block { cell: Rect, time: usize },
}

/// Explicit joint Gaussian system for given hyperparameters.
#[derive(Clone, Debug)]
pub struct GaussianSystem {
    /// Prior precision of the full latent vector (symmetric, both triangles).
    pub q: CscMatrix,
    /// Observation operator (rows = observations), with β applied.
    pub a: CscMatrix,
    /// Noise precisions.
    pub d: Vec<f64>,
    pub y: Vec<f64>,
}

/// One observation row before hyperparameters are applied.
#[derive(Clone, Debug)]
struct ObsRow {
    group: usize,
    time: usize,
    weights: NodeWeights,
    x: Vec<f64>,
    y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Group {
    field: usize,
    support: Support,
}

/// Scatter map for one likelihood group: `(position, value, scale index)`.
#[derive(Clone, Debug)]
struct GroupTerms {
    entries: Vec<(usize, f64, usize)>,
    rhs: Vec<(usize, f64, usize)>,
    yy: f64,
    count: usize,
}

/// Prior-precision entry `Q_k[(t1,i),(t2,j)] = Qt[t1,t2] Qs[i,j]`.
#[derive(Clone, Copy, Debug)]
struct PriorEntry {
    pos: usize,
    field: usize,
    tkind: u8,
    sp: usize,
}

/// Conditional Gaussian posterior of the latent vector given hyperparameters.
#[derive(Clone, Debug)]
pub struct ConditionalPosterior {
    pub mean: Vec<f64>,
    pub factor: CholeskyFactor,
    /// `log π(y | h)`
    pub log_lik: f64,
}

/// Precomputed model ready for repeated evaluation.
#[derive(Debug)]
pub struct FusionModel {
    spec: FusionModelSpec,
    fem: FemMatrices,
    n: usize,
    basis: SpdeBasis,
    k_lower: CscMatrix,
    k_cpos: Vec<usize>,
    k_gpos: Vec<(usize, f64)>,
    k_symbolic: Arc<SymbolicCholesky>,
    log_det_c: f64,
    rows: Vec<ObsRow>,
    groups: Vec<Group>,
    pattern: CscMatrix,
    symbolic: Arc<SymbolicCholesky>,
    prior_entries: Vec<PriorEntry>,
    linear_pos: Vec<usize>,
    terms: Vec<GroupTerms>,
}

impl FusionModel {
    pub fn new(spec: FusionModelSpec) -> Result<Self> {
        if spec.fields.is_empty() {
            return Err(Error::Input("model needs at least one field".into()));
        }
        if spec.t == 0 {
            return Err(Error::Input("model needs at least one time point".into()));
        }
        if !(spec.linear_prior_variance > 0.0) {
            return Err(Error::Input("linear prior variance must be positive".into()));
        }
        spec.observations.validate()?;
        let nf = spec.fields.len();
        let mesh = spec.mesh.clone();
        let n = mesh.n_vertices();
        let fem = assemble_fem(&mesh);
        let basis = SpdeBasis::new(&fem);

        // K = κ²C + G on the stiffness pattern
        let k_full = fem.g.add_scaled(&fem.c, 1.0);
        let mut k_lower = k_full.lower_triangle();
        k_lower.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let k_cpos = (0..n).map(|i| k_lower.position(i, i).unwrap()).collect();
        let k_gpos = fem.g.iter().filter(|&(i, j, _)| i >= j).map(|(i, j, v)| (k_lower.position(i, j).unwrap(), v)).collect();
        let k_symbolic = SymbolicCholesky::analyze(&k_lower)?;
        let k_symbolic_ref = Arc::clone(&k_symbolic);
        let log_det_c = fem.c_diag.iter().map(|c| c.ln()).sum();

        // observation rows
        let obs = &spec.observations;
        let mut group_keys: Vec<Group> = Vec::new();
        for p in &obs.points {
            group_keys.push(Group { field: p.variable - 1, support: Support::Point });
        }
        for b in &obs.blocks {
            group_keys.push(Group { field: b.variable - 1, support: Support::Block });
        }
        for g in &group_keys {
            if g.field >= nf {
                return Err(Error::Input(format!("observation references variable {} but the model has {nf} fields", g.field + 1)));
            }
        }
        group_keys.sort();
        group_keys.dedup();
        for k in 0..nf {
            if !group_keys.iter().any(|g| g.field == k) {
                return Err(Error::Input(format!("field {} ({}) has no observations", k + 1, spec.fields[k].name)));
            }
        }
        let group_of = |field: usize, support: Support| group_keys.iter().position(|g| *g == Group { field, support }).unwrap();
        let resp = nf - 1;
        let mut rows = Vec::with_capacity(obs.points.len() + obs.blocks.len());
        for (i, p) in obs.points.iter().enumerate() {
            if p.time > spec.t {
                return Err(Error::Input(format!("point observation {i} has time {} beyond T = {}", p.time, spec.t)));
            }
            let weights = point_weights(&mesh, &p.location).map_err(|e| Error::Input(format!("point observation {i}: {e}")))?;
            let field = p.variable - 1;
            let x = if field == resp { spec.fixed_effects.iter().map(|f| f.eval(&p.location, p.time)).collect() } else { Vec::new() };
            rows.push(ObsRow { group: group_of(field, Support::Point), time: p.time, weights, x, y: p.value });
        }
        for (i, b) in obs.blocks.iter().enumerate() {
            if b.time > spec.t {
                return Err(Error::Input(format!("block observation {i} has time {} beyond T = {}", b.time, spec.t)));
            }
            let weights = block_weights(&mesh, &b.cell, spec.block_fallback).map_err(|e| Error::Input(format!("block observation {i}: {e}")))?;
            let field = b.variable - 1;
            let x = if field == resp { block_fixed_effects(&spec, &mesh, &weights, b.time) } else { Vec::new() };
            rows.push(ObsRow { group: group_of(field, Support::Block), time: b.time, weights, x, y: b.value });
        }

        let dim = nf * spec.t * n + nf + spec.fixed_effects.len();
        let mut model = Self {
            n,
            basis,
            k_lower,
            k_cpos,
            k_gpos,
            k_symbolic,
            log_det_c,
            rows,
            groups: group_keys,
            pattern: CscMatrix::zeros(dim, dim),
            symbolic: Arc::clone(&k_symbolic_ref),
            prior_entries: Vec::new(),
            linear_pos: Vec::new(),
            terms: Vec::new(),
            fem,
            spec,
        };
        model.build_pattern()?;
        Ok(model)
    }
}

fn block_fixed_effects(spec: &FusionModelSpec, mesh: &Mesh, weights: &NodeWeights, time: usize) -> Vec<f64> {
    spec.fixed_effects
        .iter()
        .map(|f| weights.iter().map(|&(v, w)| w * f.eval(&mesh.vertices()[v], time)).sum())
        .collect()
}

impl FusionModel {
    fn build_pattern(&mut self) -> Result<()> {
        let (nf, t, n) = (self.n_fields(), self.spec.t, self.n);
        let dim = self.dim();
        let lin0 = self.linear_offset();
        let sp = self.basis.pattern().clone();

        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        let mut prior_raw: Vec<(usize, usize, usize, u8, usize)> = Vec::new();
        for k in 0..nf {
            let off = k * t * n;
            for t1 in 0..t {
                for t2 in t1.saturating_sub(1)..=t1 {
                    let tkind = if t1 != t2 {
                        2
                    } else if t1 == 0 || t1 == t - 1 {
                        0
                    } else {
                        1
                    };
                    for j in 0..n {
                        let (rows, _) = sp.col(j);
                        for (q, &i) in rows.iter().enumerate() {
                            if t1 == t2 && i < j {
                                continue;
                            }
                            let (r, c) = (off + t1 * n + i, off + t2 * n + j);
                            trips.push((r, c, 0.0));
                            prior_raw.push((r, c, k, tkind, sp.col_ptr()[j] + q));
                        }
                    }
                }
            }
        }
        for q in lin0..dim {
            trips.push((q, q, 0.0));
        }

        let ng = self.groups.len();
        let mut group_pairs: Vec<Vec<(usize, usize, f64, usize)>> = vec![Vec::new(); ng];
        let mut group_rhs: Vec<Vec<(usize, f64, usize)>> = vec![Vec::new(); ng];
        let mut yy = vec![0.0; ng];
        let mut count = vec![0usize; ng];
        for row in &self.rows {
            let g = row.group;
            let ent = self.row_entries(self.groups[g].field, row.time, &row.weights, &row.x);
            for a in 0..ent.len() {
                let (ca, va, sa) = ent[a];
                group_rhs[g].push((ca, va * row.y, sa));
                for &(cb, vb, sb) in &ent[..=a] {
                    let (r, c, s) = if ca >= cb { (ca, cb, sa * (nf + 1) + sb) } else { (cb, ca, sb * (nf + 1) + sa) };
                    trips.push((r, c, 0.0));
                    group_pairs[g].push((r, c, va * vb, s));
                }
            }
            yy[g] += row.y * row.y;
            count[g] += 1;
        }

        let pattern = CscMatrix::from_triplets(dim, dim, &trips);
        drop(trips);
        let mut coords = vec![None; dim];
        for k in 0..nf {
            for time in 0..t {
                for (v, p) in self.spec.mesh.vertices().iter().enumerate() {
                    coords[(k * t + time) * n + v] = Some([p.easting, p.northing, time as f64]);
                }
            }
        }
        let symbolic = SymbolicCholesky::analyze_with_coordinates(&pattern, &coords)?;
        let prior_entries = prior_raw
            .into_iter()
            .map(|(r, c, field, tkind, sp)| PriorEntry { pos: pattern.position(r, c).unwrap(), field, tkind, sp })
            .collect();
        let linear_pos = (lin0..dim).map(|q| pattern.position(q, q).unwrap()).collect();
        let mut terms = Vec::with_capacity(ng);
        for g in 0..ng {
            let mut e: Vec<(usize, f64, usize)> =
                group_pairs[g].iter().map(|&(r, c, v, s)| (pattern.position(r, c).unwrap(), v, s)).collect();
            e.sort_by_key(|&(p, _, s)| (p, s));
            let mut merged: Vec<(usize, f64, usize)> = Vec::with_capacity(e.len());
            for (p, v, s) in e {
                match merged.last_mut() {
                    Some(last) if last.0 == p && last.2 == s => last.1 += v,
                    _ => merged.push((p, v, s)),
                }
            }
            let mut rhs = std::mem::take(&mut group_rhs[g]);
            rhs.sort_by_key(|&(c, _, s)| (c, s));
            let mut rmerged: Vec<(usize, f64, usize)> = Vec::with_capacity(rhs.len());
            for (c, v, s) in rhs {
                match rmerged.last_mut() {
                    Some(last) if last.0 == c && last.2 == s => last.1 += v,
                    _ => rmerged.push((c, v, s)),
                }
            }
            terms.push(GroupTerms { entries: merged, rhs: rmerged, yy: yy[g], count: count[g] });
        }
        self.pattern = pattern;
        self.symbolic = symbolic;
        self.prior_entries = prior_entries;
        self.linear_pos = linear_pos;
        self.terms = terms;
        Ok(())
    }

    /// Unscaled entries `(column, value, slot)` of a response or covariate
    /// row. The slot of a column is its field index, or `K + 1` for linear
    /// parameters; in response rows covariate slots are later scaled by β.
    fn row_entries(&self, field: usize, time: usize, weights: &NodeWeights, x: &[f64]) -> Vec<(usize, f64, usize)> {
        let (nf, t, n) = (self.n_fields(), self.spec.t, self.n);
        let resp = nf - 1;
        let lin0 = self.linear_offset();
        let mut e = Vec::with_capacity(weights.len() * nf + 1 + x.len());
        for &(v, w) in weights {
            e.push((field * t * n + (time - 1) * n + v, w, field));
        }
        if field == resp {
            for j in 0..resp {
                for &(v, w) in weights {
                    e.push((j * t * n + (time - 1) * n + v, w, j));
                }
            }
            e.push((lin0 + field, 1.0, nf));
            for (q, &xq) in x.iter().enumerate() {
                e.push((lin0 + nf + q, xq, nf));
            }
        } else {
            e.push((lin0 + field, 1.0, nf));
        }
        e
    }

    pub fn spec(&self) -> &FusionModelSpec {
        &self.spec
    }

    pub fn mesh(&self) -> &Mesh {
        &self.spec.mesh
    }

    pub fn fem(&self) -> &FemMatrices {
        &self.fem
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_times(&self) -> usize {
        self.spec.t
    }

    pub fn n_fields(&self) -> usize {
        self.spec.fields.len()
    }

    pub fn n_fixed_effects(&self) -> usize {
        self.spec.fixed_effects.len()
    }

    /// Total latent dimension.
    pub fn dim(&self) -> usize {
        self.linear_offset() + self.n_fields() + self.n_fixed_effects()
    }

    /// Index of `α_1`; `θ_1` follows the `K + 1` intercepts.
    pub fn linear_offset(&self) -> usize {
        self.n_fields() * self.spec.t * self.n
    }

    /// Latent index of field `k` (0-based) at `time` (1-based) and `node`.
    pub fn latent_index(&self, k: usize, time: usize, node: usize) -> usize {
        (k * self.spec.t + time - 1) * self.n + node
    }

    pub fn n_observations(&self) -> usize {
        self.rows.len()
    }

    /// Observation counts per source `(field, support, count)`.
    pub fn sources(&self) -> Vec<(usize, Support, usize)> {
        self.groups.iter().zip(&self.terms).map(|(g, t)| (g.field, g.support, t.count)).collect()
    }

    /// Mean and sd of the observed values of field `k` (all supports).
    pub fn data_summary(&self, k: usize) -> (f64, f64) {
        let vals: Vec<f64> = self.rows.iter().filter(|r| self.groups[r.group].field == k).map(|r| r.y).collect();
        let m = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let v = vals.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (vals.len().max(2) - 1) as f64;
        (m, v.sqrt())
    }

    /// Hyperparameter vector with the right shape, filled with `init` values
    /// for every present parameter.
    pub fn hyper_template(&self, range: f64, sd: f64, ar: f64, noise: f64, beta: f64) -> HyperVector {
        let nf = self.n_fields();
        let mut h = HyperVector {
            range: vec![range; nf],
            sd: vec![sd; nf],
            ar: vec![ar; nf],
            noise_point: vec![None; nf],
            noise_grid: vec![None; nf],
            beta: vec![beta; nf - 1],
        };
        for g in &self.groups {
            match g.support {
                Support::Point => h.noise_point[g.field] = Some(noise),
                Support::Block => h.noise_grid[g.field] = Some(noise),
            }
        }
        h
    }

    fn check_hyper(&self, h: &HyperVector) -> Result<()> {
        h.validate()?;
        if h.range.len() != self.n_fields() {
            return Err(Error::Dimension(format!("expected {} fields in hyperparameters, got {}", self.n_fields(), h.range.len())));
        }
        for g in &self.groups {
            let present = match g.support {
                Support::Point => h.noise_point[g.field].is_some(),
                Support::Block => h.noise_grid[g.field].is_some(),
            };
            if !present {
                return Err(Error::Input(format!("missing noise variance for observed source of field {}", g.field + 1)));
            }
        }
        Ok(())
    }

    fn noise_precision(&self, h: &HyperVector, g: usize) -> f64 {
        let grp = self.groups[g];
        let var = match grp.support {
            Support::Point => h.noise_point[grp.field],
            Support::Block => h.noise_grid[grp.field],
        };
        1.0 / var.expect("checked noise")
    }

    /// Scale per slot in response rows: β for covariates, 1 otherwise.
    fn slot_scales(&self, h: &HyperVector) -> Vec<f64> {
        let nf = self.n_fields();
        let mut c = vec![1.0; nf + 1];
        c[..nf - 1].copy_from_slice(&h.beta);
        c
    }

    /// `log det` of the spatial precision of one field.
    fn spatial_log_det(&self, params: &MaternParams) -> Result<f64> {
        let k2 = params.kappa().powi(2);
        let mut kmat = self.k_lower.clone();
        let vals = kmat.values_mut();
        for (i, &p) in self.k_cpos.iter().enumerate() {
            vals[p] += k2 * self.fem.c_diag[i];
        }
        for &(p, g) in &self.k_gpos {
            vals[p] += g;
        }
        let f = CholeskyFactor::factorize(&self.k_symbolic, &kmat)?;
        let scale = 1.0 / (4.0 * PI * k2 * params.sd * params.sd);
        Ok(self.n as f64 * scale.ln() + 2.0 * f.log_det() - self.log_det_c)
    }

    fn field_params(&self, h: &HyperVector, k: usize) -> Result<MaternParams> {
        MaternParams::new(h.range[k], h.sd[k], 1.0)
    }

    /// Stationary spatial precision of field `k`.
    pub fn spatial_precision(&self, h: &HyperVector, k: usize) -> Result<CscMatrix> {
        self.basis.precision(&self.field_params(h, k)?)
    }

    /// Prior precision values on the joint pattern and `log det Q`.
    fn prior_values(&self, h: &HyperVector) -> Result<(Vec<f64>, f64)> {
        let (nf, t, n) = (self.n_fields(), self.spec.t, self.n);
        let mut vals = vec![0.0; self.pattern.nnz()];
        let mut log_det = 0.0;
        let sp_nnz = self.basis.pattern().nnz();
        let mut qs = vec![vec![0.0; sp_nnz]; nf];
        let mut qt = vec![[0.0f64; 3]; nf];
        for k in 0..nf {
            let params = self.field_params(h, k)?;
            self.basis.precision_values(&params, &mut qs[k])?;
            let a = h.ar[k];
            let s = 1.0 / (1.0 - a * a);
            qt[k] = if t == 1 { [1.0, 1.0, 0.0] } else { [s, (1.0 + a * a) * s, -a * s] };
            log_det += n as f64 * ar1_log_det(a, t) + t as f64 * self.spatial_log_det(&params)?;
        }
        for e in &self.prior_entries {
            vals[e.pos] += qt[e.field][e.tkind as usize] * qs[e.field][e.sp];
        }
        let lp = 1.0 / self.spec.linear_prior_variance;
        for &p in &self.linear_pos {
            vals[p] += lp;
        }
        log_det += self.linear_pos.len() as f64 * lp.ln();
        Ok((vals, log_det))
    }

    /// Posterior precision `Q + AᵀDA` (lower triangle) and `AᵀDy`.
    fn posterior_system(&self, h: &HyperVector) -> Result<(CscMatrix, Vec<f64>, f64, f64, f64)> {
        self.check_hyper(h)?;
        let nf = self.n_fields();
        let resp = nf - 1;
        let (mut vals, log_det_prior) = self.prior_values(h)?;
        let c = self.slot_scales(h);
        let mut b = vec![0.0; self.dim()];
        let (mut ydy, mut log_det_d) = (0.0, 0.0);
        for (g, terms) in self.terms.iter().enumerate() {
            let d = self.noise_precision(h, g);
            if self.groups[g].field == resp {
                for &(p, v, s) in &terms.entries {
                    vals[p] += d * v * c[s / (nf + 1)] * c[s % (nf + 1)];
                }
                for &(col, v, s) in &terms.rhs {
                    b[col] += d * v * c[s];
                }
            } else {
                for &(p, v, _) in &terms.entries {
                    vals[p] += d * v;
                }
                for &(col, v, _) in &terms.rhs {
                    b[col] += d * v;
                }
            }
            ydy += d * terms.yy;
            log_det_d += terms.count as f64 * d.ln();
        }
        let mut q = self.pattern.clone();
        q.values_mut().copy_from_slice(&vals);
        Ok((q, b, log_det_prior, log_det_d, ydy))
    }

    /// Conditional posterior of the latent vector and `log π(y | h)`.
    pub fn conditional(&self, h: &HyperVector) -> Result<ConditionalPosterior> {
        let (q, b, log_det_prior, log_det_d, ydy) = self.posterior_system(h)?;
        let factor = CholeskyFactor::factorize(&self.symbolic, &q)?;
        let mut mean = b.clone();
        factor.solve_in_place(&mut mean);
        let bm: f64 = b.iter().zip(&mean).map(|(x, y)| x * y).sum();
        let m = self.rows.len() as f64;
        let log_lik = 0.5 * (log_det_prior + log_det_d - factor.log_det() - m * (2.0 * PI).ln() - (ydy - bm));
        if !log_lik.is_finite() {
            return Err(Error::Numerical("non-finite log marginal likelihood".into()));
        }
        Ok(ConditionalPosterior { mean, factor, log_lik })
    }

    /// Explicit matrices of the joint Gaussian model.
    pub fn assemble_system(&self, h: &HyperVector) -> Result<GaussianSystem> {
        self.check_hyper(h)?;
        let (nf, t) = (self.n_fields(), self.spec.t);
        let dim = self.dim();
        let mut qtrips = Vec::new();
        for k in 0..nf {
            let qs = self.basis.precision(&self.field_params(h, k)?)?;
            let qt = ar1_precision(&Ar1Params::new(h.ar[k], t)?)?;
            let off = k * t * self.n;
            qtrips.extend(kron_assemble(&qt, &qs).iter().map(|(i, j, v)| (off + i, off + j, v)));
        }
        for q in self.linear_offset()..dim {
            qtrips.push((q, q, 1.0 / self.spec.linear_prior_variance));
        }
        let c = self.slot_scales(h);
        let resp = nf - 1;
        let mut atrips = Vec::new();
        let mut d = Vec::with_capacity(self.rows.len());
        let mut y = Vec::with_capacity(self.rows.len());
        for (r, row) in self.rows.iter().enumerate() {
            let field = self.groups[row.group].field;
            for (col, v, s) in self.row_entries(field, row.time, &row.weights, &row.x) {
                let scale = if field == resp { c[s] } else { 1.0 };
                atrips.push((r, col, v * scale));
            }
            d.push(self.noise_precision(h, row.group));
            y.push(row.y);
        }
        Ok(GaussianSystem {
            q: CscMatrix::from_triplets(dim, dim, &qtrips),
            a: CscMatrix::from_triplets(self.rows.len(), dim, &atrips),
            d,
            y,
        })
    }

    /// Fixed-effect values and node weights of a target.
    pub fn target_support(&self, target: &Target) -> Result<(NodeWeights, Vec<f64>, usize)> {
        match *target {
            Target::Point { location, time } => {
                let w = point_weights(self.mesh(), &location)?;
                let x = self.spec.fixed_effects.iter().map(|f| f.eval(&location, time)).collect();
                Ok((w, x, time))
            }
            Target::Block { cell, time } => {
                let w = block_weights(self.mesh(), &cell, self.spec.block_fallback)?;
                let x = block_fixed_effects(&self.spec, self.mesh(), &w, time);
                Ok((w, x, time))
            }
        }
    }

    /// Coefficients of the response predictor over the latent vector, with
    /// field `k`'s nodal values taken at `latent_time` and multiplied by
    /// `field_coef[k]`; linear parameters enter with coefficient 1.
    pub fn predictor_coefficients(
        &self,
        weights: &NodeWeights,
        x: &[f64],
        latent_time: usize,
        field_coef: &[f64],
    ) -> Result<Vec<(usize, f64)>> {
        if latent_time == 0 || latent_time > self.spec.t {
            return Err(Error::Input(format!("time {latent_time} outside the model window 1..={}", self.spec.t)));
        }
        let nf = self.n_fields();
        let mut coef = field_coef.to_vec();
        coef.push(1.0);
        Ok(self
            .row_entries(nf - 1, latent_time, weights, x)
            .into_iter()
            .map(|(col, v, s)| (col, v * coef[s]))
            .collect())
    }

    /// Response predictor row `α + θᵀx + Σ β_k η_k + η_{K+1}` at a target.
    pub fn target_row(&self, h: &HyperVector, target: &Target) -> Result<Vec<(usize, f64)>> {
        let (w, x, time) = self.target_support(target)?;
        self.predictor_coefficients(&w, &x, time, &self.slot_scales(h)[..self.n_fields()])
    }

    /// Evaluates the response linear predictor for given latent values.
    pub fn linear_predictor(&self, h: &HyperVector, latents: &[f64], target: &Target) -> Result<f64> {
        if latents.len() != self.dim() {
            return Err(Error::Dimension(format!("latent vector has length {}, expected {}", latents.len(), self.dim())));
        }
        Ok(self.target_row(h, target)?.iter().map(|&(i, c)| c * latents[i]).sum())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::build_structured_mesh;
    use crate::observation::{BlockObs, PointObs};
    use crate::spde::build_precision;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    /// Small random instance with K = 2 (three fields), points for every
    /// variable and blocks for the first and last.
    pub(crate) fn small_spec(seed: u64, t: usize) -> FusionModelSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domain = Rect::new(0.0, 3.0, 0.0, 2.0);
        let mesh = Arc::new(build_structured_mesh(domain, 1.0, 0.5).unwrap());
        let mut points = Vec::new();
        let mut blocks = Vec::new();
        for time in 1..=t {
            for var in 1..=3 {
                for _ in 0..3 {
                    let location = Point2::new(rng.random_range(0.0..3.0), rng.random_range(0.0..2.0));
                    points.push(PointObs { variable: var, location, time, value: rng.random_range(-1.0..1.0) });
                }
            }
            for var in [1, 3] {
                for (x0, y0) in [(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)] {
                    let cell = Rect::new(x0, x0 + 1.0, y0, y0 + 1.0);
                    blocks.push(BlockObs { variable: var, cell, time, value: rng.random_range(-1.0..1.0) });
                }
            }
        }
        let names: BTreeMap<usize, String> = (1..=3).map(|k| (k, format!("y{k}"))).collect();
        FusionModelSpec {
            mesh,
            fields: (1..=3).map(|k| FieldSpec { name: format!("y{k}") }).collect(),
            fixed_effects: vec![FixedEffect::trend("trend", 0.2, 0.3)],
            observations: ObservationBatch { points, blocks, variable_names: names },
            t,
            linear_prior_variance: 10.0,
            block_fallback: true,
        }
    }

    pub(crate) fn small_hyper(model: &FusionModel, rng: &mut ChaCha8Rng) -> HyperVector {
        let mut h = model.hyper_template(1.0, 1.0, 0.3, 0.2, 0.5);
        for k in 0..3 {
            h.range[k] = rng.random_range(0.8..3.0);
            h.sd[k] = rng.random_range(0.3..1.5);
            h.ar[k] = rng.random_range(-0.8..0.8);
        }
        for id in h.ids() {
            if matches!(id, ParamId::NoisePoint(_) | ParamId::NoiseGrid(_)) {
                h.set(id, rng.random_range(0.05..0.5));
            }
        }
        h.beta = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        h
    }

    fn to_dense(m: &CscMatrix) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, j, v) in m.iter() {
            d[(i, j)] += v;
        }
        d
    }

    /// Dense operator built directly from barycentric coordinates and the
    /// model equations, independent of the sparse scatter maps.
    pub(crate) fn dense_oracle(spec: &FusionModelSpec, h: &HyperVector) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let mesh = &spec.mesh;
        let n = mesh.n_vertices();
        let t = spec.t;
        let nf = 3;
        let dim = nf * t * n + nf + 1;
        let fem = assemble_fem(mesh);
        let mut q = DMatrix::zeros(dim, dim);
        for k in 0..nf {
            let qs = to_dense(&build_precision(&fem, &MaternParams::new(h.range[k], h.sd[k], 1.0).unwrap()).unwrap().q);
            let mut qt = DMatrix::zeros(t, t);
            for i in 0..t {
                qt[(i, i)] = if t == 1 { 1.0 } else if i == 0 || i == t - 1 { 1.0 } else { 1.0 + h.ar[k].powi(2) } / if t == 1 { 1.0 } else { 1.0 - h.ar[k].powi(2) };
                if i + 1 < t {
                    qt[(i, i + 1)] = -h.ar[k] / (1.0 - h.ar[k].powi(2));
                    qt[(i + 1, i)] = qt[(i, i + 1)];
                }
            }
            let off = k * t * n;
            q.view_mut((off, off), (t * n, t * n)).copy_from(&qt.kronecker(&qs));
        }
        for i in nf * t * n..dim {
            q[(i, i)] = 0.1;
        }
        let obs = &spec.observations;
        let m = obs.points.len() + obs.blocks.len();
        let mut a = DMatrix::zeros(m, dim);
        let mut d = DVector::zeros(m);
        let mut y = DVector::zeros(m);
        let field_col = |k: usize, time: usize, v: usize| k * t * n + (time - 1) * n + v;
        let mut r = 0;
        let put = |r: usize, k: usize, time: usize, w: &[(usize, f64)], xval: f64, a: &mut DMatrix<f64>| {
            for &(v, wt) in w {
                if k == 2 {
                    a[(r, field_col(2, time, v))] += wt;
                    a[(r, field_col(0, time, v))] += h.beta[0] * wt;
                    a[(r, field_col(1, time, v))] += h.beta[1] * wt;
                } else {
                    a[(r, field_col(k, time, v))] += wt;
                }
            }
            a[(r, nf * t * n + k)] = 1.0;
            if k == 2 {
                a[(r, nf * t * n + nf)] = xval;
            }
        };
        for p in &obs.points {
            let loc = mesh.locate(&p.location).unwrap();
            let w: Vec<(usize, f64)> = loc.vertices.iter().copied().zip(loc.weights).collect();
            put(r, p.variable - 1, p.time, &w, 0.2 * p.location.easting + 0.3 * p.location.northing, &mut a);
            d[r] = 1.0 / h.noise_point[p.variable - 1].unwrap();
            y[r] = p.value;
            r += 1;
        }
        for b in &obs.blocks {
            let inside: Vec<usize> = (0..n).filter(|&v| b.cell.contains(&mesh.vertices()[v])).collect();
            let w: Vec<(usize, f64)> = inside.iter().map(|&v| (v, 1.0 / inside.len() as f64)).collect();
            let xval = inside.iter().map(|&v| 0.2 * mesh.vertices()[v].easting + 0.3 * mesh.vertices()[v].northing).sum::<f64>() / inside.len() as f64;
            put(r, b.variable - 1, b.time, &w, xval, &mut a);
            d[r] = 1.0 / h.noise_grid[b.variable - 1].unwrap();
            y[r] = b.value;
            r += 1;
        }
        (q, a, d, y)
    }

    #[test]
    fn posterior_mean_and_system_match_dense_gls() {
        let spec = small_spec(7, 2);
        let model = FusionModel::new(spec.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = small_hyper(&model, &mut rng);
        let (q, a, d, y) = dense_oracle(&spec, &h);
        let sys = model.assemble_system(&h).unwrap();
        assert!((to_dense(&sys.q) - &q).abs().max() < 1e-10);
        assert!((to_dense(&sys.a) - &a).abs().max() < 1e-12);
        let dm = DMatrix::from_diagonal(&d);
        let qp = &q + a.transpose() * &dm * &a;
        let mean = qp.clone().cholesky().unwrap().solve(&(a.transpose() * &dm * &y));
        let post = model.conditional(&h).unwrap();
        for i in 0..mean.len() {
            assert!((post.mean[i] - mean[i]).abs() < 1e-8, "latent {i}");
        }
    }

    #[test]
    fn zero_beta_decouples_covariates_from_response_rows() {
        let spec = small_spec(3, 1);
        let model = FusionModel::new(spec).unwrap();
        let mut h = model.hyper_template(1.5, 1.0, 0.0, 0.1, 0.0);
        h.beta = vec![0.0, 0.0];
        let sys = model.assemble_system(&h).unwrap();
        let n_resp_rows: Vec<usize> = model.rows.iter().enumerate().filter(|(_, r)| model.groups[r.group].field == 2).map(|(i, _)| i).collect();
        for (i, j, v) in sys.a.iter() {
            if n_resp_rows.contains(&i) && j < 2 * model.n_nodes() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn single_field_reduces_to_kriging() {
        let mut spec = small_spec(5, 1);
        spec.fields.truncate(1);
        spec.observations.points.retain(|p| p.variable == 1);
        spec.observations.blocks.clear();
        spec.fixed_effects.clear();
        let model = FusionModel::new(spec.clone()).unwrap();
        let h = model.hyper_template(1.5, 1.0, 0.0, 0.1, 0.0);
        assert!(h.beta.is_empty());
        let post = model.conditional(&h).unwrap();
        // kriging predictor at the first observation location
        let sys = model.assemble_system(&h).unwrap();
        let q = to_dense(&sys.q);
        let a = to_dense(&sys.a);
        let cov = q.try_inverse().unwrap();
        let s = &a * &cov * a.transpose() + DMatrix::from_diagonal(&DVector::from_element(a.nrows(), 0.1));
        let y = DVector::from_vec(sys.y.clone());
        let krig = &a * &cov * a.transpose() * s.try_inverse().unwrap() * &y;
        let fitted = &a * DVector::from_vec(post.mean.clone());
        assert!((fitted - krig).abs().max() < 1e-8);
    }

    #[test]
    fn linear_predictor_matches_operator_rows() {
        let spec = small_spec(11, 2);
        let model = FusionModel::new(spec.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = small_hyper(&model, &mut rng);
        let latents: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sys = model.assemble_system(&h).unwrap();
        let fitted = sys.a.matvec(&latents);
        let obs = &spec.observations;
        let np = obs.points.len();
        for (i, p) in obs.points.iter().enumerate().filter(|(_, p)| p.variable == 3) {
            let v = model.linear_predictor(&h, &latents, &Target::Point { location: p.location, time: p.time }).unwrap();
            assert!((v - fitted[i]).abs() < 1e-12);
        }
        for (i, b) in obs.blocks.iter().enumerate().filter(|(_, b)| b.variable == 3) {
            let v = model.linear_predictor(&h, &latents, &Target::Block { cell: b.cell, time: b.time }).unwrap();
            assert!((v - fitted[np + i]).abs() < 1e-12);
        }
        let zero = vec![0.0; model.dim()];
        let mut alpha = zero.clone();
        alpha[model.linear_offset() + 2] = 0.7;
        let v = model.linear_predictor(&h, &alpha, &Target::Point { location: Point2::new(1.0, 1.0), time: 1 }).unwrap();
        assert_eq!(v, 0.7);
    }

    #[test]
    fn permuting_observations_leaves_posterior_unchanged() {
        let spec = small_spec(21, 2);
        let model = FusionModel::new(spec.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = small_hyper(&model, &mut rng);
        let mut shuffled = spec.clone();
        shuffled.observations.points.reverse();
        shuffled.observations.blocks.swap(0, 3);
        let m2 = FusionModel::new(shuffled).unwrap();
        let a = model.conditional(&h).unwrap();
        let b = m2.conditional(&h).unwrap();
        for i in 0..a.mean.len() {
            assert!((a.mean[i] - b.mean[i]).abs() < 1e-10);
        }
        assert!((a.log_lik - b.log_lik).abs() < 1e-9);
    }

    #[test]
    fn large_grid_noise_approaches_point_only_fit() {
        let spec = small_spec(4, 1);
        let model = FusionModel::new(spec.clone()).unwrap();
        let mut points_only = spec.clone();
        points_only.observations.blocks.clear();
        let pm = FusionModel::new(points_only).unwrap();
        let hp = pm.hyper_template(1.5, 0.8, 0.3, 0.1, 0.4);
        let target = pm.conditional(&hp).unwrap().mean;
        let mut last = f64::INFINITY;
        for tau in [1.0, 1e2, 1e4, 1e6] {
            let mut h = hp.clone();
            h.noise_grid = h.noise_grid.iter().enumerate().map(|(k, _)| model.hyper_template(1.0, 1.0, 0.0, tau, 0.0).noise_grid[k]).collect();
            let m = model.conditional(&h).unwrap().mean;
            let diff = m.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < last);
            last = diff;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn missing_field_observations_rejected() {
        let mut spec = small_spec(1, 1);
        spec.observations.points.retain(|p| p.variable != 2);
        assert!(FusionModel::new(spec).is_err());
    }

    #[test]
    fn param_names_round_trip() {
        for id in [ParamId::Range(0), ParamId::Sd(2), ParamId::Ar(1), ParamId::NoisePoint(0), ParamId::NoiseGrid(2), ParamId::Beta(1)] {
            assert_eq!(ParamId::from_name(&id.name()), Some(id));
        }
    }
}
