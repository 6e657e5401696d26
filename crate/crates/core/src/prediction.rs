//! Response predictions with uncertainty: in-window point predictions,
//! one-step-ahead forecasts, interval coverage and raster output.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Rect};
use crate::inference::{fmt, mixture_quantile, FitResult};
use crate::model::{ConditionalPosterior, FusionModel, HyperVector, Target};
use crate::sparse::CholeskyFactor;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSurface {
    pub targets: Vec<(Point2, usize)>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantileMethod {
    /// Invert the Gaussian mixture over grid points.
    Mixture,
    /// Single Gaussian with the mixture mean and variance.
    Gaussian,
}

/// Mean and variance of the response predictor at each target under one
/// conditional posterior. Times up to `T` use the fitted latent values;
/// time `T + 1` propagates every field one AR(1) step.
pub fn target_moments(model: &FusionModel, h: &HyperVector, cond: &ConditionalPosterior, targets: &[(Point2, usize)]) -> Result<Vec<(f64, f64)>> {
    let t = model.n_times();
    let nf = model.n_fields();
    let mut scales: Vec<f64> = h.beta.clone();
    scales.push(1.0);
    let step: Vec<f64> = (0..nf).map(|k| scales[k] * h.ar[k]).collect();
    let dim = model.dim();
    let mut rows = Vec::with_capacity(targets.len());
    let mut spatial_w = Vec::new();
    for (i, &(p, time)) in targets.iter().enumerate() {
        if time == 0 || time > t + 1 {
            return Err(Error::Input(format!("target {i} has time {time}; predictions cover 1..={}", t + 1)));
        }
        let (w, x, _) = model.target_support(&Target::Point { location: p, time })?;
        let coef = if time <= t { &scales } else { &step };
        rows.push(model.predictor_coefficients(&w, &x, time.min(t), coef)?);
        if time > t {
            spatial_w.push((i, w));
        }
    }
    let rhs: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![0.0; dim];
            for &(c, val) in r {
                v[c] += val;
            }
            v
        })
        .collect();
    let solved = cond.factor.solve_columns(&rhs);
    let mut out: Vec<(f64, f64)> = rows
        .iter()
        .zip(rhs.iter().zip(&solved))
        .map(|(r, (v, s))| {
            let mean: f64 = r.iter().map(|&(c, val)| val * cond.mean[c]).sum();
            let var: f64 = v.iter().zip(s).map(|(a, b)| a * b).sum();
            (mean, var.max(0.0))
        })
        .collect();
    if !spatial_w.is_empty() {
        // innovation (1 - a²) Σ_k for each field, Σ_k the stationary spatial covariance
        for k in 0..nf {
            let coef2 = scales[k] * scales[k] * (1.0 - h.ar[k] * h.ar[k]);
            if coef2 == 0.0 {
                continue;
            }
            let qs = model.spatial_precision(h, k)?;
            let f = CholeskyFactor::new(&qs.lower_triangle())?;
            let n = model.n_nodes();
            let rhs: Vec<Vec<f64>> = spatial_w
                .iter()
                .map(|(_, w)| {
                    let mut v = vec![0.0; n];
                    for &(node, c) in w {
                        v[node] += c;
                    }
                    v
                })
                .collect();
            let sol = f.solve_columns(&rhs);
            for ((i, _), (v, s)) in spatial_w.iter().zip(rhs.iter().zip(&sol)) {
                out[*i].1 += coef2 * v.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok(out)
}

/// Mixes per-grid-point target moments with the grid weights.
pub fn combine_moments(weights: &[f64], per_point: &[Vec<(f64, f64)>], targets: &[(Point2, usize)], method: QuantileMethod) -> PredictionSurface {
    let n = targets.len();
    let std = Normal::standard();
    let z = std.inverse_cdf(0.975);
    let mut s = PredictionSurface {
        targets: targets.to_vec(),
        mean: Vec::with_capacity(n),
        sd: Vec::with_capacity(n),
        q025: Vec::with_capacity(n),
        q975: Vec::with_capacity(n),
    };
    for j in 0..n {
        let means: Vec<f64> = per_point.iter().map(|p| p[j].0).collect();
        let sds: Vec<f64> = per_point.iter().map(|p| p[j].1.sqrt()).collect();
        let mean: f64 = weights.iter().zip(&means).map(|(w, m)| w * m).sum();
        let second: f64 = weights.iter().zip(per_point).map(|(w, p)| w * (p[j].1 + p[j].0 * p[j].0)).sum();
        let sd = (second - mean * mean).max(0.0).sqrt();
        let (lo, hi) = match method {
            QuantileMethod::Mixture => (mixture_quantile(weights, &means, &sds, 0.025), mixture_quantile(weights, &means, &sds, 0.975)),
            QuantileMethod::Gaussian => (mean - z * sd, mean + z * sd),
        };
        s.mean.push(mean);
        s.sd.push(sd);
        s.q025.push(lo.min(mean));
        s.q975.push(hi.max(mean));
    }
    s
}

/// Predictions from weighted hyperparameter points, refitting the
/// conditional posterior at each point.
pub fn predict_targets(model: &FusionModel, grid: &[(HyperVector, f64)], targets: &[(Point2, usize)], method: QuantileMethod) -> Result<PredictionSurface> {
    if grid.is_empty() {
        return Err(Error::Input("prediction needs at least one hyperparameter point".into()));
    }
    let per_point: Vec<Vec<(f64, f64)>> = grid
        .par_iter()
        .map(|(h, _)| {
            let cond = model.conditional(h)?;
            target_moments(model, h, &cond, targets)
        })
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = grid.iter().map(|g| g.1).collect();
    Ok(combine_moments(&weights, &per_point, targets, method))
}

fn fit_grid(fit: &FitResult) -> Vec<(HyperVector, f64)> {
    fit.grid.iter().map(|g| (g.hyper.clone(), g.weight)).collect()
}

/// Response predictions at targets inside the training window.
pub fn predict_at(fit: &FitResult, model: &FusionModel, targets: &[(Point2, usize)], method: QuantileMethod) -> Result<PredictionSurface> {
    if let Some((i, (_, time))) = targets.iter().enumerate().find(|(_, (_, t))| *t == 0 || *t > model.n_times()) {
        return Err(Error::Input(format!("target {i} has time {time} outside the training window 1..={}", model.n_times())));
    }
    predict_targets(model, &fit_grid(fit), targets, method)
}

/// One-day-ahead forecasts; every target time must be `T + 1`.
pub fn forecast_one_day(fit: &FitResult, model: &FusionModel, targets: &[(Point2, usize)], method: QuantileMethod) -> Result<PredictionSurface> {
    let t = model.n_times();
    if let Some((i, (_, time))) = targets.iter().enumerate().find(|(_, (_, time))| *time != t + 1) {
        return Err(Error::Input(format!("target {i} has time {time}; only one-step forecasts (time {}) are supported", t + 1)));
    }
    predict_targets(model, &fit_grid(fit), targets, method)
}

/// Fraction of truths inside `[q025, q975]`.
pub fn coverage_95(surface: &PredictionSurface, truths: &[f64]) -> Result<f64> {
    if truths.is_empty() || truths.len() != surface.mean.len() {
        return Err(Error::Input(format!("coverage needs {} truths, got {}", surface.mean.len(), truths.len())));
    }
    let hits = truths.iter().enumerate().filter(|&(i, &y)| surface.q025[i] <= y && y <= surface.q975[i]).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// `easting,northing,time,mean,sd,q025,q975`
pub fn write_prediction_csv<W: Write>(w: W, surface: &PredictionSurface) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["easting", "northing", "time", "mean", "sd", "q025", "q975"])?;
    for (i, (p, time)) in surface.targets.iter().enumerate() {
        wr.write_record([
            fmt(p.easting),
            fmt(p.northing),
            time.to_string(),
            fmt(surface.mean[i]),
            fmt(surface.sd[i]),
            fmt(surface.q025[i]),
            fmt(surface.q975[i]),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Regular raster: `nrows × ncols` square cells from the lower-left corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
}

pub const NODATA: f64 = -9999.0;

impl Lattice {
    /// Smallest lattice of `cellsize` cells covering `bbox`.
    pub fn covering(bbox: &Rect, cellsize: f64) -> Result<Self> {
        if !(cellsize > 0.0) || !bbox.is_valid() {
            return Err(Error::Input(format!("invalid lattice: cellsize {cellsize} over {bbox:?}")));
        }
        let ncols = ((bbox.width() / cellsize) - 1e-9).ceil().max(1.0) as usize;
        let nrows = ((bbox.height() / cellsize) - 1e-9).ceil().max(1.0) as usize;
        Ok(Self { ncols, nrows, xll: bbox.xmin, yll: bbox.ymin, cellsize })
    }

    /// Cell centres, top row first, west to east within a row.
    pub fn centers(&self) -> Vec<Point2> {
        let mut out = Vec::with_capacity(self.ncols * self.nrows);
        for r in 0..self.nrows {
            let y = self.yll + (self.nrows - r) as f64 * self.cellsize - 0.5 * self.cellsize;
            for c in 0..self.ncols {
                out.push(Point2::new(self.xll + (c as f64 + 0.5) * self.cellsize, y));
            }
        }
        out
    }
}

/// ESRI ASCII grid. Values are in [`Lattice::centers`] order; non-finite
/// values are written as `NODATA_value`. Numbers use the shortest decimal
/// form that parses back to the same `f64`.
pub fn write_esri_ascii<W: Write>(mut w: W, lattice: &Lattice, values: &[f64]) -> Result<()> {
    if values.len() != lattice.ncols * lattice.nrows {
        return Err(Error::Dimension(format!("{} values for a {}x{} raster", values.len(), lattice.nrows, lattice.ncols)));
    }
    writeln!(w, "ncols {}", lattice.ncols)?;
    writeln!(w, "nrows {}", lattice.nrows)?;
    writeln!(w, "xllcorner {}", fmt(lattice.xll))?;
    writeln!(w, "yllcorner {}", fmt(lattice.yll))?;
    writeln!(w, "cellsize {}", fmt(lattice.cellsize))?;
    writeln!(w, "NODATA_value {}", fmt(NODATA))?;
    for row in values.chunks(lattice.ncols) {
        let line: Vec<String> = row.iter().map(|&v| fmt(if v.is_finite() { v } else { NODATA })).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads an ESRI ASCII grid; `NODATA_value` cells come back as NaN.
pub fn read_esri_ascii<R: BufRead>(r: R) -> Result<(Lattice, Vec<f64>)> {
    let mut lines = r.lines();
    let mut header = std::collections::BTreeMap::new();
    for _ in 0..6 {
        let line = lines.next().ok_or_else(|| Error::Input("raster header is truncated".into()))??;
        let mut it = line.split_whitespace();
        let (Some(k), Some(v)) = (it.next(), it.next()) else {
            return Err(Error::Input(format!("bad raster header line {line:?}")));
        };
        header.insert(k.to_ascii_lowercase(), v.to_string());
    }
    let get = |k: &str| -> Result<f64> {
        header.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Input(format!("raster header lacks {k}")))
    };
    let lattice = Lattice {
        ncols: get("ncols")? as usize,
        nrows: get("nrows")? as usize,
        xll: get("xllcorner")?,
        yll: get("yllcorner")?,
        cellsize: get("cellsize")?,
    };
    let nodata = get("nodata_value")?;
    let mut values = Vec::with_capacity(lattice.ncols * lattice.nrows);
    for line in lines {
        for tok in line?.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Input(format!("bad raster value {tok:?}")))?;
            values.push(if v == nodata { f64::NAN } else { v });
        }
    }
    if values.len() != lattice.ncols * lattice.nrows {
        return Err(Error::Input(format!("raster has {} values, header says {}", values.len(), lattice.ncols * lattice.nrows)));
    }
    Ok((lattice, values))
}
