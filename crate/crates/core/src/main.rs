use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stfusion::geometry::{build_structured_mesh, Point2, Rect};
use stfusion::inference::{fit, initial_hyper, read_grid, InferenceOptions, PriorKind, PriorSpec};
use stfusion::model::{FieldSpec, FixedEffect, FixedEffectKind, FusionModel, FusionModelSpec};
use stfusion::observation::{ingest_blocks, ingest_points, read_date_map, write_date_map, IngestSchema, ObservationBatch};
use stfusion::prediction::{predict_targets, write_esri_ascii, write_prediction_csv, Lattice, PredictionSurface, QuantileMethod};
use stfusion::simulation::{dump_replicate, generate_replicate, replicate_seed, run_study_with, SimConfig, StudyOptions};
use stfusion::Error;

const SCHEMA: &str = r#"# stfusion run configuration (TOML). Unknown keys are rejected.
# Relative paths are resolved against the directory of the config file.
#
# seed         optional; overrides simulation.seed (and is overridden by --seed)
# threads      optional worker count (overridden by --threads); results do not depend on it
# out          output directory (overridden by --out)
#
# [mesh]       structured mesh used by fit/predict; each key defaults to the simulation value
#   domain     [xmin, xmax, ymin, ymax] interior bounding box
#   edge       triangle edge length
#   buffer     width of the buffer strip around the interior
#
# [model]
#   fields                 variable names; the last one is the response
#   linear_prior_variance  prior variance of intercepts and fixed-effect coefficients
#   block_fallback         use the cell centroid when a block holds no mesh vertex
#   point_only             drop every block observation before fitting
#   fixed_effects          list of { kind = "trend", name, easting, northing }
#                          or { kind = "raster", name, path } (block CSV; value per cell)
#   [model.priors]         per-parameter prior overrides, e.g.
#                          rho_1 = { kind = "pc_range", rho0 = 1.0, alpha = 0.05 }
#                          sigma2_2 = { kind = "pc_sd", sigma0 = 1.0, alpha = 0.05 }
#                          a_3 = { kind = "pc_ar1", base = "zero", u = 0.8, alpha = 0.5 }
#                          tau2_p_1 = { kind = "log_normal", mu = -2.0, sd = 1.0 }
#                          beta_1 = { kind = "normal", mean = 0.0, sd = 3.0 }
#                          a_1 = { kind = "fixed", value = 0.5 }
#                          noise priors are stated on the noise standard deviation
#
# [data]
#   points       point CSV: variable,easting,northing,time,value
#   blocks       block CSV: variable,xmin,xmax,ymin,ymax,time,value (optional)
#   dates        time,date sidecar copied to the outputs (optional)
#   time_window  [first, last]: keep these times and renumber them from 1 (optional)
#   [data.standardize]  per-variable { mean, sd }: values become (value - mean) / sd;
#                       response predictions are transformed back
#
# [inference]
#   optimizer = { max_evals, xtol, ftol, initial_step }
#   hessian_step, design ("auto" | "ccd" | "factorial" | "mode"), ccd_f,
#   compute_latent_sd, dense_threshold
#
# [prediction]
#   fit                 directory holding grid.csv from `fit` (default: out)
#   targets             CSV easting,northing,time; time may be T + 1 (one-day forecast)
#   gaussian_quantiles  Gaussian intervals instead of mixture quantiles
#   raster_cellsize     write ESRI ASCII rasters of mean and sd over the interior box
#   raster_times        time slices of the rasters (default: the last time)
#
# [simulation]  synthetic design; see the defaults below
# [study]       n_replicates, models ("point_only" | "grid_only" | "joint" | "joint_missing_grid_covariates"),
#               param_table_max_t, inference, priors, gaussian_quantiles
#
# Defaults:
"#;

#[derive(Parser)]
#[command(name = "stfusion", version, about = "Spatio-temporal fusion of point and gridded observations")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write the generated data of every replicate (replicate-study).
    #[arg(long, global = true)]
    keep_data: bool,
    /// Print the configuration schema with defaults and exit.
    #[arg(long)]
    print_schema: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic replicate.
    Simulate,
    /// Fit the fusion model to the configured data.
    Fit,
    /// Predict the response at target points from a previous fit.
    Predict {
        /// Directory of the fit (overrides prediction.fit).
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Target CSV (overrides prediction.targets).
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Simulation study over replicates, models and window lengths.
    ReplicateStudy,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    mesh: MeshConfig,
    model: ModelConfig,
    data: DataConfig,
    inference: InferenceOptions,
    prediction: PredictionConfig,
    simulation: SimConfig,
    study: StudyOptions,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MeshConfig {
    domain: Option<[f64; 4]>,
    edge: Option<f64>,
    buffer: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelConfig {
    fields: Vec<String>,
    linear_prior_variance: f64,
    block_fallback: bool,
    point_only: bool,
    fixed_effects: Vec<FixedEffectConfig>,
    priors: BTreeMap<String, PriorKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fields: vec!["y1".into(), "y2".into(), "y3".into()],
            linear_prior_variance: 10.0,
            block_fallback: true,
            point_only: false,
            fixed_effects: vec![FixedEffectConfig::Trend { name: "trend".into(), easting: 0.2, northing: 0.3 }],
            priors: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum FixedEffectConfig {
    Trend { name: String, easting: f64, northing: f64 },
    Raster { name: String, path: PathBuf },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    points: Option<PathBuf>,
    blocks: Option<PathBuf>,
    dates: Option<PathBuf>,
    time_window: Option<[usize; 2]>,
    standardize: BTreeMap<String, Standardize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Standardize {
    mean: f64,
    sd: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PredictionConfig {
    fit: Option<PathBuf>,
    targets: Option<PathBuf>,
    gaussian_quantiles: bool,
    raster_cellsize: Option<f64>,
    raster_times: Vec<usize>,
}

enum Failure {
    /// Configuration, validation and I/O problems (exit 2).
    Invalid(String),
    /// Numerical failure (exit 3).
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Invalid(msg.into()))
}

/// Loaded configuration plus provenance.
struct Run {
    cfg: RunConfig,
    base: PathBuf,
    hash: String,
    out: PathBuf,
    seed: u64,
    threads: usize,
}

impl Run {
    fn load(cli: &Cli) -> Outcome<Self> {
        let (text, base) = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?;
                (text, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (String::new(), PathBuf::new()),
        };
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Failure::Invalid(format!("config: {e}")))?;
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        let seed = cli.seed.or(cfg.seed).unwrap_or(cfg.simulation.seed);
        cfg.simulation.seed = seed;
        let out = cli.out.clone().or_else(|| cfg.out.as_ref().map(|o| base.join(o))).unwrap_or_else(|| PathBuf::from("out"));
        let threads = cli.threads.or(cfg.threads).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if threads == 0 {
            return invalid("threads must be at least 1");
        }
        cfg.simulation.validate()?;
        cfg.inference_checks()?;
        Ok(Self { cfg, base, hash, out, seed, threads })
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn create(&self, name: &str) -> Outcome<BufWriter<File>> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        Ok(BufWriter::new(File::create(&path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?))
    }

    fn provenance(&self, command: &str) -> Vec<(&'static str, String)> {
        vec![
            ("command", command.to_string()),
            ("version", env!("CARGO_PKG_VERSION").to_string()),
            ("config_sha256", self.hash.clone()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn write_metadata(&self, name: &str, lines: &[(&str, String)]) -> Outcome<()> {
        let mut w = self.create(name)?;
        for (k, v) in lines {
            writeln!(w, "{k} = {v}")?;
        }
        w.flush()?;
        Ok(())
    }
}

impl RunConfig {
    fn inference_checks(&self) -> Outcome<()> {
        for o in [&self.inference, &self.study.inference] {
            if o.optimizer.max_evals == 0 || !(o.hessian_step > 0.0) || !(o.ccd_f > 1.0) {
                return invalid("inference: max_evals must be positive, hessian_step positive and ccd_f above 1");
            }
        }
        Ok(())
    }

    fn mesh_box(&self) -> (Rect, f64, f64) {
        let d = self.mesh.domain.unwrap_or(self.simulation.domain);
        (
            Rect::new(d[0], d[1], d[2], d[3]),
            self.mesh.edge.unwrap_or(self.simulation.mesh_edge),
            self.mesh.buffer.unwrap_or(self.simulation.mesh_buffer),
        )
    }
}

/// Observation model built from config and data files.
struct Loaded {
    model: FusionModel,
    dates: Option<BTreeMap<usize, String>>,
    dropped_blocks: usize,
}

fn load_model(run: &Run) -> Outcome<Loaded> {
    let cfg = &run.cfg;
    let (interior, edge, buffer) = cfg.mesh_box();
    let mesh = std::sync::Arc::new(build_structured_mesh(interior, edge, buffer)?);
    let fields = &cfg.model.fields;
    if fields.is_empty() {
        return invalid("model.fields must name at least one variable");
    }
    let schema = IngestSchema { domain: interior.expand(buffer), variables: fields.clone(), max_time: None };
    let Some(points_path) = &cfg.data.points else {
        return invalid("data.points is required");
    };
    let mut points = ingest_points(&run.path(points_path), &schema)?;
    let mut blocks = match &cfg.data.blocks {
        Some(p) => ingest_blocks(&run.path(p), &schema)?,
        None => Vec::new(),
    };
    let mut dates = match &cfg.data.dates {
        Some(p) => Some(read_date_map(File::open(run.path(p)).map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?)?),
        None => None,
    };
    if let Some([first, last]) = cfg.data.time_window {
        if first == 0 || last < first {
            return invalid(format!("data.time_window [{first}, {last}] is not a valid range"));
        }
        points.retain(|p| p.time >= first && p.time <= last);
        blocks.retain(|b| b.time >= first && b.time <= last);
        for p in points.iter_mut() {
            p.time -= first - 1;
        }
        for b in blocks.iter_mut() {
            b.time -= first - 1;
        }
        if let Some(d) = dates.as_mut() {
            *d = d.iter().filter(|(t, _)| **t >= first && **t <= last).map(|(t, s)| (t - first + 1, s.clone())).collect();
        }
    }
    for (name, s) in &cfg.data.standardize {
        let Some(k) = fields.iter().position(|f| f == name) else {
            return invalid(format!("data.standardize names unknown variable {name:?}"));
        };
        if !(s.sd > 0.0) || !s.mean.is_finite() {
            return invalid(format!("data.standardize.{name}: sd must be positive"));
        }
        for p in points.iter_mut().filter(|p| p.variable == k + 1) {
            p.value = (p.value - s.mean) / s.sd;
        }
        for b in blocks.iter_mut().filter(|b| b.variable == k + 1) {
            b.value = (b.value - s.mean) / s.sd;
        }
    }
    let mut dropped_blocks = 0;
    if cfg.model.point_only {
        dropped_blocks = blocks.len();
        blocks.clear();
        log::info!("point-only model: dropped {dropped_blocks} block observations");
    }
    log::info!("{} point and {} block observations", points.len(), blocks.len());
    let observations = ObservationBatch {
        points,
        blocks,
        variable_names: fields.iter().enumerate().map(|(k, f)| (k + 1, f.clone())).collect(),
    };
    let t = observations.max_time();
    if t == 0 {
        return invalid("no observations to fit");
    }
    let mut fixed_effects = Vec::new();
    for fe in &cfg.model.fixed_effects {
        fixed_effects.push(match fe {
            FixedEffectConfig::Trend { name, easting, northing } => FixedEffect::trend(name, *easting, *northing),
            FixedEffectConfig::Raster { name, path } => FixedEffect { name: name.clone(), kind: FixedEffectKind::Raster { cells: read_raster_cells(&run.path(path))? } },
        });
    }
    let spec = FusionModelSpec {
        mesh,
        fields: fields.iter().map(|f| FieldSpec { name: f.clone() }).collect(),
        fixed_effects,
        observations,
        t,
        linear_prior_variance: cfg.model.linear_prior_variance,
        block_fallback: cfg.model.block_fallback,
    };
    Ok(Loaded { model: FusionModel::new(spec)?, dates, dropped_blocks })
}

/// Cells and values of a lookup raster in block CSV layout.
fn read_raster_cells(path: &Path) -> Outcome<Vec<(Rect, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        xmin: f64,
        xmax: f64,
        ymin: f64,
        ymax: f64,
        value: f64,
    }
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let mut cells = Vec::new();
    for r in rd.deserialize::<Row>() {
        let r = r.map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
        let cell = Rect::new(r.xmin, r.xmax, r.ymin, r.ymax);
        if !cell.is_valid() || !r.value.is_finite() {
            return invalid(format!("{}: invalid raster cell", path.display()));
        }
        cells.push((cell, r.value));
    }
    if cells.is_empty() {
        return invalid(format!("{}: raster has no cells", path.display()));
    }
    Ok(cells)
}

fn priors_for(run: &Run, model: &FusionModel) -> Outcome<PriorSpec> {
    let mut priors = PriorSpec::defaults(model);
    priors.apply_overrides(&run.cfg.model.priors)?;
    Ok(priors)
}

fn cmd_simulate(run: &Run) -> Outcome<()> {
    let sim = &run.cfg.simulation;
    let rep = generate_replicate(sim, replicate_seed(run.seed, 0))?;
    dump_replicate(&run.out, &rep)?;
    let mut meta = run.provenance("simulate");
    meta.push(("replicate_seed", replicate_seed(run.seed, 0).to_string()));
    meta.push(("points", rep.points.len().to_string()));
    meta.push(("blocks", rep.blocks.len().to_string()));
    meta.push(("observed_days", format!("1..={}", sim.t_total - 1)));
    meta.push(("truth_days", format!("{} and {}", sim.t_total - 1, sim.t_total)));
    meta.push(("mesh_nodes", rep.mesh.n_vertices().to_string()));
    run.write_metadata("metadata.txt", &meta)?;
    log::info!("wrote {} points and {} blocks to {}", rep.points.len(), rep.blocks.len(), run.out.display());
    Ok(())
}

fn cmd_fit(run: &Run) -> Outcome<()> {
    let loaded = load_model(run)?;
    let model = &loaded.model;
    let priors = priors_for(run, model)?;
    let result = fit(model, &priors, &initial_hyper(model), &run.cfg.inference)?;
    if !result.mode.converged {
        log::warn!("mode search did not converge within {} evaluations; results are flagged in metadata.txt", result.mode.evals);
    }
    if result.hessian_fallback {
        log::warn!("grid used identity scaling because the Hessian was not negative definite");
    }
    let mut w = run.create("summary.csv")?;
    result.write_summary(&mut w)?;
    w.flush()?;
    let mut w = run.create("latent.csv")?;
    result.write_latent(model, &mut w)?;
    w.flush()?;
    let mut w = run.create("grid.csv")?;
    result.write_grid(&mut w)?;
    w.flush()?;
    if let Some(d) = &loaded.dates {
        write_date_map(run.create("dates.csv")?, d)?;
    }
    let obs = &model.spec().observations;
    let mut extra = run.provenance("fit");
    extra.push(("threads", run.threads.to_string()));
    extra.push(("times", model.n_times().to_string()));
    extra.push(("mesh_nodes", model.n_nodes().to_string()));
    extra.push(("points", obs.points.len().to_string()));
    extra.push(("blocks", obs.blocks.len().to_string()));
    extra.push(("dropped_blocks", loaded.dropped_blocks.to_string()));
    let mut w = run.create("metadata.txt")?;
    result.write_metadata(&mut w, &extra)?;
    w.flush()?;
    log::info!("fit written to {}", run.out.display());
    Ok(())
}

fn read_targets(path: &Path) -> Outcome<Vec<(Point2, usize)>> {
    #[derive(Deserialize)]
    struct Row {
        easting: f64,
        northing: f64,
        time: usize,
    }
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for r in rd.deserialize::<Row>() {
        let r = r.map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
        out.push((Point2::new(r.easting, r.northing), r.time));
    }
    Ok(out)
}

fn cmd_predict(run: &Run, fit_dir: Option<PathBuf>, targets: Option<PathBuf>) -> Outcome<()> {
    let pc = &run.cfg.prediction;
    let loaded = load_model(run)?;
    let model = &loaded.model;
    let t = model.n_times();
    let fit_dir = fit_dir.or_else(|| pc.fit.as_ref().map(|p| run.path(p))).unwrap_or_else(|| run.out.clone());
    let grid_path = fit_dir.join("grid.csv");
    let grid_file = File::open(&grid_path).map_err(|e| Failure::Invalid(format!("{}: {e}", grid_path.display())))?;
    let grid = read_grid(grid_file, &initial_hyper(model))?;
    let method = if pc.gaussian_quantiles { QuantileMethod::Gaussian } else { QuantileMethod::Mixture };
    let response = model.spec().fields.last().map(|f| f.name.clone()).unwrap_or_default();
    let back = run.cfg.data.standardize.get(&response).copied();
    let unscale = |s: &mut PredictionSurface| {
        if let Some(st) = back {
            for v in s.mean.iter_mut().chain(s.q025.iter_mut()).chain(s.q975.iter_mut()) {
                *v = *v * st.sd + st.mean;
            }
            for v in s.sd.iter_mut() {
                *v *= st.sd;
            }
        }
    };

    let mut meta = run.provenance("predict");
    meta.push(("fit", fit_dir.display().to_string()));
    meta.push(("grid_points", grid.len().to_string()));
    meta.push(("quantiles", if pc.gaussian_quantiles { "gaussian" } else { "mixture" }.to_string()));
    if let Some(path) = targets.or_else(|| pc.targets.as_ref().map(|p| run.path(p))) {
        let all = read_targets(&path)?;
        if let Some((_, time)) = all.iter().find(|(_, time)| *time == 0 || *time > t + 1) {
            return invalid(format!("target time {time} outside 1..={}; forecasts reach one day past the data ({})", t + 1, t + 1));
        }
        let inside: Vec<(Point2, usize)> = all.iter().copied().filter(|(p, _)| model.mesh().locate(p).is_ok()).collect();
        let skipped = all.len() - inside.len();
        if skipped > 0 {
            log::warn!("skipped {skipped} targets outside the mesh");
        }
        let mut surface = if inside.is_empty() {
            PredictionSurface { targets: Vec::new(), mean: Vec::new(), sd: Vec::new(), q025: Vec::new(), q975: Vec::new() }
        } else {
            predict_targets(model, &grid, &inside, method)?
        };
        unscale(&mut surface);
        let mut w = run.create("predictions.csv")?;
        write_prediction_csv(&mut w, &surface)?;
        w.flush()?;
        meta.push(("targets", inside.len().to_string()));
        meta.push(("skipped_outside_mesh", skipped.to_string()));
    }
    if let Some(cellsize) = pc.raster_cellsize {
        let lattice = Lattice::covering(&model.mesh().interior_bbox(), cellsize)?;
        let times = if pc.raster_times.is_empty() { vec![t] } else { pc.raster_times.clone() };
        for &time in &times {
            if time == 0 || time > t + 1 {
                return invalid(format!("raster time {time} outside 1..={}", t + 1));
            }
            let targets: Vec<(Point2, usize)> = lattice.centers().into_iter().map(|p| (p, time)).collect();
            let mut s = predict_targets(model, &grid, &targets, method)?;
            unscale(&mut s);
            write_esri_ascii(run.create(&format!("mean_t{time}.asc"))?, &lattice, &s.mean)?;
            write_esri_ascii(run.create(&format!("sd_t{time}.asc"))?, &lattice, &s.sd)?;
        }
        meta.push(("raster_cellsize", cellsize.to_string()));
        meta.push(("raster_times", times.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")));
    }
    run.write_metadata("prediction_metadata.txt", &meta)?;
    Ok(())
}

fn cmd_study(run: &Run, keep_data: bool) -> Outcome<()> {
    let data_dir = run.out.join("data");
    let report = run_study_with(&run.cfg.simulation, &run.cfg.study, |r, rep| {
        if keep_data {
            dump_replicate(&data_dir.join(format!("replicate_{r:03}")), rep)?;
        }
        Ok(())
    })?;
    let mut w = run.create("study_params.csv")?;
    report.write_params(&mut w)?;
    w.flush()?;
    let mut w = run.create("study_rmspe.csv")?;
    report.write_rmspe(&mut w)?;
    w.flush()?;
    let mut w = run.create("study_summary.txt")?;
    report.write_summary(&mut w)?;
    w.flush()?;
    let failed = report.failures().len();
    if failed > 0 {
        log::warn!("{failed} of {} fits failed; see study_summary.txt", report.fits.len());
    }
    let mut meta = run.provenance("replicate-study");
    meta.push(("n_replicates", run.cfg.study.n_replicates.to_string()));
    meta.push(("models", run.cfg.study.models.iter().map(|m| m.name()).collect::<Vec<_>>().join(" ")));
    meta.push(("t_train", run.cfg.simulation.t_train.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")));
    meta.push(("fits", report.fits.len().to_string()));
    meta.push(("failed", failed.to_string()));
    run.write_metadata("manifest.txt", &meta)?;
    Ok(())
}

fn schema_text() -> String {
    let defaults = toml::to_string(&RunConfig::default()).unwrap_or_default();
    format!("{SCHEMA}{defaults}")
}

fn execute(cli: Cli) -> Outcome<()> {
    if cli.print_schema {
        print!("{}", schema_text());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return invalid("no command given; see --help");
    };
    let run = Run::load(&cli)?;
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(run.threads).build_global() {
        log::debug!("thread pool already set: {e}");
    }
    match command {
        Command::Simulate => cmd_simulate(&run),
        Command::Fit => cmd_fit(&run),
        Command::Predict { fit, targets } => cmd_predict(&run, fit.clone(), targets.clone()),
        Command::ReplicateStudy => cmd_study(&run, cli.keep_data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).format_timestamp(None).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
