//! Point and block observations, their projection operators onto mesh
//! nodes, and CSV ingestion.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Point2, Rect};
use crate::sparse::CscMatrix;

/// Observation of one variable at a point. `variable` and `time` are 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointObs {
    pub variable: usize,
    pub location: Point2,
    pub time: usize,
    pub value: f64,
}

/// Observation of the average of one variable over a rectangular cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockObs {
    pub variable: usize,
    pub cell: Rect,
    pub time: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationBatch {
    pub points: Vec<PointObs>,
    pub blocks: Vec<BlockObs>,
    pub variable_names: BTreeMap<usize, String>,
}

impl ObservationBatch {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !self.variable_names.contains_key(&p.variable) {
                return Err(Error::Input(format!("point observation {i} references unnamed variable {}", p.variable)));
            }
            if p.time == 0 || !p.value.is_finite() || !p.location.is_finite() {
                return Err(Error::Input(format!("point observation {i} is malformed")));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if !self.variable_names.contains_key(&b.variable) {
                return Err(Error::Input(format!("block observation {i} references unnamed variable {}", b.variable)));
            }
            if b.time == 0 || !b.value.is_finite() || !b.cell.is_valid() {
                return Err(Error::Input(format!("block observation {i} is malformed")));
            }
        }
        Ok(())
    }

    pub fn max_time(&self) -> usize {
        self.points.iter().map(|p| p.time).chain(self.blocks.iter().map(|b| b.time)).max().unwrap_or(0)
    }
}

/// Sparse weights over mesh nodes, `(node, weight)`.
pub type NodeWeights = Vec<(usize, f64)>;

/// Barycentric weights of a point (zero weights dropped).
pub fn point_weights(mesh: &Mesh, p: &Point2) -> Result<NodeWeights> {
    let loc = mesh.locate(p)?;
    let mut w: NodeWeights = loc.vertices.iter().zip(loc.weights).filter(|(_, w)| *w > 0.0).map(|(&v, w)| (v, w)).collect();
    w.sort_by_key(|&(v, _)| v);
    Ok(w)
}

/// Equal weights `1/H` on the `H` vertices inside the closed cell. With
/// `fallback`, an empty cell uses the point weights of its centroid.
pub fn block_weights(mesh: &Mesh, cell: &Rect, fallback: bool) -> Result<NodeWeights> {
    let inside: Vec<usize> = (0..mesh.n_vertices()).filter(|&i| cell.contains(&mesh.vertices()[i])).collect();
    if inside.is_empty() {
        if fallback {
            log::warn!("cell {cell:?} contains no mesh vertex; using its centroid");
            return point_weights(mesh, &cell.centroid());
        }
        return Err(Error::Input(format!("cell {cell:?} contains no mesh vertex")));
    }
    let w = 1.0 / inside.len() as f64;
    Ok(inside.into_iter().map(|i| (i, w)).collect())
}

/// Observation operator on the stacked (time-major) vector of one field.
#[derive(Clone, Debug)]
pub struct ObsOperator {
    pub a: CscMatrix,
}

impl ObsOperator {
    fn from_rows(rows: &[(usize, NodeWeights)], n: usize, t: usize) -> Result<Self> {
        let mut trips = Vec::new();
        for (r, (time, w)) in rows.iter().enumerate() {
            if *time == 0 || *time > t {
                return Err(Error::Input(format!("observation {r} has time {time} outside 1..={t}")));
            }
            trips.extend(w.iter().map(|&(v, x)| (r, (time - 1) * n + v, x)));
        }
        Ok(Self { a: CscMatrix::from_triplets(rows.len(), n * t, &trips) })
    }

    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        self.a.matvec(field)
    }
}

pub fn point_operator(mesh: &Mesh, obs: &[PointObs], t: usize) -> Result<ObsOperator> {
    let rows = obs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            point_weights(mesh, &o.location)
                .map(|w| (o.time, w))
                .map_err(|e| Error::Input(format!("point observation {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    ObsOperator::from_rows(&rows, mesh.n_vertices(), t)
}

pub fn block_operator(mesh: &Mesh, obs: &[BlockObs], t: usize, fallback: bool) -> Result<ObsOperator> {
    let rows = obs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            block_weights(mesh, &o.cell, fallback)
                .map(|w| (o.time, w))
                .map_err(|e| Error::Input(format!("block observation {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    ObsOperator::from_rows(&rows, mesh.n_vertices(), t)
}

/// How CSV rows are validated: accepted locations and how the `variable`
/// column (a name or a 1-based id) maps to ids.
#[derive(Clone, Debug)]
pub struct IngestSchema {
    /// Region that locations and cells must fall in (domain plus buffer).
    pub domain: Rect,
    /// Variable names; the id of `variables[k]` is `k + 1`.
    pub variables: Vec<String>,
    pub max_time: Option<usize>,
}

impl IngestSchema {
    fn variable_id(&self, s: &str) -> Option<usize> {
        let s = s.trim();
        if let Some(k) = self.variables.iter().position(|v| v == s) {
            return Some(k + 1);
        }
        s.parse::<usize>().ok().filter(|&k| k >= 1 && k <= self.variables.len())
    }

    fn check_time(&self, time: usize) -> std::result::Result<(), String> {
        if time == 0 || self.max_time.is_some_and(|m| time > m) {
            return Err(format!("time {time} out of range"));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct PointRow {
    variable: String,
    easting: f64,
    northing: f64,
    time: usize,
    value: f64,
}

#[derive(Deserialize)]
struct BlockRow {
    variable: String,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    time: usize,
    value: f64,
}

fn read_rows<T, R, F, O>(reader: R, required: &[&str], mut convert: F) -> Result<Vec<O>>
where
    T: for<'de> Deserialize<'de>,
    R: Read,
    F: FnMut(T) -> std::result::Result<O, String>,
{
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        log::warn!("observation file is empty");
        return Ok(Vec::new());
    }
    let missing: Vec<&str> = required.iter().copied().filter(|c| !headers.iter().any(|h| h == *c)).collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("missing columns: {}", missing.join(", "))));
    }
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        match rec.deserialize::<T>(Some(&headers)).map_err(|e| e.to_string()).and_then(&mut convert) {
            Ok(o) => out.push(o),
            Err(msg) => problems.push(format!("line {line}: {msg}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Input(format!("invalid rows: {}", problems.join("; "))));
    }
    if out.is_empty() {
        log::warn!("observation file has no data rows");
    }
    Ok(out)
}

/// Reads `variable,easting,northing,time,value` rows.
pub fn read_points<R: Read>(reader: R, schema: &IngestSchema) -> Result<Vec<PointObs>> {
    read_rows(reader, &["variable", "easting", "northing", "time", "value"], |r: PointRow| {
        let variable = schema.variable_id(&r.variable).ok_or_else(|| format!("unknown variable {:?}", r.variable))?;
        let location = Point2::new(r.easting, r.northing);
        if !location.is_finite() || !schema.domain.contains(&location) {
            return Err(format!("location ({}, {}) outside the domain", r.easting, r.northing));
        }
        if !r.value.is_finite() {
            return Err("non-finite value".into());
        }
        schema.check_time(r.time)?;
        Ok(PointObs { variable, location, time: r.time, value: r.value })
    })
}

/// Reads `variable,xmin,xmax,ymin,ymax,time,value` rows.
pub fn read_blocks<R: Read>(reader: R, schema: &IngestSchema) -> Result<Vec<BlockObs>> {
    read_rows(reader, &["variable", "xmin", "xmax", "ymin", "ymax", "time", "value"], |r: BlockRow| {
        let variable = schema.variable_id(&r.variable).ok_or_else(|| format!("unknown variable {:?}", r.variable))?;
        let cell = Rect::new(r.xmin, r.xmax, r.ymin, r.ymax);
        if !cell.is_valid() {
            return Err("cell has zero or negative area".into());
        }
        if !cell.intersects(&schema.domain) {
            return Err("cell does not intersect the domain".into());
        }
        if !r.value.is_finite() {
            return Err("non-finite value".into());
        }
        schema.check_time(r.time)?;
        Ok(BlockObs { variable, cell, time: r.time, value: r.value })
    })
}

pub fn ingest_points(path: &Path, schema: &IngestSchema) -> Result<Vec<PointObs>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    read_points(f, schema).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn ingest_blocks(path: &Path, schema: &IngestSchema) -> Result<Vec<BlockObs>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    read_blocks(f, schema).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct DateRow {
    time: usize,
    date: String,
}

/// Reads the `time,date` sidecar.
pub fn read_date_map<R: Read>(reader: R) -> Result<BTreeMap<usize, String>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = BTreeMap::new();
    for rec in rdr.deserialize::<DateRow>() {
        let r = rec?;
        out.insert(r.time, r.date);
    }
    Ok(out)
}

pub fn write_date_map<W: Write>(w: W, dates: &BTreeMap<usize, String>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for (&time, date) in dates {
        wtr.serialize(DateRow { time, date: date.clone() })?;
    }
    wtr.flush()?;
    Ok(())
}

fn name_of(names: &BTreeMap<usize, String>, id: usize) -> String {
    names.get(&id).cloned().unwrap_or_else(|| id.to_string())
}

pub fn write_points<W: Write>(w: W, obs: &[PointObs], names: &BTreeMap<usize, String>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["variable", "easting", "northing", "time", "value"])?;
    for o in obs {
        wtr.write_record([
            name_of(names, o.variable),
            o.location.easting.to_string(),
            o.location.northing.to_string(),
            o.time.to_string(),
            o.value.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_blocks<W: Write>(w: W, obs: &[BlockObs], names: &BTreeMap<usize, String>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["variable", "xmin", "xmax", "ymin", "ymax", "time", "value"])?;
    for o in obs {
        wtr.write_record([
            name_of(names, o.variable),
            o.cell.xmin.to_string(),
            o.cell.xmax.to_string(),
            o.cell.ymin.to_string(),
            o.cell.ymax.to_string(),
            o.time.to_string(),
            o.value.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
