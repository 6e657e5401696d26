//! Rectangular domains, structured triangular meshes and P1 finite-element
//! matrices.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CscMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub easting: f64,
    pub northing: f64,
}

impl Point2 {
    pub const fn new(easting: f64, northing: f64) -> Self {
        Self { easting, northing }
    }

    pub fn is_finite(&self) -> bool {
        self.easting.is_finite() && self.northing.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }
}

/// Axis-aligned rectangle `[xmin, xmax] × [ymin, ymax]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub const fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Self { xmin, xmax, ymin, ymax }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn centroid(&self) -> Point2 {
        Point2::new(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Point2) -> bool {
        p.easting >= self.xmin && p.easting <= self.xmax && p.northing >= self.ymin && p.northing <= self.ymax
    }

    pub fn expand(&self, d: f64) -> Rect {
        Rect::new(self.xmin - d, self.xmax + d, self.ymin - d, self.ymax + d)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.xmin <= other.xmax && other.xmin <= self.xmax && self.ymin <= other.ymax && other.ymin <= self.ymax
    }

    pub fn is_valid(&self) -> bool {
        [self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite())
            && self.width() > 0.0
            && self.height() > 0.0
    }
}

/// Triangulated 2-D domain.
#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<Point2>,
    triangles: Vec<[usize; 3]>,
    interior_bbox: Rect,
    buffer_width: f64,
    locator: Locator,
}

/// Uniform bucket grid over the mesh bounding box; each bucket lists the
/// triangles whose bounding box overlaps it.
#[derive(Clone, Debug)]
struct Locator {
    bbox: Rect,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl Locator {
    fn new(vertices: &[Point2], triangles: &[[usize; 3]]) -> Self {
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for v in vertices {
            xmin = xmin.min(v.easting);
            xmax = xmax.max(v.easting);
            ymin = ymin.min(v.northing);
            ymax = ymax.max(v.northing);
        }
        let bbox = Rect::new(xmin, xmax, ymin, ymax);
        let side = (triangles.len().max(1) as f64).sqrt().ceil() as usize;
        let (nx, ny) = (side.max(1), side.max(1));
        let mut buckets = vec![Vec::new(); nx * ny];
        let loc = Self { bbox, nx, ny, buckets: Vec::new() };
        for (t, tri) in triangles.iter().enumerate() {
            let pts = tri.map(|i| vertices[i]);
            let txmin = pts.iter().map(|p| p.easting).fold(f64::INFINITY, f64::min);
            let txmax = pts.iter().map(|p| p.easting).fold(f64::NEG_INFINITY, f64::max);
            let tymin = pts.iter().map(|p| p.northing).fold(f64::INFINITY, f64::min);
            let tymax = pts.iter().map(|p| p.northing).fold(f64::NEG_INFINITY, f64::max);
            let (i0, j0) = loc.bucket(txmin, tymin);
            let (i1, j1) = loc.bucket(txmax, tymax);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t);
                }
            }
        }
        Self { buckets, ..loc }
    }

    fn bucket(&self, x: f64, y: f64) -> (usize, usize) {
        let fx = (x - self.bbox.xmin) / self.bbox.width().max(f64::MIN_POSITIVE);
        let fy = (y - self.bbox.ymin) / self.bbox.height().max(f64::MIN_POSITIVE);
        let i = ((fx * self.nx as f64).floor().max(0.0) as usize).min(self.nx - 1);
        let j = ((fy * self.ny as f64).floor().max(0.0) as usize).min(self.ny - 1);
        (i, j)
    }
}

fn signed_area(a: Point2, b: Point2, c: Point2) -> f64 {
    0.5 * ((b.easting - a.easting) * (c.northing - a.northing) - (c.easting - a.easting) * (b.northing - a.northing))
}

/// Result of locating a point: containing triangle, its vertex indices and
/// barycentric weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub triangle: usize,
    pub vertices: [usize; 3],
    pub weights: [f64; 3],
}

impl Mesh {
    /// Validates and wraps an explicit triangulation.
    pub fn from_parts(
        vertices: Vec<Point2>,
        triangles: Vec<[usize; 3]>,
        interior_bbox: Rect,
        buffer_width: f64,
    ) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(Error::Input("mesh needs at least one triangle".into()));
        }
        if let Some(i) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("vertex {i} has non-finite coordinates")));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::Input(format!("triangle {t} references a missing vertex")));
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if !(area > 0.0) {
                return Err(Error::Input(format!("triangle {t} has non-positive signed area {area}")));
            }
        }
        if !interior_bbox.is_valid() || !(buffer_width >= 0.0) {
            return Err(Error::Input("invalid interior bounding box or buffer".into()));
        }
        let locator = Locator::new(&vertices, &triangles);
        let mesh = Self { vertices, triangles, interior_bbox, buffer_width, locator };
        let b = interior_bbox;
        for corner in [
            Point2::new(b.xmin, b.ymin),
            Point2::new(b.xmax, b.ymin),
            Point2::new(b.xmin, b.ymax),
            Point2::new(b.xmax, b.ymax),
            b.centroid(),
        ] {
            mesh.locate(&corner)?;
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn interior_bbox(&self) -> Rect {
        self.interior_bbox
    }

    pub fn buffer_width(&self) -> f64 {
        self.buffer_width
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Indices of vertices inside the closed interior bounding box.
    pub fn interior_vertices(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&i| self.interior_bbox.contains(&self.vertices[i])).collect()
    }

    /// Finds the triangle containing `p` and its barycentric weights.
    pub fn locate(&self, p: &Point2) -> Result<Location> {
        if !p.is_finite() {
            return Err(Error::OutsideMesh(p.easting, p.northing));
        }
        let bb = &self.locator.bbox;
        let tol = 1e-12 * bb.diagonal().max(1.0);
        if p.easting < bb.xmin - tol || p.easting > bb.xmax + tol || p.northing < bb.ymin - tol || p.northing > bb.ymax + tol {
            return Err(Error::OutsideMesh(p.easting, p.northing));
        }
        let (i, j) = self.locator.bucket(p.easting, p.northing);
        let mut best: Option<(f64, Location)> = None;
        for &t in &self.locator.buckets[j * self.locator.nx + i] {
            let tri = self.triangles[t];
            let [a, b, c] = tri.map(|k| self.vertices[k]);
            let area = signed_area(a, b, c);
            let w = [signed_area(*p, b, c) / area, signed_area(a, *p, c) / area, signed_area(a, b, *p) / area];
            let minw = w.iter().copied().fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(m, _)| minw > *m) {
                best = Some((minw, Location { triangle: t, vertices: tri, weights: w }));
            }
            if minw >= 0.0 {
                break;
            }
        }
        match best {
            Some((minw, mut loc)) if minw >= -1e-10 => {
                for w in loc.weights.iter_mut() {
                    *w = w.max(0.0);
                }
                let s: f64 = loc.weights.iter().sum();
                loc.weights.iter_mut().for_each(|w| *w /= s);
                Ok(loc)
            }
            _ => Err(Error::OutsideMesh(p.easting, p.northing)),
        }
    }

    /// Writes the mesh as `vertices N triangles M`, then vertex and triangle lines.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "vertices {} triangles {}", self.vertices.len(), self.triangles.len())?;
        for v in &self.vertices {
            writeln!(w, "{} {}", v.easting, v.northing)?;
        }
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Reads the text format of [`Mesh::write_text`]. Without an explicit
    /// interior box the vertex bounding box is used with zero buffer.
    pub fn read_text<R: BufRead>(r: R, interior: Option<(Rect, f64)>) -> Result<Self> {
        let mut lines = r.lines().filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let header = lines.next().ok_or_else(|| Error::Input("empty mesh file".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (n, m) = match parts.as_slice() {
            ["vertices", n, "triangles", m] => (
                n.parse::<usize>().map_err(|e| Error::Input(format!("bad vertex count: {e}")))?,
                m.parse::<usize>().map_err(|e| Error::Input(format!("bad triangle count: {e}")))?,
            ),
            _ => return Err(Error::Input(format!("bad mesh header: {header}"))),
        };
        let mut vertices = Vec::with_capacity(n);
        for k in 0..n {
            let line = lines.next().ok_or_else(|| Error::Input(format!("missing vertex line {k}")))??;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Input(format!("vertex line {k}: {e}")))?;
            if v.len() != 2 {
                return Err(Error::Input(format!("vertex line {k}: expected 2 numbers")));
            }
            vertices.push(Point2::new(v[0], v[1]));
        }
        let mut triangles = Vec::with_capacity(m);
        for k in 0..m {
            let line = lines.next().ok_or_else(|| Error::Input(format!("missing triangle line {k}")))??;
            let t: Vec<usize> = line
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Input(format!("triangle line {k}: {e}")))?;
            if t.len() != 3 {
                return Err(Error::Input(format!("triangle line {k}: expected 3 indices")));
            }
            triangles.push([t[0], t[1], t[2]]);
        }
        let (bbox, buffer) = match interior {
            Some(x) => x,
            None => {
                let loc = Locator::new(&vertices, &[]);
                (loc.bbox, 0.0)
            }
        };
        Self::from_parts(vertices, triangles, bbox, buffer)
    }
}

/// Regular split-square triangulation of `bbox` expanded by `buffer_width`.
pub fn build_structured_mesh(bbox: Rect, target_edge_length: f64, buffer_width: f64) -> Result<Mesh> {
    if !bbox.is_valid() {
        return Err(Error::Input(format!("degenerate bounding box {bbox:?}")));
    }
    if !(target_edge_length > 0.0) || !target_edge_length.is_finite() {
        return Err(Error::Input("target edge length must be positive".into()));
    }
    if !(buffer_width >= 0.0) || !buffer_width.is_finite() {
        return Err(Error::Input("buffer width must be non-negative".into()));
    }
    let outer = bbox.expand(buffer_width);
    // guard against ceil(3.0000000001) = 4 from rounding
    let nx = ((outer.width() / target_edge_length) - 1e-9).ceil().max(1.0) as usize;
    let ny = ((outer.height() / target_edge_length) - 1e-9).ceil().max(1.0) as usize;
    let hx = outer.width() / nx as f64;
    let hy = outer.height() / ny as f64;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        let y = if j == ny { outer.ymax } else { outer.ymin + j as f64 * hy };
        for i in 0..=nx {
            let x = if i == nx { outer.xmax } else { outer.xmin + i as f64 * hx };
            vertices.push(Point2::new(x, y));
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    Mesh::from_parts(vertices, triangles, bbox, buffer_width)
}

/// Lumped mass matrix `C` (diagonal) and stiffness matrix `G`.
#[derive(Clone, Debug)]
pub struct FemMatrices {
    pub c: CscMatrix,
    pub g: CscMatrix,
    /// Diagonal of the lumped `C`.
    pub c_diag: Vec<f64>,
}

pub fn assemble_fem(mesh: &Mesh) -> FemMatrices {
    let n = mesh.n_vertices();
    let mut c_diag = vec![0.0; n];
    let mut trips = Vec::with_capacity(9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.triangle_area(t);
        let p = tri.map(|i| mesh.vertices[i]);
        // edge vectors opposite each vertex
        let e = [
            (p[2].easting - p[1].easting, p[2].northing - p[1].northing),
            (p[0].easting - p[2].easting, p[0].northing - p[2].northing),
            (p[1].easting - p[0].easting, p[1].northing - p[0].northing),
        ];
        for a in 0..3 {
            c_diag[tri[a]] += area / 3.0;
            for b in 0..3 {
                let v = (e[a].0 * e[b].0 + e[a].1 * e[b].1) / (4.0 * area);
                trips.push((tri[a], tri[b], v));
            }
        }
    }
    let mut g = CscMatrix::from_triplets(n, n, &trips);
    // exact null space: each diagonal is minus its off-diagonal row sum
    let diag_pos: Vec<usize> = (0..n).map(|i| g.position(i, i).expect("vertex without triangle")).collect();
    let mut off = vec![0.0; n];
    for (i, j, v) in g.iter() {
        if i != j {
            off[j] += v;
        }
    }
    for i in 0..n {
        g.values_mut()[diag_pos[i]] = -off[i];
    }
    FemMatrices { c: CscMatrix::diagonal(&c_diag), g, c_diag }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> Rect {
        Rect::new(0.0, 1.0, 0.0, 1.0)
    }

    #[test]
    fn minimal_meshes_have_expected_counts() {
        let m = build_structured_mesh(unit(), 1.0, 0.0).unwrap();
        assert_eq!((m.n_vertices(), m.triangles().len()), (4, 2));
        let m = build_structured_mesh(unit(), 0.5, 0.0).unwrap();
        assert_eq!((m.n_vertices(), m.triangles().len()), (9, 8));
    }

    #[test]
    fn degenerate_bbox_rejected() {
        assert!(build_structured_mesh(Rect::new(0.0, 0.0, 0.0, 1.0), 0.5, 0.0).is_err());
        assert!(build_structured_mesh(unit(), 0.0, 0.0).is_err());
        assert!(build_structured_mesh(unit(), 0.5, -1.0).is_err());
    }

    #[test]
    fn two_triangle_fem_matches_hand_assembly() {
        let m = build_structured_mesh(unit(), 1.0, 0.0).unwrap();
        let fem = assemble_fem(&m);
        // vertices 0 (0,0) and 3 (1,1) sit on the shared diagonal
        let expect_c = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for i in 0..4 {
            assert!((fem.c_diag[i] - expect_c[i]).abs() < 1e-15);
        }
        // right isosceles triangles give the 4-neighbour Laplacian
        let g = fem.g.to_dense();
        let expect_g = [
            [1.0, -0.5, -0.5, 0.0],
            [-0.5, 1.0, 0.0, -0.5],
            [-0.5, 0.0, 1.0, -0.5],
            [0.0, -0.5, -0.5, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((g[i][j] - expect_g[i][j]).abs() < 1e-15, "G[{i}][{j}]");
            }
        }
    }

    #[test]
    fn paper_domain_contains_sampled_sensors() {
        use rand::{Rng, SeedableRng};
        let bbox = Rect::new(0.0, 10.0, 0.0, 5.0);
        let m = build_structured_mesh(bbox, 0.5, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..22 {
            let p = Point2::new(rng.random_range(0.0..10.0), rng.random_range(0.0..5.0));
            let loc = m.locate(&p).unwrap();
            // strictly inside: away from the mesh hull
            assert!(m.triangles()[loc.triangle].iter().all(|&v| m.vertices()[v].distance(&p) < 1.0));
            assert!(p.easting > -1.0 && p.easting < 11.0 && p.northing > -1.0 && p.northing < 6.0);
        }
    }

    #[test]
    fn locate_vertex_and_centroid() {
        let m = build_structured_mesh(unit(), 0.25, 0.0).unwrap();
        let v = m.vertices()[7];
        let loc = m.locate(&v).unwrap();
        for k in 0..3 {
            let expect = if loc.vertices[k] == 7 { 1.0 } else { 0.0 };
            assert!((loc.weights[k] - expect).abs() < 1e-12);
        }
        let tri = m.triangles()[5];
        let c = Point2::new(
            tri.iter().map(|&i| m.vertices()[i].easting).sum::<f64>() / 3.0,
            tri.iter().map(|&i| m.vertices()[i].northing).sum::<f64>() / 3.0,
        );
        let loc = m.locate(&c).unwrap();
        assert_eq!(loc.triangle, 5);
        for w in loc.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(matches!(m.locate(&Point2::new(2.0, 0.5)), Err(Error::OutsideMesh(..))));
    }

    #[test]
    fn text_round_trip() {
        let m = build_structured_mesh(Rect::new(0.0, 2.0, 0.0, 1.0), 0.5, 0.25).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("vertices 24 triangles 30\n"));
        let back = Mesh::read_text(&buf[..], Some((m.interior_bbox(), m.buffer_width()))).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.triangles(), m.triangles());
        assert!(Mesh::read_text(&b"vertices 3 triangles 1\n0 0\n1 0\n0 1\n0 2 1\n"[..], None).is_err());
    }

    #[test]
    fn fem_is_deterministic() {
        let m = build_structured_mesh(Rect::new(0.0, 3.0, 0.0, 2.0), 0.4, 0.5).unwrap();
        let a = assemble_fem(&m);
        let b = assemble_fem(&m);
        assert_eq!(a.g, b.g);
        assert_eq!(a.c_diag.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.c_diag.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mesh_area_and_fem_identities(
            w in 0.5f64..6.0, h in 0.5f64..6.0, edge in 0.2f64..1.5, buf in 0.0f64..1.5,
        ) {
            let bbox = Rect::new(1.0, 1.0 + w, -2.0, -2.0 + h);
            let m = build_structured_mesh(bbox, edge, buf).unwrap();
            let outer = bbox.expand(buf);
            prop_assert!((m.total_area() - outer.area()).abs() <= 1e-10 * outer.area());
            let fem = assemble_fem(&m);
            let csum: f64 = fem.c_diag.iter().sum();
            prop_assert!((csum - outer.area()).abs() <= 1e-10 * outer.area());
            prop_assert!(fem.c_diag.iter().all(|&c| c > 0.0));
            prop_assert!(fem.g.is_symmetric(1e-14));
            let g1 = fem.g.matvec(&vec![1.0; m.n_vertices()]);
            let gmax = fem.g.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(g1.iter().all(|&v| v.abs() <= 1e-14 * gmax));
            // spacing never exceeds the target
            let t = m.triangles()[0];
            let v = m.vertices();
            prop_assert!((v[t[1]].easting - v[t[0]].easting) <= edge + 1e-12);
        }

        #[test]
        fn locate_reconstructs_points(fx in 0.0f64..=1.0, fy in 0.0f64..=1.0) {
            let bbox = Rect::new(0.0, 10.0, 0.0, 5.0);
            let m = build_structured_mesh(bbox, 0.7, 1.3).unwrap();
            let p = Point2::new(10.0 * fx, 5.0 * fy);
            let loc = m.locate(&p).unwrap();
            let s: f64 = loc.weights.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(loc.weights.iter().all(|&w| w >= 0.0));
            let (mut x, mut y) = (0.0, 0.0);
            for k in 0..3 {
                x += loc.weights[k] * m.vertices()[loc.vertices[k]].easting;
                y += loc.weights[k] * m.vertices()[loc.vertices[k]].northing;
            }
            prop_assert!((x - p.easting).abs() < 1e-12 && (y - p.northing).abs() < 1e-12);
        }
    }
}
