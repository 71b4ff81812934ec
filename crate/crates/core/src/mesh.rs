//! Triangulated planar domains and point location.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;

pub type Point = [f64; 2];

/// Relative tolerance on triangle area (against the bounding box area).
pub const DEGENERATE_AREA_TOL: f64 = 1e-14;

/// Slack allowed on barycentric coordinates when locating points.
pub const LOCATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularMesh {
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<[usize; 2]>,
}

/// Location of a point: containing triangle and barycentric coordinates
/// with respect to its (counter-clockwise) vertices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub triangle: usize,
    pub bary: [f64; 3],
}

impl TriangularMesh {
    /// Validates and orients a triangulation. Triangles are reordered to
    /// counter-clockwise orientation; boundary edges are derived.
    pub fn new(nodes: Vec<Point>, mut triangles: Vec<[usize; 3]>) -> Result<Self> {
        if nodes.len() < 3 || triangles.is_empty() {
            return Err(Error::InvalidMesh("need at least one triangle".into()));
        }
        if let Some(p) = nodes.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidMesh(format!("non-finite node {p:?}")));
        }
        let (lo, hi) = bounding_box(&nodes);
        let bbox_area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
        let tolerance = DEGENERATE_AREA_TOL * bbox_area;

        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= nodes.len()) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references a node outside 0..{}",
                    nodes.len()
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!("triangle {t} repeats a vertex")));
            }
            let a = signed_area(&nodes[tri[0]], &nodes[tri[1]], &nodes[tri[2]]);
            if a.abs() < tolerance || a == 0.0 {
                return Err(Error::DegenerateTriangle {
                    index: t,
                    area: a.abs(),
                    tolerance,
                });
            }
            if a < 0.0 {
                tri.swap(1, 2);
            }
        }

        let mut edge_count: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        for tri in &triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_count.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        if let Some((e, c)) = edge_count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::InvalidMesh(format!("edge {e:?} shared by {c} triangles")));
        }
        let boundary_edges = edge_count
            .into_iter()
            .filter(|&(_, c)| c == 1)
            .map(|(e, _)| e)
            .collect();

        Ok(Self {
            nodes,
            triangles,
            boundary_edges,
        })
    }

    /// Uniform triangulation of the unit square with `subdivisions` cells per
    /// side, each cell split along alternating diagonals.
    pub fn unit_square(subdivisions: usize) -> Result<Self> {
        if subdivisions == 0 {
            return Err(Error::InvalidMesh("subdivisions must be positive".into()));
        }
        let s = subdivisions;
        let h = 1.0 / s as f64;
        let idx = |i: usize, j: usize| j * (s + 1) + i;
        let mut nodes = Vec::with_capacity((s + 1) * (s + 1));
        for j in 0..=s {
            for i in 0..=s {
                nodes.push([i as f64 * h, j as f64 * h]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * s * s);
        for j in 0..s {
            for i in 0..s {
                let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                if (i + j) % 2 == 0 {
                    triangles.push([a, b, c]);
                    triangles.push([a, c, d]);
                } else {
                    triangles.push([a, b, d]);
                    triangles.push([b, c, d]);
                }
            }
        }
        Self::new(nodes, triangles)
    }

    /// Reads `x,y` node rows and `i,j,k` (0-based) triangle rows. Both files
    /// carry a header line.
    pub fn from_csv<R1: Read, R2: Read>(nodes: R1, triangles: R2) -> Result<Self> {
        let mut pts = Vec::new();
        for rec in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(nodes).records() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::InvalidMesh("node row needs x,y".into()));
            }
            pts.push([parse_f64(&rec[0])?, parse_f64(&rec[1])?]);
        }
        let mut tris = Vec::new();
        for rec in csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(triangles)
            .records()
        {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(Error::InvalidMesh("triangle row needs i,j,k".into()));
            }
            let mut t = [0usize; 3];
            for k in 0..3 {
                t[k] = rec[k]
                    .parse()
                    .map_err(|_| Error::InvalidMesh(format!("bad node index '{}'", &rec[k])))?;
            }
            tris.push(t);
        }
        Self::new(pts, tris)
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    /// Number of P1 basis functions.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self, t: usize) -> [Point; 3] {
        let tri = self.triangles[t];
        [self.nodes[tri[0]], self.nodes[tri[1]], self.nodes[tri[2]]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.vertices(t);
        signed_area(&a, &b, &c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.area(t)).sum()
    }

    pub fn centroid(&self, t: usize) -> Point {
        let [a, b, c] = self.vertices(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        bounding_box(&self.nodes)
    }

    /// Barycentric coordinates of `p` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, p: Point) -> [f64; 3] {
        let [a, b, c] = self.vertices(t);
        let area = signed_area(&a, &b, &c);
        let l0 = signed_area(&p, &b, &c) / area;
        let l1 = signed_area(&a, &p, &c) / area;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Brute-force search; see [`PointLocator`] for repeated queries.
    pub fn locate(&self, p: Point) -> Option<Location> {
        (0..self.n_triangles()).find_map(|t| self.try_triangle(t, p))
    }

    fn try_triangle(&self, t: usize, p: Point) -> Option<Location> {
        let bary = self.barycentric(t, p);
        if bary.iter().all(|&l| l >= -LOCATE_TOL) {
            Some(Location {
                triangle: t,
                bary: clamp_bary(bary),
            })
        } else {
            None
        }
    }

    /// Gradients of the three P1 hat functions on triangle `t`.
    pub fn hat_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.vertices(t);
        let two_area = 2.0 * signed_area(&a, &b, &c);
        [
            [(b[1] - c[1]) / two_area, (c[0] - b[0]) / two_area],
            [(c[1] - a[1]) / two_area, (a[0] - c[0]) / two_area],
            [(a[1] - b[1]) / two_area, (b[0] - a[0]) / two_area],
        ]
    }
}

/// Bucket grid over the mesh bounding box for fast repeated point location.
#[derive(Debug, Clone)]
pub struct PointLocator<'a> {
    mesh: &'a TriangularMesh,
    lo: Point,
    cell: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl<'a> PointLocator<'a> {
    pub fn new(mesh: &'a TriangularMesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let side = (mesh.n_triangles() as f64).sqrt().ceil().max(1.0) as usize;
        let dims = [side, side];
        let cell = [
            ((hi[0] - lo[0]) / side as f64).max(f64::MIN_POSITIVE),
            ((hi[1] - lo[1]) / side as f64).max(f64::MIN_POSITIVE),
        ];
        let mut buckets = vec![Vec::new(); side * side];
        for t in 0..mesh.n_triangles() {
            let v = mesh.vertices(t);
            let tlo = [
                v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
                v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
            ];
            let thi = [
                v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
                v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
            ];
            let (i0, j0) = cell_of(lo, cell, dims, tlo);
            let (i1, j1) = cell_of(lo, cell, dims, thi);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * dims[0] + i].push(t);
                }
            }
        }
        Self {
            mesh,
            lo,
            cell,
            dims,
            buckets,
        }
    }

    pub fn locate(&self, p: Point) -> Option<Location> {
        let (hi_x, hi_y) = (
            self.lo[0] + self.cell[0] * self.dims[0] as f64,
            self.lo[1] + self.cell[1] * self.dims[1] as f64,
        );
        let slack = 1e-9 * (hi_x - self.lo[0]).max(hi_y - self.lo[1]);
        if p[0] < self.lo[0] - slack || p[0] > hi_x + slack || p[1] < self.lo[1] - slack || p[1] > hi_y + slack
        {
            return None;
        }
        let (i, j) = cell_of(self.lo, self.cell, self.dims, p);
        self.buckets[j * self.dims[0] + i]
            .iter()
            .find_map(|&t| self.mesh.try_triangle(t, p))
            // points on bucket seams can fall through rounding; fall back
            .or_else(|| self.mesh.locate(p))
    }
}

fn cell_of(lo: Point, cell: [f64; 2], dims: [usize; 2], p: Point) -> (usize, usize) {
    let i = ((p[0] - lo[0]) / cell[0]).floor().clamp(0.0, (dims[0] - 1) as f64) as usize;
    let j = ((p[1] - lo[1]) / cell[1]).floor().clamp(0.0, (dims[1] - 1) as f64) as usize;
    (i, j)
}

fn clamp_bary(b: [f64; 3]) -> [f64; 3] {
    let mut c = b.map(|l| l.max(0.0));
    let s: f64 = c.iter().sum();
    c.iter_mut().for_each(|l| *l /= s);
    c
}

pub fn signed_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn bounding_box(nodes: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in nodes {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::InvalidMesh(format!("bad coordinate '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> TriangularMesh {
        TriangularMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn centroid_has_equal_weights() {
        let m = TriangularMesh::unit_square(3).unwrap();
        for t in 0..m.n_triangles() {
            let loc = m.locate(m.centroid(t)).unwrap();
            assert_eq!(loc.triangle, t);
            for l in loc.bary {
                assert!((l - 1.0 / 3.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn vertex_has_unit_coordinate() {
        let m = reference();
        let loc = m.locate([1.0, 0.0]).unwrap();
        assert!((loc.bary[1] - 1.0).abs() < 1e-15);
        assert!(loc.bary[0].abs() < 1e-15 && loc.bary[2].abs() < 1e-15);
    }

    #[test]
    fn random_points_reconstruct() {
        let m = TriangularMesh::unit_square(5).unwrap();
        let loc = PointLocator::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p = [rng.random::<f64>(), rng.random::<f64>()];
            let l = loc.locate(p).unwrap();
            let v = m.vertices(l.triangle);
            assert!(l.bary.iter().all(|&b| b >= 0.0));
            assert!((l.bary.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for k in 0..2 {
                let r: f64 = (0..3).map(|a| l.bary[a] * v[a][k]).sum();
                assert!((r - p[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outside_point_is_flagged() {
        let m = reference();
        assert!(m.locate([0.8, 0.8]).is_none());
        assert!(PointLocator::new(&m).locate([2.0, -1.0]).is_none());
    }

    #[test]
    fn clockwise_triangles_are_reoriented() {
        let m = TriangularMesh::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert!(m.area(0) > 0.0);
    }

    #[test]
    fn degenerate_triangle_is_rejected() {
        let nodes = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        let err = TriangularMesh::new(nodes, vec![[0, 1, 3], [0, 1, 2]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateTriangle { index: 1, .. }));
    }

    #[test]
    fn edge_sharing_counts() {
        let m = TriangularMesh::unit_square(4).unwrap();
        assert_eq!(m.n_nodes(), 25);
        assert_eq!(m.boundary_edges().len(), 16);
        assert!((m.total_area() - 1.0).abs() < 1e-14);
        let bad = TriangularMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [1.0, 1.0]],
            vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]],
        );
        assert!(matches!(bad, Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn csv_round_trip() {
        let nodes = "x,y\n0,0\n1,0\n1,1\n0,1\n";
        let tris = "i,j,k\n0,1,2\n0,2,3\n";
        let m = TriangularMesh::from_csv(nodes.as_bytes(), tris.as_bytes()).unwrap();
        assert_eq!(m.n_triangles(), 2);
        assert!((m.total_area() - 1.0).abs() < 1e-15);
        let bad = "i,j,k\n0,1,7\n";
        assert!(TriangularMesh::from_csv(nodes.as_bytes(), bad.as_bytes()).is_err());
    }
}
