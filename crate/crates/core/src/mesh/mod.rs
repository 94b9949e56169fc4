//! Planar triangulations of a study domain, linear finite-element matrices and
//! barycentric projectors from mesh nodes to arbitrary locations.

mod delaunay;
mod projector;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{from_triplets, SparseMatrix};

pub use projector::Projector;

use delaunay::{orient, Triangulation};

/// A location in projected planar coordinates (metres).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn arr(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

fn default_max_nodes() -> usize {
    20_000
}

/// Study polygon plus mesh resolution controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Simple counter-clockwise polygon.
    pub boundary: Vec<Point2>,
    pub max_edge_inner: f64,
    pub max_edge_outer: f64,
    pub buffer_width: f64,
    /// Upper bound on the number of mesh nodes.
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
}

impl DomainSpec {
    /// Axis-aligned rectangle.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64, max_edge_inner: f64, max_edge_outer: f64, buffer_width: f64) -> Self {
        Self {
            boundary: vec![
                Point2::new(x0, y0),
                Point2::new(x1, y0),
                Point2::new(x1, y1),
                Point2::new(x0, y1),
            ],
            max_edge_inner,
            max_edge_outer,
            buffer_width,
            max_nodes: default_max_nodes(),
        }
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.boundary)
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Point2) -> bool {
        point_in_polygon(&self.boundary, p.arr())
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.boundary;
        if b.len() < 3 {
            return Err(Error::invalid("domain boundary needs at least three vertices"));
        }
        if b.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid("domain boundary has non-finite coordinates"));
        }
        let area = polygon_area(b);
        let scale = bbox(b.iter().map(|p| p.arr())).1;
        let diam = (scale[0]).max(scale[1]);
        if area.abs() <= 1e-12 * diam * diam || diam == 0.0 {
            return Err(Error::invalid("domain polygon is degenerate (zero area)"));
        }
        if area < 0.0 {
            return Err(Error::invalid("domain polygon must be counter-clockwise"));
        }
        if self_intersects(b) {
            return Err(Error::invalid("domain polygon is self-intersecting"));
        }
        if !(self.max_edge_inner > 0.0) || !self.max_edge_inner.is_finite() {
            return Err(Error::invalid("max_edge_inner must be positive"));
        }
        if !(self.max_edge_outer >= self.max_edge_inner) || !self.max_edge_outer.is_finite() {
            return Err(Error::invalid("max_edge_outer must be at least max_edge_inner"));
        }
        if !(self.buffer_width >= 0.0) || !self.buffer_width.is_finite() {
            return Err(Error::invalid("buffer_width must be non-negative"));
        }
        Ok(())
    }
}

/// Triangulated domain with lumped mass matrix `C` and stiffness matrix `G`.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub nodes: Vec<Point2>,
    pub triangles: Vec<[usize; 3]>,
    /// Lumped mass, one entry per node.
    pub mass: Vec<f64>,
    pub stiffness: SparseMatrix,
}

impl TriMesh {
    /// Assemble the finite-element matrices for a given node/triangle list.
    pub fn from_parts(nodes: Vec<Point2>, mut triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = nodes.len();
        let mut mass = vec![0.0; n];
        let mut trip = Vec::with_capacity(9 * triangles.len());
        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::invalid(format!("triangle {t} references a missing node")));
            }
            let [a, b, c] = tri.map(|v| nodes[v]);
            let mut area2 = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
            if area2 < 0.0 {
                tri.swap(1, 2);
                area2 = -area2;
            }
            if !(area2 > 0.0) {
                return Err(Error::invalid(format!("triangle {t} has zero area")));
            }
            let area = 0.5 * area2;
            let p = tri.map(|v| nodes[v]);
            // gradient of each hat function times 2A
            let grads: [[f64; 2]; 3] = std::array::from_fn(|i| {
                let j = (i + 1) % 3;
                let k = (i + 2) % 3;
                [p[j].y - p[k].y, p[k].x - p[j].x]
            });
            for i in 0..3 {
                mass[tri[i]] += area / 3.0;
                for j in 0..3 {
                    let g = (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]) / (4.0 * area);
                    trip.push((tri[i], tri[j], g));
                }
            }
        }
        if mass.iter().any(|&m| m <= 0.0) {
            return Err(Error::invalid("mesh has nodes not attached to any triangle"));
        }
        let stiffness = from_triplets(n, n, &trip);
        Ok(Self {
            nodes,
            triangles,
            mass,
            stiffness,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Total area covered by the triangles.
    pub fn area(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|v| self.nodes[v]);
        0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x))
    }

    /// Unique undirected edges `(min, max)` in sorted order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Plain-text listing: `nodes <n> triangles <t>`, node rows, index triples.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nodes {} triangles {}", self.nodes.len(), self.triangles.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{:?} {:?}", p.x, p.y);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::invalid("empty mesh file"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || Error::invalid(format!("bad mesh header `{header}`"));
        if parts.len() != 4 || parts[0] != "nodes" || parts[2] != "triangles" {
            return Err(bad_header());
        }
        let n: usize = parts[1].parse().map_err(|_| bad_header())?;
        let t: usize = parts[3].parse().map_err(|_| bad_header())?;
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let line = lines.next().ok_or_else(|| Error::invalid(format!("missing node row {i}")))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("bad node row {i}")))?;
            if v.len() != 2 {
                return Err(Error::invalid(format!("bad node row {i}")));
            }
            nodes.push(Point2::new(v[0], v[1]));
        }
        let mut tris = Vec::with_capacity(t);
        for i in 0..t {
            let line = lines.next().ok_or_else(|| Error::invalid(format!("missing triangle row {i}")))?;
            let v: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("bad triangle row {i}")))?;
            if v.len() != 3 {
                return Err(Error::invalid(format!("bad triangle row {i}")));
            }
            tris.push([v[0], v[1], v[2]]);
        }
        Self::from_parts(nodes, tris)
    }
}

/// Triangulate the domain plus its outer buffer and assemble FEM matrices.
///
/// Nodes come from a triangular lattice inside the polygon (spacing
/// `max_edge_inner`), samples along the boundary, a coarser lattice in the
/// buffer ring and the buffer's outer hull. Delaunay triangles whose edges
/// exceed the local target length are refined by longest-edge bisection; the
/// target grows linearly with distance from the polygon.
pub fn build_mesh(domain: &DomainSpec) -> Result<TriMesh> {
    domain.validate()?;
    let poly: Vec<[f64; 2]> = domain.boundary.iter().map(Point2::arr).collect();
    let h_in = domain.max_edge_inner;
    let h_out = domain.max_edge_outer;
    let buffer = domain.buffer_width;

    let outer = if buffer > 0.0 {
        offset_hull(&poly, buffer, h_out)
    } else {
        Vec::new()
    };
    let outer_area = if buffer > 0.0 { polygon_area(&outer) } else { 0.0 };
    let lattice_density = |h: f64| 1.0 / (0.5 * 3f64.sqrt() * h * h);
    let estimate = polygon_area(&poly) * lattice_density(h_in)
        + (outer_area - polygon_area(&poly)).max(0.0) * lattice_density(h_out);
    if estimate > domain.max_nodes as f64 {
        return Err(Error::invalid(format!(
            "mesh would need about {} nodes, above the cap of {}",
            estimate.round() as u64,
            domain.max_nodes
        )));
    }

    let mut points: Vec<[f64; 2]> = Vec::new();
    // polygon boundary
    points.extend(sample_ring(&poly, h_in));
    let d_in = |p: [f64; 2]| distance_to_ring(&poly, p);
    for p in lattice(&poly, h_in) {
        if point_in_polygon(&poly, p) && d_in(p) > 0.5 * h_in {
            points.push(p);
        }
    }
    if buffer > 0.0 {
        points.extend(sample_ring(&outer, h_out));
        for p in lattice(&outer, h_out) {
            if !point_in_polygon(&poly, p)
                && point_in_polygon(&outer, p)
                && d_in(p) > 0.5 * h_out.min(buffer)
                && distance_to_ring(&outer, p) > 0.5 * h_out
            {
                points.push(p);
            }
        }
    }

    let all = if buffer > 0.0 { &outer } else { &poly };
    let (lo, hi) = bbox(all.iter().copied());
    let mut tri = Triangulation::new(lo, [lo[0] + hi[0], lo[1] + hi[1]]);
    let mut ring_ids = Vec::new();
    for (k, p) in points.iter().enumerate() {
        let id = tri.insert(*p);
        if k < sample_ring_len(&poly, h_in) {
            ring_ids.push(id);
        }
    }

    // conform the polygon boundary when it delimits the mesh
    if buffer == 0.0 {
        conform_ring(&mut tri, &mut ring_ids, domain.max_nodes)?;
    }

    let grading = 0.5;
    let target = |c: [f64; 2]| -> f64 {
        if point_in_polygon(&poly, c) {
            h_in
        } else {
            (h_in + grading * d_in(c)).min(h_out)
        }
    };
    let keep = |c: [f64; 2]| buffer > 0.0 || point_in_polygon(&poly, c);
    refine(&mut tri, &target, &keep, domain.max_nodes)?;

    let (nodes, tris) = tri.finish(keep);
    let nodes: Vec<Point2> = nodes.into_iter().map(|p| Point2::new(p[0], p[1])).collect();
    TriMesh::from_parts(nodes, tris)
}

fn refine(
    tri: &mut Triangulation,
    target: &dyn Fn([f64; 2]) -> f64,
    keep: &dyn Fn([f64; 2]) -> bool,
    max_nodes: usize,
) -> Result<()> {
    loop {
        let mut splits: Vec<(f64, usize, usize)> = Vec::new();
        for t in tri.triangles() {
            let p = t.map(|v| tri.pts[v]);
            let c = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
            if !keep(c) {
                continue;
            }
            let limit = target(c) * (1.0 + 1e-9);
            let mut best = (0.0, 0, 0);
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                let len = (p[i][0] - p[j][0]).hypot(p[i][1] - p[j][1]);
                if len > best.0 {
                    best = (len, t[i].min(t[j]), t[i].max(t[j]));
                }
            }
            if best.0 > limit {
                splits.push(best);
            }
        }
        if splits.is_empty() {
            return Ok(());
        }
        splits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        splits.dedup_by(|a, b| a.1 == b.1 && a.2 == b.2);
        for (_, a, b) in splits {
            if !tri.has_edge(a, b) {
                continue;
            }
            let (pa, pb) = (tri.pts[a], tri.pts[b]);
            tri.insert([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        }
        if tri.pts.len() - 3 > max_nodes {
            return Err(Error::invalid(format!(
                "mesh refinement exceeded the node cap of {max_nodes} ({} nodes)",
                tri.pts.len() - 3
            )));
        }
    }
}

/// Split boundary segments missing from the triangulation at their midpoints.
fn conform_ring(tri: &mut Triangulation, ring: &mut Vec<usize>, max_nodes: usize) -> Result<()> {
    loop {
        let mut changed = false;
        let mut next = Vec::with_capacity(ring.len());
        for k in 0..ring.len() {
            let a = ring[k];
            let b = ring[(k + 1) % ring.len()];
            next.push(a);
            if !tri.has_edge(a, b) {
                let (pa, pb) = (tri.pts[a], tri.pts[b]);
                let m = tri.insert([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                next.push(m);
                changed = true;
            }
        }
        *ring = next;
        if !changed {
            return Ok(());
        }
        if tri.pts.len() > max_nodes {
            return Err(Error::invalid("boundary recovery exceeded the node cap"));
        }
    }
}

fn sample_ring_len(ring: &[[f64; 2]], h: f64) -> usize {
    (0..ring.len())
        .map(|i| {
            let a = ring[i];
            let b = ring[(i + 1) % ring.len()];
            ((a[0] - b[0]).hypot(a[1] - b[1]) / h).ceil().max(1.0) as usize
        })
        .sum()
}

/// Points along a closed ring with spacing at most `h`, starting at each vertex.
fn sample_ring(ring: &[[f64; 2]], h: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for i in 0..ring.len() {
        let a = ring[i];
        let b = ring[(i + 1) % ring.len()];
        let len = (a[0] - b[0]).hypot(a[1] - b[1]);
        let k = (len / h).ceil().max(1.0) as usize;
        for s in 0..k {
            let t = s as f64 / k as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Triangular lattice covering the bounding box of `ring`.
fn lattice(ring: &[[f64; 2]], h: f64) -> Vec<[f64; 2]> {
    let (lo, hi) = bbox(ring.iter().copied());
    let dy = 0.5 * 3f64.sqrt() * h;
    let rows = ((hi[1] - lo[1]) / dy).ceil() as usize + 1;
    let cols = ((hi[0] - lo[0]) / h).ceil() as usize + 2;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = lo[1] + r as f64 * dy;
        let shift = if r % 2 == 1 { 0.5 * h } else { 0.0 };
        for c in 0..cols {
            out.push([lo[0] + shift + c as f64 * h, y]);
        }
    }
    out
}

/// Outer boundary: convex hull of `poly` pushed out by `width`, with rounded corners.
fn offset_hull(poly: &[[f64; 2]], width: f64, h: f64) -> Vec<[f64; 2]> {
    let hull = convex_hull(poly);
    let n = hull.len();
    let mut out = Vec::new();
    for i in 0..n {
        let prev = hull[(i + n - 1) % n];
        let cur = hull[i];
        let next = hull[(i + 1) % n];
        let normal = |a: [f64; 2], b: [f64; 2]| {
            let dx = b[0] - a[0];
            let dy = b[1] - a[1];
            let l = dx.hypot(dy);
            [dy / l, -dx / l]
        };
        let n0 = normal(prev, cur);
        let n1 = normal(cur, next);
        let a0 = n0[1].atan2(n0[0]);
        let mut a1 = n1[1].atan2(n1[0]);
        while a1 < a0 {
            a1 += 2.0 * std::f64::consts::PI;
        }
        let arc = (a1 - a0) * width;
        let k = (arc / h).ceil().max(1.0) as usize;
        for s in 0..=k {
            let a = a0 + (a1 - a0) * s as f64 / k as f64;
            out.push([cur[0] + width * a.cos(), cur[1] + width * a.sin()]);
        }
    }
    out
}

/// Andrew's monotone chain, counter-clockwise, without collinear points.
fn convex_hull(pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = pts.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn bbox(pts: impl Iterator<Item = [f64; 2]>) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in pts {
        lo[0] = lo[0].min(p[0]);
        lo[1] = lo[1].min(p[1]);
        hi[0] = hi[0].max(p[0]);
        hi[1] = hi[1].max(p[1]);
    }
    (lo, [hi[0] - lo[0], hi[1] - lo[1]])
}

fn polygon_area(b: &[impl Copy + Into<[f64; 2]>]) -> f64 {
    let n = b.len();
    (0..n)
        .map(|i| {
            let p: [f64; 2] = b[i].into();
            let q: [f64; 2] = b[(i + 1) % n].into();
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        * 0.5
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

pub(crate) fn point_in_polygon(poly: &[impl Copy + Into<[f64; 2]>], p: [f64; 2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let a: [f64; 2] = poly[i].into();
        let b: [f64; 2] = poly[j].into();
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn distance_to_ring(ring: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| segment_distance(ring[i], ring[(i + 1) % n], p))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

fn self_intersects(b: &[Point2]) -> bool {
    let n = b.len();
    let seg = |i: usize| (b[i].arr(), b[(i + 1) % n].arr());
    for i in 0..n {
        for j in (i + 1)..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (p1, p2) = seg(i);
            let (q1, q2) = seg(j);
            let d1 = orient(p1, p2, q1);
            let d2 = orient(p1, p2, q2);
            let d3 = orient(q1, q2, p1);
            let d4 = orient(q1, q2, p2);
            if d1 * d2 <= 0.0 && d3 * d4 <= 0.0 && !(d1 == 0.0 && d2 == 0.0) {
                return true;
            }
        }
    }
    false
}
