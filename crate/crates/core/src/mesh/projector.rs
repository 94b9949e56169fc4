use crate::sparse::{from_triplets, SparseMatrix};

use super::{Point2, TriMesh};

/// Sparse barycentric interpolation from mesh nodes to locations.
///
/// Rows for locations outside the mesh are empty and flagged in `inside`.
#[derive(Debug, Clone)]
pub struct Projector {
    pub matrix: SparseMatrix,
    pub inside: Vec<bool>,
}

impl Projector {
    /// Locate each point in the mesh; ties on shared edges go to the lowest
    /// triangle index.
    pub fn new(mesh: &TriMesh, locations: &[Point2]) -> Self {
        let index = BucketIndex::new(mesh);
        let mut trip = Vec::with_capacity(3 * locations.len());
        let mut inside = Vec::with_capacity(locations.len());
        for (row, p) in locations.iter().enumerate() {
            match index.locate(mesh, *p) {
                Some((tri, w)) => {
                    inside.push(true);
                    for k in 0..3 {
                        if w[k] > 0.0 {
                            trip.push((row, mesh.triangles[tri][k], w[k]));
                        }
                    }
                }
                None => inside.push(false),
            }
        }
        Self {
            matrix: from_triplets(locations.len(), mesh.n_nodes(), &trip),
            inside,
        }
    }

    pub fn n_locations(&self) -> usize {
        self.inside.len()
    }

    /// Interpolate a nodal field.
    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        crate::sparse::mat_vec(&self.matrix, field)
    }

    /// Row `i` as `(node, weight)` pairs.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        self.matrix
            .outer_view(i)
            .map(|r| r.iter().map(|(j, &v)| (j, v)).collect())
            .unwrap_or_default()
    }
}

struct BucketIndex {
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl BucketIndex {
    fn new(mesh: &TriMesh) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &mesh.nodes {
            lo = [lo[0].min(p.x), lo[1].min(p.y)];
            hi = [hi[0].max(p.x), hi[1].max(p.y)];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-300);
        let per_side = ((mesh.triangles.len() as f64).sqrt().ceil() as usize).max(1);
        let cell = span / per_side as f64 * (1.0 + 1e-12);
        let nx = (((hi[0] - lo[0]) / cell).floor() as usize + 1).max(1);
        let ny = (((hi[1] - lo[1]) / cell).floor() as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = tri.map(|v| mesh.nodes[v]);
            let x0 = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min);
            let x1 = p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max);
            let y0 = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min);
            let y1 = p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max);
            let (i0, j0) = clamp_cell(lo, cell, nx, ny, x0, y0);
            let (i1, j1) = clamp_cell(lo, cell, nx, ny, x1, y1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t);
                }
            }
        }
        Self {
            origin: lo,
            cell,
            nx,
            ny,
            buckets,
        }
    }

    fn locate(&self, mesh: &TriMesh, p: Point2) -> Option<(usize, [f64; 3])> {
        if !p.x.is_finite() || !p.y.is_finite() {
            return None;
        }
        let fx = (p.x - self.origin[0]) / self.cell;
        let fy = (p.y - self.origin[1]) / self.cell;
        if fx < -1e-9 || fy < -1e-9 || fx > self.nx as f64 + 1e-9 || fy > self.ny as f64 + 1e-9 {
            return None;
        }
        let (i, j) = clamp_cell(self.origin, self.cell, self.nx, self.ny, p.x, p.y);
        // buckets hold triangle indices in increasing order
        for &t in &self.buckets[j * self.nx + i] {
            if let Some(w) = barycentric(mesh, t, p) {
                return Some((t, w));
            }
        }
        None
    }
}

fn clamp_cell(lo: [f64; 2], cell: f64, nx: usize, ny: usize, x: f64, y: f64) -> (usize, usize) {
    let i = ((x - lo[0]) / cell).floor().max(0.0) as usize;
    let j = ((y - lo[1]) / cell).floor().max(0.0) as usize;
    (i.min(nx - 1), j.min(ny - 1))
}

/// Barycentric weights of `p` in triangle `t`, if it lies inside (closed).
fn barycentric(mesh: &TriMesh, t: usize, p: Point2) -> Option<[f64; 3]> {
    let [a, b, c] = mesh.triangles[t].map(|v| mesh.nodes[v]);
    let det = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let w1 = ((b.x - p.x) * (c.y - p.y) - (b.y - p.y) * (c.x - p.x)) / det;
    let w2 = ((c.x - p.x) * (a.y - p.y) - (c.y - p.y) * (a.x - p.x)) / det;
    let w3 = ((a.x - p.x) * (b.y - p.y) - (a.y - p.y) * (b.x - p.x)) / det;
    let tol = 1e-12;
    if w1 < -tol || w2 < -tol || w3 < -tol {
        return None;
    }
    let mut w = [w1.max(0.0), w2.max(0.0), w3.max(0.0)];
    for v in &mut w {
        if *v < tol {
            *v = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    Some(w.map(|v| v / s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, DomainSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mesh() -> TriMesh {
        build_mesh(&DomainSpec::rectangle(0.0, 0.0, 1.0, 1.0, 0.2, 0.4, 0.3)).unwrap()
    }

    #[test]
    fn node_location_gives_indicator_row() {
        let m = mesh();
        let k = m.n_nodes() / 2;
        let p = Projector::new(&m, &[m.nodes[k]]);
        assert_eq!(p.row(0), vec![(k, 1.0)]);
    }

    #[test]
    fn centroid_gives_thirds() {
        let m = mesh();
        let t = m.triangles[7];
        let c = Point2::new(
            (m.nodes[t[0]].x + m.nodes[t[1]].x + m.nodes[t[2]].x) / 3.0,
            (m.nodes[t[0]].y + m.nodes[t[1]].y + m.nodes[t[2]].y) / 3.0,
        );
        let p = Projector::new(&m, &[c]);
        let row = p.row(0);
        assert_eq!(row.len(), 3);
        for (_, w) in row {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_interior_rows_sum_to_one() {
        let m = mesh();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point2> = (0..100).map(|_| Point2::new(rng.gen(), rng.gen())).collect();
        let p = Projector::new(&m, &pts);
        for i in 0..100 {
            assert!(p.inside[i]);
            let row = p.row(i);
            assert!(row.len() <= 3);
            assert!(row.iter().all(|&(_, w)| w >= 0.0));
            let s: f64 = row.iter().map(|r| r.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let ones = vec![1.0; m.n_nodes()];
        assert!(p.apply(&ones).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn outside_points_are_flagged() {
        let m = mesh();
        let p = Projector::new(&m, &[Point2::new(50.0, 50.0), Point2::new(0.5, 0.5)]);
        assert!(!p.inside[0]);
        assert!(p.row(0).is_empty());
        assert!(p.inside[1]);
    }

    #[test]
    fn shared_edge_goes_to_lowest_triangle() {
        let m = mesh();
        let (a, b) = m.edges()[m.edges().len() / 3];
        let mid = Point2::new(0.5 * (m.nodes[a].x + m.nodes[b].x), 0.5 * (m.nodes[a].y + m.nodes[b].y));
        let owners: Vec<usize> = (0..m.triangles.len())
            .filter(|&t| m.triangles[t].contains(&a) && m.triangles[t].contains(&b))
            .collect();
        let idx = BucketIndex::new(&m);
        let (t, w) = idx.locate(&m, mid).unwrap();
        assert_eq!(t, owners[0]);
        let nz: Vec<f64> = w.iter().copied().filter(|&v| v > 0.0).collect();
        assert_eq!(nz.len(), 2);
    }
}
