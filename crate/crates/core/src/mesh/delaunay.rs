//! Incremental Bowyer-Watson Delaunay triangulation with exact predicates.

use std::collections::HashMap;

use robust::{incircle, orient2d, Coord};

#[inline]
fn coord(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

pub(crate) fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    orient2d(coord(a), coord(b), coord(c))
}

/// Triangulation under construction. Vertices 0..3 form an enclosing super
/// triangle that is stripped by [`Triangulation::finish`].
pub(crate) struct Triangulation {
    pub pts: Vec<[f64; 2]>,
    tris: Vec<[usize; 3]>,
    alive: Vec<bool>,
    /// circumcentre and squared radius, used as a cheap pre-filter
    circ: Vec<(f64, f64, f64)>,
    snap: f64,
}

impl Triangulation {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        let w = (max[0] - min[0]).max(max[1] - min[1]).max(1e-12);
        let cx = 0.5 * (min[0] + max[0]);
        let cy = 0.5 * (min[1] + max[1]);
        let big = 1.0e3 * w;
        let pts = vec![
            [cx - big, cy - big],
            [cx + big, cy - big],
            [cx, cy + big],
        ];
        let mut t = Self {
            pts,
            tris: Vec::new(),
            alive: Vec::new(),
            circ: Vec::new(),
            snap: 1e-9 * w,
        };
        t.push_tri([0, 1, 2]);
        t
    }

    fn push_tri(&mut self, tri: [usize; 3]) {
        let [a, b, c] = tri.map(|i| self.pts[i]);
        self.circ.push(circumcircle(a, b, c));
        self.tris.push(tri);
        self.alive.push(true);
    }

    fn contains(&self, t: usize, p: [f64; 2]) -> bool {
        let [a, b, c] = self.tris[t].map(|i| self.pts[i]);
        orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
    }

    fn in_circle(&self, t: usize, p: [f64; 2]) -> bool {
        let (cx, cy, r2) = self.circ[t];
        let d2 = (p[0] - cx).powi(2) + (p[1] - cy).powi(2);
        if d2 > r2 * (1.0 + 1e-6) + 1e-300 {
            return false;
        }
        let [a, b, c] = self.tris[t].map(|i| self.pts[i]);
        incircle(coord(a), coord(b), coord(c), coord(p)) > 0.0
    }

    /// Insert a point; returns its index, or the index of an existing vertex
    /// closer than the snapping tolerance.
    pub fn insert(&mut self, p: [f64; 2]) -> usize {
        let mut seed = None;
        for t in 0..self.tris.len() {
            if !self.alive[t] {
                continue;
            }
            for &v in &self.tris[t] {
                let q = self.pts[v];
                if (q[0] - p[0]).abs() <= self.snap && (q[1] - p[1]).abs() <= self.snap {
                    return v;
                }
            }
            if seed.is_none() && self.contains(t, p) {
                seed = Some(t);
            }
        }
        let seed = seed.expect("point outside the super triangle");

        // cavity: triangles whose circumcircle holds p, connected to the seed
        let mut bad: Vec<usize> = Vec::new();
        let mut edge_owner: HashMap<(usize, usize), usize> = HashMap::new();
        let candidates: Vec<usize> = (0..self.tris.len())
            .filter(|&t| self.alive[t] && (t == seed || self.in_circle(t, p)))
            .collect();
        for &t in &candidates {
            let [a, b, c] = self.tris[t];
            for (u, v) in [(a, b), (b, c), (c, a)] {
                edge_owner.insert((u, v), t);
            }
        }
        let mut in_cavity: HashMap<usize, bool> = candidates.iter().map(|&t| (t, false)).collect();
        let mut stack = vec![seed];
        in_cavity.insert(seed, true);
        while let Some(t) = stack.pop() {
            bad.push(t);
            let [a, b, c] = self.tris[t];
            for (u, v) in [(a, b), (b, c), (c, a)] {
                if let Some(&nb) = edge_owner.get(&(v, u)) {
                    if let Some(flag) = in_cavity.get_mut(&nb) {
                        if !*flag {
                            *flag = true;
                            stack.push(nb);
                        }
                    }
                }
            }
        }
        bad.sort_unstable();

        let mut boundary = Vec::new();
        let bad_set: std::collections::HashSet<usize> = bad.iter().copied().collect();
        for &t in &bad {
            let [a, b, c] = self.tris[t];
            for (u, v) in [(a, b), (b, c), (c, a)] {
                let shared = edge_owner
                    .get(&(v, u))
                    .map(|nb| bad_set.contains(nb))
                    .unwrap_or(false);
                if !shared {
                    boundary.push((u, v));
                }
            }
        }

        let idx = self.pts.len();
        self.pts.push(p);
        for &t in &bad {
            self.alive[t] = false;
        }
        for (u, v) in boundary {
            // p on a boundary edge would create a degenerate triangle
            if orient(self.pts[u], self.pts[v], p) > 0.0 {
                self.push_tri([u, v, idx]);
            }
        }
        idx
    }

    /// Live triangles that do not touch the super triangle.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        self.tris
            .iter()
            .zip(&self.alive)
            .filter(|(t, &a)| a && t.iter().all(|&v| v >= 3))
            .map(|(t, _)| *t)
            .collect()
    }

    /// True when `a`-`b` is an edge of a live triangle.
    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.tris.iter().zip(&self.alive).any(|(t, &alive)| {
            alive && t.contains(&a) && t.contains(&b)
        })
    }

    /// Drop the super triangle and renumber vertices to `0..n`.
    pub fn finish(self, keep: impl Fn([f64; 2]) -> bool) -> (Vec<[f64; 2]>, Vec<[usize; 3]>) {
        let tris: Vec<[usize; 3]> = self
            .triangles()
            .into_iter()
            .filter(|t| {
                let [a, b, c] = t.map(|i| self.pts[i]);
                keep([(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0])
            })
            .collect();
        let mut used = vec![false; self.pts.len()];
        for t in &tris {
            for &v in t {
                used[v] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.pts.len()];
        let mut nodes = Vec::new();
        for (i, p) in self.pts.iter().enumerate() {
            if used[i] {
                remap[i] = nodes.len();
                nodes.push(*p);
            }
        }
        let tris = tris.into_iter().map(|t| t.map(|v| remap[v])).collect();
        (nodes, tris)
    }
}

fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> (f64, f64, f64) {
    let bx = b[0] - a[0];
    let by = b[1] - a[1];
    let cx = c[0] - a[0];
    let cy = c[1] - a[1];
    let d = 2.0 * (bx * cy - by * cx);
    if d.abs() < 1e-300 {
        return (a[0], a[1], f64::INFINITY);
    }
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    (a[0] + ux, a[1] + uy, ux * ux + uy * uy)
}
