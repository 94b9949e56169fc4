//! Sparse symmetric matrices and an envelope (profile) Cholesky factorisation.
//!
//! Precision matrices arising from the SPDE discretisation have a banded
//! structure once the mesh nodes are put in reverse Cuthill-McKee order, so a
//! profile factorisation keeps all fill inside the row envelope. Variables
//! that couple to many others (fixed effects) are placed last, which costs one
//! dense row each.

use std::sync::Arc;

use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Compressed sparse row matrix of `f64`.
pub type SparseMatrix = CsMat<f64>;

/// Build a CSR matrix from `(row, col, value)` triplets; duplicates are summed.
pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> SparseMatrix {
    let mut tri = TriMat::with_capacity((rows, cols), triplets.len());
    for &(i, j, v) in triplets {
        tri.add_triplet(i, j, v);
    }
    tri.to_csr()
}

/// Sparse diagonal matrix.
pub fn diagonal(values: &[f64]) -> SparseMatrix {
    let n = values.len();
    let triplets: Vec<_> = values.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
    from_triplets(n, n, &triplets)
}

/// `y = A x` for a CSR matrix.
pub fn mat_vec(a: &SparseMatrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.cols(), x.len());
    let mut y = vec![0.0; a.rows()];
    if a.is_csr() {
        for (i, row) in a.outer_iterator().enumerate() {
            y[i] = row.iter().map(|(j, v)| v * x[j]).sum();
        }
    } else {
        for (j, col) in a.outer_iterator().enumerate() {
            for (i, v) in col.iter() {
                y[i] += v * x[j];
            }
        }
    }
    y
}

/// `y = Aᵀ x` for a CSR matrix.
pub fn mat_t_vec(a: &SparseMatrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.rows(), x.len());
    let mut y = vec![0.0; a.cols()];
    for (i, row) in a.outer_iterator().enumerate() {
        let xi = x[i];
        if xi != 0.0 {
            for (j, v) in row.iter() {
                y[j] += v * xi;
            }
        }
    }
    y
}

/// Quadratic form `xᵀ A x`.
pub fn quad_form(a: &SparseMatrix, x: &[f64]) -> f64 {
    let ax = mat_vec(a, x);
    ax.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// `Aᵀ diag(w) A` for CSR `A`.
pub fn weighted_gram(a: &SparseMatrix, w: &[f64]) -> SparseMatrix {
    let mut tri = TriMat::new((a.cols(), a.cols()));
    for (i, row) in a.outer_iterator().enumerate() {
        let wi = w[i];
        for (j, vj) in row.iter() {
            for (k, vk) in row.iter() {
                tri.add_triplet(j, k, wi * vj * vk);
            }
        }
    }
    tri.to_csr()
}

/// Largest absolute asymmetry `|A_ij - A_ji|`.
pub fn asymmetry(a: &SparseMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for (v, (i, j)) in a.iter() {
        let t = a.get(j, i).copied().unwrap_or(0.0);
        worst = worst.max((v - t).abs());
    }
    worst
}

/// Fill-reducing ordering plus the row envelope of the permuted matrix.
#[derive(Debug, Clone)]
pub struct EnvelopeSymbolic {
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `inv[old] = new`
    inv: Vec<usize>,
    /// First column stored in each permuted row.
    first: Vec<usize>,
    /// Offset of each row's first stored entry.
    offsets: Vec<usize>,
}

impl EnvelopeSymbolic {
    /// Analyse the pattern of `a` under an explicit ordering (`perm[new] = old`).
    pub fn with_ordering(a: &SparseMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n || perm.len() != n {
            return Err(Error::invalid("envelope analysis needs a square matrix and a full permutation"));
        }
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv[old] != usize::MAX {
                return Err(Error::invalid("ordering is not a permutation"));
            }
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (_, (i, j)) in a.iter() {
            let (pi, pj) = (inv[i], inv[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            if c < first[r] {
                first[r] = c;
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            offsets.push(acc);
            acc += i - f + 1;
        }
        offsets.push(acc);
        Ok(Self { perm, inv, first, offsets })
    }

    /// Reverse Cuthill-McKee over all variables except `dense_tail`, which are
    /// appended last in their original order.
    pub fn reverse_cuthill_mckee(a: &SparseMatrix, dense_tail: &[usize]) -> Result<Self> {
        let n = a.rows();
        let mut is_tail = vec![false; n];
        for &t in dense_tail {
            is_tail[t] = true;
        }
        let body: Vec<usize> = (0..n).filter(|&i| !is_tail[i]).collect();
        let mut local = vec![usize::MAX; n];
        for (k, &i) in body.iter().enumerate() {
            local[i] = k;
        }
        let mut tri = TriMat::new((body.len(), body.len()));
        for (_, (i, j)) in a.iter() {
            if !is_tail[i] && !is_tail[j] {
                tri.add_triplet(local[i], local[j], 1.0f64);
            }
        }
        for k in 0..body.len() {
            tri.add_triplet(k, k, 1.0);
        }
        let pattern: CsMat<f64> = tri.to_csr();
        let ordering = sprs::linalg::reverse_cuthill_mckee(pattern.view());
        let mut perm: Vec<usize> = ordering.perm.vec().into_iter().map(|k| body[k]).collect();
        perm.extend_from_slice(dense_tail);
        Self::with_ordering(a, perm)
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Maximum half-bandwidth over rows.
    pub fn max_bandwidth(&self) -> usize {
        self.first.iter().enumerate().map(|(i, &f)| i - f).max().unwrap_or(0)
    }

    #[inline]
    fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Lower-triangular Cholesky factor `P A Pᵀ = L Lᵀ` stored by rows inside the envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    symbolic: Arc<EnvelopeSymbolic>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factorise `a`, whose pattern must fit the analysed envelope.
    pub fn factorize(symbolic: Arc<EnvelopeSymbolic>, a: &SparseMatrix) -> Result<Self> {
        Self::factorize_shifted(symbolic, a, 0.0)
    }

    /// Factorise `a + shift * diag(a)`.
    pub fn factorize_shifted(symbolic: Arc<EnvelopeSymbolic>, a: &SparseMatrix, shift: f64) -> Result<Self> {
        let sym = &*symbolic;
        let n = sym.dim();
        if a.rows() != n || a.cols() != n {
            return Err(Error::invalid(format!(
                "matrix is {}x{}, factor expects {n}x{n}",
                a.rows(),
                a.cols()
            )));
        }
        let mut values = vec![0.0; sym.envelope_size()];
        for (&v, (i, j)) in a.iter() {
            let (pi, pj) = (sym.inv[i], sym.inv[j]);
            if pj > pi {
                continue;
            }
            if pj < sym.first[pi] {
                return Err(Error::invalid("matrix entry outside the analysed envelope"));
            }
            let scale = if pi == pj { 1.0 + shift } else { 1.0 };
            values[sym.offsets[pi] + pj - sym.first[pi]] += v * scale;
        }

        for i in 0..n {
            let fi = sym.first[i];
            let oi = sym.offsets[i];
            for j in fi..i {
                let fj = sym.first[j];
                let oj = sym.offsets[j];
                let k0 = fi.max(fj);
                let mut s = values[oi + j - fi];
                let li = &values[oi + k0 - fi..oi + j - fi];
                let lj = &values[oj + k0 - fj..oj + j - fj];
                s -= dot(li, lj);
                let djj = values[oj + j - fj];
                values[oi + j - fi] = s / djj;
            }
            let row = &values[oi..oi + i - fi];
            let d = values[oi + i - fi] - dot(row, row);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    minor: i,
                    variable: sym.perm[i],
                });
            }
            values[oi + i - fi] = d.sqrt();
        }
        Ok(Self { symbolic, values })
    }

    pub fn symbolic(&self) -> &Arc<EnvelopeSymbolic> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.dim()
    }

    #[inline]
    fn diag(&self, i: usize) -> f64 {
        self.values[self.symbolic.offsets[i + 1] - 1]
    }

    /// `log |A|`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.diag(i).ln()).sum::<f64>()
    }

    /// Solve `L y = b` in permuted coordinates, in place.
    fn forward(&self, y: &mut [f64]) {
        let sym = &*self.symbolic;
        for i in 0..y.len() {
            let fi = sym.first[i];
            let r = sym.row(i);
            let row = &self.values[r.start..r.end - 1];
            let s = y[i] - dot(row, &y[fi..i]);
            y[i] = s / self.values[r.end - 1];
        }
    }

    /// Solve `Lᵀ x = y` in permuted coordinates, in place.
    fn backward(&self, x: &mut [f64]) {
        let sym = &*self.symbolic;
        for i in (0..x.len()).rev() {
            let fi = sym.first[i];
            let r = sym.row(i);
            let xi = x[i] / self.values[r.end - 1];
            x[i] = xi;
            if xi != 0.0 {
                for (k, &l) in self.values[r.start..r.end - 1].iter().enumerate() {
                    x[fi + k] -= l * xi;
                }
            }
        }
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let sym = &*self.symbolic;
        let mut y: Vec<f64> = sym.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = vec![0.0; b.len()];
        for (new, &old) in sym.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Map white noise `z` to a draw with covariance `A⁻¹`: returns `Pᵀ L⁻ᵀ z`.
    pub fn whiten_inverse(&self, z: &[f64]) -> Vec<f64> {
        let mut y = z.to_vec();
        self.backward(&mut y);
        let mut x = vec![0.0; z.len()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Diagonal of `A⁻¹` by solving against unit vectors. Quadratic cost; meant
    /// for small systems and diagnostics.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        let sym = &*self.symbolic;
        let mut out = vec![0.0; n];
        let mut e = vec![0.0; n];
        for (new, &old) in sym.perm.iter().enumerate() {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[new] = 1.0;
            // only entries >= new are touched by the forward solve
            self.forward(&mut e);
            out[old] = e.iter().map(|v| v * v).sum();
        }
        out
    }
}

/// Dot product with independent partial sums so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn laplacian_1d(n: usize, shift: f64) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        from_triplets(n, n, &t)
    }

    fn to_dense(a: &SparseMatrix) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(a.rows(), a.cols());
        for (&v, (i, j)) in a.iter() {
            m[(i, j)] += v;
        }
        m
    }

    fn random_spd(n: usize, seed: u64) -> SparseMatrix {
        // banded-plus-arrow pattern
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 10.0 + rng.gen::<f64>()));
            for j in (i + 1)..n.min(i + 4) {
                let v = rng.gen::<f64>() - 0.5;
                t.push((i, j, v));
                t.push((j, i, v));
            }
            if i + 1 < n {
                let v = 0.3 * (rng.gen::<f64>() - 0.5);
                t.push((i, n - 1, v));
                t.push((n - 1, i, v));
            }
        }
        from_triplets(n, n, &t)
    }

    #[test]
    fn solve_and_logdet_match_dense() {
        let a = random_spd(30, 3);
        let sym = Arc::new(EnvelopeSymbolic::reverse_cuthill_mckee(&a, &[29]).unwrap());
        let chol = EnvelopeCholesky::factorize(sym, &a).unwrap();
        let dense = to_dense(&a);
        let dchol = dense.clone().cholesky().unwrap();
        let logdet: f64 = 2.0 * dchol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        assert!((chol.log_det() - logdet).abs() < 1e-10);

        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let x = chol.solve(&b);
        let ax = mat_vec(&a, &x);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }

        let inv = dense.try_inverse().unwrap();
        let d = chol.inverse_diagonal();
        for i in 0..30 {
            assert!((d[i] - inv[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn whitening_reproduces_inverse() {
        // E[x xᵀ] = Pᵀ L⁻ᵀ L⁻¹ P = A⁻¹, checked column by column
        let a = laplacian_1d(8, 0.5);
        let sym = Arc::new(EnvelopeSymbolic::reverse_cuthill_mckee(&a, &[]).unwrap());
        let chol = EnvelopeCholesky::factorize(sym, &a).unwrap();
        let n = 8;
        let mut cov = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut z = vec![0.0; n];
            z[k] = 1.0;
            let x = chol.whiten_inverse(&z);
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += x[i] * x[j];
                }
            }
        }
        let inv = to_dense(&a).try_inverse().unwrap();
        assert!((cov - inv).abs().max() < 1e-12);
    }

    #[test]
    fn reports_failing_minor() {
        let a = laplacian_1d(5, -1.5);
        let sym = Arc::new(EnvelopeSymbolic::with_ordering(&a, (0..5).collect()).unwrap());
        match EnvelopeCholesky::factorize(sym, &a) {
            Err(Error::NotPositiveDefinite { minor, .. }) => assert!(minor < 5),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn rcm_keeps_bandwidth_small() {
        // a path graph given in scrambled order
        let n = 40;
        let order: Vec<usize> = (0..n).map(|i| (i * 17) % n).collect();
        let mut t = Vec::new();
        for k in 0..n {
            t.push((order[k], order[k], 3.0));
            if k + 1 < n {
                t.push((order[k], order[k + 1], -1.0));
                t.push((order[k + 1], order[k], -1.0));
            }
        }
        let a = from_triplets(n, n, &t);
        let sym = EnvelopeSymbolic::reverse_cuthill_mckee(&a, &[]).unwrap();
        assert_eq!(sym.max_bandwidth(), 1);
    }
}
