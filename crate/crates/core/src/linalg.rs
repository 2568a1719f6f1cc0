//! Small dense/sparse linear algebra used by the graph and spectral code.
//!
//! Everything here is `f64`. The dense eigensolver is a cyclic Jacobi sweep
//! and is only meant for oracle-sized matrices.

use std::collections::BTreeMap;

use crate::error::{GinError, Result};

/// Symmetric sparse matrix in compressed-row form.
///
/// Built only through constructors that insert `(i, j)` and `(j, i)` together,
/// so the stored pattern and values are exactly symmetric. Column indices are
/// strictly increasing within a row and no explicit zeros are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Builds from entries `(i, j, v)`. Each off-diagonal entry is mirrored;
    /// repeated coordinates are summed. Entries that sum to zero are dropped.
    pub fn from_entries<I>(n: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for (i, j, v) in entries {
            if i >= n || j >= n {
                return Err(GinError::InvalidArgument(format!(
                    "entry ({i}, {j}) out of range for n = {n}"
                )));
            }
            if !v.is_finite() {
                return Err(GinError::InvalidArgument(format!(
                    "non-finite entry at ({i}, {j})"
                )));
            }
            *rows[i].entry(j).or_insert(0.0) += v;
            if i != j {
                *rows[j].entry(i).or_insert(0.0) += v;
            }
        }
        Ok(Self::from_rows(n, rows))
    }

    fn from_rows(n: usize, rows: Vec<BTreeMap<usize, f64>>) -> Self {
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for row in rows {
            for (j, v) in row {
                if v != 0.0 {
                    col_indices.push(j);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        SparseSym {
            n,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseSym {
            n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        SparseSym {
            n,
            row_offsets: vec![0; n + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, ascending by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        match self.col_indices[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    /// Upper-triangle entries `(i, j, v)` with `i <= j`.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            self.row(i)
                .filter(move |&(j, _)| j >= i)
                .map(move |(j, v)| (i, j, v))
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v).sum())
            .collect()
    }

    /// `alpha * self + beta * I`. The result's pattern is the union of the
    /// input pattern and the diagonal (diagonal entries that cancel to zero
    /// are not stored).
    pub fn affine(&self, alpha: f64, beta: f64) -> SparseSym {
        let rows = (0..self.n)
            .map(|i| {
                let mut row: BTreeMap<usize, f64> =
                    self.row(i).map(|(j, v)| (j, alpha * v)).collect();
                *row.entry(i).or_insert(0.0) += beta;
                row
            })
            .collect();
        Self::from_rows(self.n, rows)
    }

    /// Relabels vertices: vertex `v` of `self` becomes vertex `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<SparseSym> {
        check_permutation(perm, self.n)?;
        SparseSym::from_entries(
            self.n,
            self.upper_entries().map(|(i, j, v)| (perm[i], perm[j], v)),
        )
    }

    pub fn to_dense(&self) -> DenseMat {
        let mut d = DenseMat::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d.set(i, j, v);
            }
        }
        d
    }

    /// Unchecked product into a caller-owned buffer. Lengths must equal `n`.
    #[inline]
    pub(crate) fn spmv_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        for (i, o) in out.iter_mut().enumerate() {
            let range = self.row_offsets[i]..self.row_offsets[i + 1];
            let mut acc = 0.0;
            for (&j, &v) in self.col_indices[range.clone()]
                .iter()
                .zip(&self.values[range])
            {
                acc += v * x[j];
            }
            *o = acc;
        }
    }
}

/// Sparse matrix-vector product.
pub fn spmv(m: &SparseSym, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != m.n {
        return Err(GinError::dim("spmv input", m.n, x.len()));
    }
    let mut out = vec![0.0; m.n];
    m.spmv_into(x, &mut out);
    Ok(out)
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(GinError::dim("permutation", n, perm.len()));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(GinError::InvalidArgument("not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMat {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMat {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(GinError::dim(
                "dense matrix values",
                rows * cols,
                values.len(),
            ));
        }
        Ok(DenseMat { rows, cols, values })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> DenseMat {
        let mut t = DenseMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMat) -> Result<DenseMat> {
        if self.cols != other.rows {
            return Err(GinError::dim(
                "matmul inner dimension",
                self.cols,
                other.rows,
            ));
        }
        let mut out = DenseMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.values[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(GinError::dim("matvec input", self.cols, x.len()));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.values[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    pub fn max_abs_diff(&self, other: &DenseMat) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (i + 1..self.cols).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// Result of [`dense_eigh`]: ascending eigenvalues and matching eigenvectors
/// stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct Eigh {
    pub values: Vec<f64>,
    pub vectors: DenseMat,
}

pub const EIGH_MAX_DIM: usize = 64;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn dense_eigh(m: &DenseMat) -> Result<Eigh> {
    if m.rows != m.cols {
        return Err(GinError::InvalidArgument(format!(
            "eigh needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    if n > EIGH_MAX_DIM {
        return Err(GinError::InvalidArgument(format!(
            "eigh is limited to n <= {EIGH_MAX_DIM}, got {n}"
        )));
    }
    let scale = m.values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if !m.is_symmetric(1e-12 * scale) {
        return Err(GinError::InvalidArgument(
            "eigh input is not symmetric".into(),
        ));
    }

    let frob = m
        .values
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let mut a = m.clone();
    let mut v = DenseMat::identity(n);
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off.sqrt() <= 1e-14 * frob {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(GinError::Numeric(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(Eigh { values, vectors })
}

pub const POWER_DEFAULT_MAX_ITERS: usize = 200;
pub const POWER_DEFAULT_TOL: f64 = 1e-6;
/// Upper bound on the spectrum of any normalized graph Laplacian.
pub const NORMALIZED_LAPLACIAN_BOUND: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaMax {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// The estimate is the Rayleigh quotient, which never exceeds the true
/// largest eigenvalue. Convergence means the residual `|Mx - rho x|` fell
/// below `tol * rho`. Without convergence the result is
/// [`NORMALIZED_LAPLACIAN_BOUND`] with `converged = false`.
pub fn power_iteration_lambda_max(m: &SparseSym, max_iters: usize, tol: f64) -> LambdaMax {
    let n = m.n();
    let fallback = |iterations| {
        log::warn!(
            "power iteration did not converge after {iterations} iterations; using lambda_max = {NORMALIZED_LAPLACIAN_BOUND}"
        );
        LambdaMax {
            value: NORMALIZED_LAPLACIAN_BOUND,
            converged: false,
            iterations,
        }
    };
    if n == 0 {
        return fallback(0);
    }
    // Deterministic, non-constant start: a constant vector is a null vector of
    // the Laplacian of any regular graph.
    let mut x: Vec<f64> = (0..n)
        .map(|i| 0.5 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    normalize(&mut x);
    let mut y = vec![0.0; n];
    let mut prev_rho: Option<f64> = None;
    let mut prev_delta: Option<f64> = None;
    for it in 1..=max_iters {
        m.spmv_into(&x, &mut y);
        let rho = dot(&x, &y);
        let ynorm = norm(&y);
        if ynorm == 0.0 {
            // x is in the null space; M annihilates the start vector.
            return LambdaMax {
                value: 0.0,
                converged: true,
                iterations: it,
            };
        }
        let resid = y
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - rho * b).powi(2))
            .sum::<f64>()
            .sqrt();
        // The Rayleigh quotient increases monotonically with geometric
        // steps; the tail of that series bounds the remaining error.
        let remaining = match (prev_rho, prev_delta) {
            (Some(p), Some(d)) => {
                let delta = (rho - p).abs();
                let q = if d > 0.0 { delta / d } else { 0.0 };
                prev_delta = Some(delta);
                if q < 1.0 {
                    delta * q / (1.0 - q)
                } else {
                    f64::INFINITY
                }
            }
            (Some(p), None) => {
                prev_delta = Some((rho - p).abs());
                f64::INFINITY
            }
            _ => f64::INFINITY,
        };
        if resid <= tol * rho.abs() || remaining <= 0.1 * tol * rho.abs() {
            return LambdaMax {
                value: rho,
                converged: true,
                iterations: it,
            };
        }
        prev_rho = Some(rho);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / ynorm;
        }
    }
    fallback(max_iters)
}

/// Inner product with four interleaved partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `sum_j a[j] * b[j]` over the listed positions, with the same grouping as [`dot`].
pub(crate) fn gather_dot(a: &[f64], b: &[f64], idx: &[usize]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = idx.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..4 {
            acc[l] += a[c[l]] * b[c[l]];
        }
    }
    let mut tail = 0.0;
    for &j in rest {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|v| *v /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path2() -> SparseSym {
        SparseSym::from_entries(2, [(0, 0, 1.0), (1, 1, 1.0), (0, 1, -1.0)]).unwrap()
    }

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DenseMat {
        let mut m = DenseMat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    #[test]
    fn spmv_path_laplacian() {
        assert_eq!(spmv(&path2(), &[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn spmv_zero_and_identity() {
        assert_eq!(
            spmv(&SparseSym::zeros(3), &[7.0, -2.0, 1.5]).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            spmv(&SparseSym::identity(3), &[3.0, 4.0, 5.0]).unwrap(),
            vec![3.0, 4.0, 5.0]
        );
    }

    #[test]
    fn spmv_dimension_mismatch() {
        assert!(matches!(
            spmv(&path2(), &[1.0, 2.0, 3.0]),
            Err(GinError::Dimension { .. })
        ));
    }

    #[test]
    fn construction_invariants() {
        let m = SparseSym::from_entries(
            4,
            [
                (0, 3, 2.0),
                (1, 2, -1.0),
                (2, 2, 5.0),
                (3, 1, 0.5),
                (0, 3, -2.0),
            ],
        )
        .unwrap();
        // (0,3) cancelled to zero and must not be stored.
        assert_eq!(m.get(0, 3), 0.0);
        assert_eq!(m.nnz(), 5);
        for i in 0..4 {
            let cols: Vec<usize> = m.row(i).map(|(j, _)| j).collect();
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
            for (j, v) in m.row(i) {
                assert_eq!(m.get(j, i), v);
                assert_ne!(v, 0.0);
            }
        }
    }

    #[test]
    fn eigh_examples() {
        let p = path2().to_dense();
        let e = dense_eigh(&p).unwrap();
        assert!((e.values[0] - 0.0).abs() < 1e-12);
        assert!((e.values[1] - 2.0).abs() < 1e-12);

        let e = dense_eigh(&DenseMat::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);

        let e = dense_eigh(&DenseMat::from_diag(&[5.0, 2.0, 9.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 5.0, 9.0]);
    }

    #[test]
    fn eigh_rejects_nonsymmetric_and_large() {
        let m = DenseMat::from_row_major(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(dense_eigh(&m).is_err());
        assert!(dense_eigh(&DenseMat::identity(65)).is_err());
    }

    #[test]
    fn eigh_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=32 {
            let m = random_sym(n, &mut rng);
            let e = dense_eigh(&m).unwrap();
            let u = &e.vectors;
            let recon = u
                .matmul(&DenseMat::from_diag(&e.values))
                .unwrap()
                .matmul(&u.transpose())
                .unwrap();
            assert!(recon.max_abs_diff(&m) < 1e-10, "n={n}");
            let utu = u.transpose().matmul(u).unwrap();
            assert!(utu.max_abs_diff(&DenseMat::identity(n)) < 1e-10, "n={n}");
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn power_iteration_examples() {
        let l = power_iteration_lambda_max(&path2(), POWER_DEFAULT_MAX_ITERS, POWER_DEFAULT_TOL);
        assert!(l.converged);
        assert!((l.value - 2.0).abs() < 1e-6);

        let l = power_iteration_lambda_max(
            &SparseSym::identity(5),
            POWER_DEFAULT_MAX_ITERS,
            POWER_DEFAULT_TOL,
        );
        assert!(l.converged);
        assert!((l.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_falls_back_when_budget_exhausted() {
        let m =
            SparseSym::from_entries(3, [(0, 0, 2.0), (1, 1, 1.999), (2, 2, 0.5), (0, 1, 0.0001)])
                .unwrap();
        let l = power_iteration_lambda_max(&m, 2, 1e-12);
        assert!(!l.converged);
        assert_eq!(l.value, NORMALIZED_LAPLACIAN_BOUND);
    }

    proptest! {
        #[test]
        fn spmv_is_self_adjoint(
            entries in proptest::collection::vec((0usize..12, 0usize..12, -3.0f64..3.0), 0..40),
            x in proptest::collection::vec(-5.0f64..5.0, 12),
            y in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            let m = SparseSym::from_entries(12, entries).unwrap();
            let lhs = dot(&y, &spmv(&m, &x).unwrap());
            let rhs = dot(&x, &spmv(&m, &y).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
