//! Graph convolution with polynomial spectral filters.
//!
//! The production path evaluates `sum_k theta_k T_k(L~) x` with the Chebyshev
//! three-term recurrence, touching only sparse matrix-vector products. The
//! oracle path diagonalizes the operator densely, applies the same polynomial
//! to each eigenvalue, and transforms back. They must agree on any operator
//! whose spectrum lies in `[-1, 1]`.

use crate::error::{GinError, Result};
use crate::linalg::{dense_eigh, DenseMat, SparseSym};

pub const DEFAULT_ORDER: usize = 3;

/// Chebyshev filter coefficients `theta_0 .. theta_{K-1}`, `K >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebCoeffs {
    theta: Vec<f64>,
}

impl ChebCoeffs {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(GinError::InvalidArgument(
                "Chebyshev order must be at least 1".into(),
            ));
        }
        Ok(ChebCoeffs { theta })
    }

    pub fn order(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Scalar filter response `sum_k theta_k T_k(lambda)`.
    pub fn response(&self, lambda: f64) -> f64 {
        let mut prev = 1.0;
        let mut cur = lambda;
        let mut acc = self.theta[0];
        for (k, &t) in self.theta.iter().enumerate().skip(1) {
            if k > 1 {
                let next = 2.0 * lambda * cur - prev;
                prev = cur;
                cur = next;
            }
            acc += t * cur;
        }
        acc
    }
}

/// Writes `T_0(L~) x, ..., T_{K-1}(L~) x` into `basis` (`K` rows of length
/// `n`). Performs exactly `K - 1` sparse products.
pub(crate) fn cheb_basis_into(lt: &SparseSym, x: &[f64], basis: &mut [Vec<f64>]) {
    let order = basis.len();
    basis[0].copy_from_slice(x);
    if order > 1 {
        let (head, tail) = basis.split_at_mut(1);
        lt.spmv_into(&head[0], &mut tail[0]);
    }
    for k in 2..order {
        let (done, rest) = basis.split_at_mut(k);
        let out = &mut rest[0];
        lt.spmv_into(&done[k - 1], out);
        for (o, &p) in out.iter_mut().zip(&done[k - 2]) {
            *o = 2.0 * *o - p;
        }
    }
}

/// `sum_k T_k(L~) c_k` for vector coefficients `c_k`, by Clenshaw's recurrence.
/// Used to backpropagate through a filter bank: since `L~` is symmetric each
/// `T_k(L~)` is its own adjoint.
pub(crate) fn cheb_sum_vectors(lt: &SparseSym, coeffs: &[Vec<f64>]) -> Vec<f64> {
    let n = lt.n();
    let order = coeffs.len();
    if order == 1 {
        return coeffs[0].clone();
    }
    let mut b1 = vec![0.0; n]; // b_{k+1}
    let mut b2 = vec![0.0; n]; // b_{k+2}
    let mut tmp = vec![0.0; n];
    for c in coeffs[1..].iter().rev() {
        lt.spmv_into(&b1, &mut tmp);
        for i in 0..n {
            tmp[i] = c[i] + 2.0 * tmp[i] - b2[i];
        }
        std::mem::swap(&mut b2, &mut b1);
        std::mem::swap(&mut b1, &mut tmp);
    }
    lt.spmv_into(&b1, &mut tmp);
    (0..n).map(|i| coeffs[0][i] + tmp[i] - b2[i]).collect()
}

/// `sum_k theta_k T_k(L~) x` via the three-term recurrence.
pub fn cheb_filter(lt: &SparseSym, x: &[f64], c: &ChebCoeffs) -> Result<Vec<f64>> {
    if x.len() != lt.n() {
        return Err(GinError::dim("Chebyshev filter input", lt.n(), x.len()));
    }
    let n = lt.n();
    let mut basis = vec![vec![0.0; n]; c.order()];
    cheb_basis_into(lt, x, &mut basis);
    let mut out = vec![0.0; n];
    for (t, b) in c.theta().iter().zip(&basis) {
        for (o, &v) in out.iter_mut().zip(b) {
            *o += t * v;
        }
    }
    Ok(out)
}

/// Dense reference: `U g(Lambda) U^T x` with `g` the Chebyshev polynomial.
pub fn spectral_filter_oracle(op: &DenseMat, x: &[f64], c: &ChebCoeffs) -> Result<Vec<f64>> {
    if x.len() != op.rows() {
        return Err(GinError::dim("spectral filter input", op.rows(), x.len()));
    }
    let eig = dense_eigh(op)?;
    let u = &eig.vectors;
    let n = op.rows();
    // Forward graph Fourier transform.
    let x_hat = u.transpose().matvec(x)?;
    let filtered: Vec<f64> = x_hat
        .iter()
        .zip(&eig.values)
        .map(|(&xh, &lambda)| c.response(lambda) * xh)
        .collect();
    // Inverse transform.
    let out = u.matvec(&filtered)?;
    debug_assert_eq!(out.len(), n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn offdiag2() -> SparseSym {
        SparseSym::from_entries(2, [(0, 1, -1.0)]).unwrap()
    }

    /// Random sparse symmetric operator with spectrum inside [-1, 1].
    fn random_operator(n: usize, rng: &mut impl Rng) -> SparseSym {
        let mut entries = Vec::new();
        for i in 0..n {
            entries.push((i, i, rng.random_range(-1.0..1.0)));
            for j in i + 1..n {
                if rng.random_bool(0.3) {
                    entries.push((i, j, rng.random_range(-1.0..1.0)));
                }
            }
        }
        let m = SparseSym::from_entries(n, entries).unwrap();
        let e = dense_eigh(&m.to_dense()).unwrap();
        let r = e.values[0].abs().max(e.values[n - 1].abs()).max(1e-3);
        m.affine(1.0 / r, 0.0)
    }

    #[test]
    fn identity_coefficients_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lt = random_operator(9, &mut rng);
        let x: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c = ChebCoeffs::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(cheb_filter(&lt, &x, &c).unwrap(), x);
    }

    #[test]
    fn first_order_is_one_matvec() {
        let c = ChebCoeffs::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            cheb_filter(&offdiag2(), &[1.0, 0.0], &c).unwrap(),
            vec![0.0, -1.0]
        );
    }

    #[test]
    fn dimension_and_order_errors() {
        let c = ChebCoeffs::new(vec![1.0]).unwrap();
        assert!(cheb_filter(&offdiag2(), &[1.0], &c).is_err());
        assert!(ChebCoeffs::new(vec![]).is_err());
    }

    #[test]
    fn oracle_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = random_operator(6, &mut rng).to_dense();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let id = ChebCoeffs::new(vec![1.0, 0.0, 0.0]).unwrap();
        let y = spectral_filter_oracle(&op, &x, &id).unwrap();
        assert!(y.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));

        let lambda = [0.3, -0.7, 0.9, 0.1];
        let d = DenseMat::from_diag(&lambda);
        let x = [1.0, 2.0, -3.0, 4.0];
        let y = spectral_filter_oracle(&d, &x, &ChebCoeffs::new(vec![0.0, 1.0]).unwrap()).unwrap();
        for i in 0..4 {
            assert!((y[i] - lambda[i] * x[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn recurrence_matches_oracle_n16() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let lt = random_operator(16, &mut rng);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = ChebCoeffs::new((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = cheb_filter(&lt, &x, &c).unwrap();
        let b = spectral_filter_oracle(&lt.to_dense(), &x, &c).unwrap();
        let err = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn basis_uses_k_minus_one_products() {
        // With L~ = 2I (outside the Chebyshev domain, fine for counting):
        // T_k(2) = 1, 2, 7, 26, ...
        let lt = SparseSym::identity(3).affine(2.0, 0.0);
        let mut basis = vec![vec![0.0; 3]; 4];
        cheb_basis_into(&lt, &[1.0, 1.0, 1.0], &mut basis);
        assert_eq!(basis[3], vec![26.0; 3]);
    }

    #[test]
    fn clenshaw_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lt = random_operator(10, &mut rng);
        for order in 1..=5 {
            let coeffs: Vec<Vec<f64>> = (0..order)
                .map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let fast = cheb_sum_vectors(&lt, &coeffs);
            let mut slow = [0.0; 10];
            for (k, c) in coeffs.iter().enumerate() {
                let mut basis = vec![vec![0.0; 10]; k + 1];
                cheb_basis_into(&lt, c, &mut basis);
                for i in 0..10 {
                    slow[i] += basis[k][i];
                }
            }
            for i in 0..10 {
                assert!((fast[i] - slow[i]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn linear_in_signal_and_theta(seed in 0u64..100_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let lt = random_operator(n, &mut rng);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c1 = ChebCoeffs::new(t1.clone()).unwrap();
            let c2 = ChebCoeffs::new(t2.clone()).unwrap();

            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = cheb_filter(&lt, &mix, &c1).unwrap();
            let fx = cheb_filter(&lt, &x, &c1).unwrap();
            let fy = cheb_filter(&lt, &y, &c1).unwrap();
            for i in 0..n {
                prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-10);
            }

            let sum = ChebCoeffs::new(t1.iter().zip(&t2).map(|(p, q)| p + q).collect()).unwrap();
            let lhs = cheb_filter(&lt, &x, &sum).unwrap();
            let g2 = cheb_filter(&lt, &x, &c2).unwrap();
            for i in 0..n {
                prop_assert!((lhs[i] - (fx[i] + g2[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn output_is_k_hop_local(seed in 0u64..100_000, order in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 20;
            // A path graph makes hop distances easy to read off.
            let mut entries: Vec<_> = (0..n - 1).map(|i| (i, i + 1, rng.random_range(-0.5..0.5))).collect();
            entries.extend((0..n).map(|i| (i, i, rng.random_range(-0.5..0.5))));
            let lt = SparseSym::from_entries(n, entries).unwrap();
            let v = rng.random_range(0..n);
            let mut x = vec![0.0; n];
            x[v] = 1.0;
            let c = ChebCoeffs::new((0..order).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let y = cheb_filter(&lt, &x, &c).unwrap();
            for (u, &yu) in y.iter().enumerate() {
                if u.abs_diff(v) > order - 1 {
                    prop_assert_eq!(yu, 0.0);
                }
            }
        }
    }
}
