//! Dense Cholesky factorization, triangular solves and log-determinants.
//!
//! Kronecker-structured covariances `K ⊗ I_d` are never materialized here:
//! a trajectory is an `L x d` matrix and `(K ⊗ I_d)^{-1} vec(Z)` is simply
//! `K^{-1} Z`. [`kron_identities_check`] is the one place that builds the
//! explicit product, as a test oracle.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::kernels::GramMatrix;
use crate::{Error, Result, Scalar};

/// Absolute asymmetry tolerated before symmetrizing an input matrix.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Lower-triangular factor with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular<F>(Array2<F>);

impl<F: Scalar> LowerTriangular<F> {
    /// Wraps `l` after checking shape, triangularity and the positive diagonal.
    pub fn new(l: Array2<F>) -> Result<Self> {
        let n = l.nrows();
        if l.ncols() != n {
            return Err(Error::DimensionMismatch(format!("factor is {}x{}", n, l.ncols())));
        }
        for i in 0..n {
            if !(l[[i, i]] > F::zero()) {
                return Err(Error::InvalidArgument(format!("factor diagonal {} is not positive", i + 1)));
            }
            for j in i + 1..n {
                if l[[i, j]] != F::zero() {
                    return Err(Error::InvalidArgument("factor has entries above the diagonal".into()));
                }
            }
        }
        Ok(LowerTriangular(l))
    }

    pub fn matrix(&self) -> &Array2<F> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn diag(&self) -> ArrayView1<'_, F> {
        self.0.diag()
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> Array2<F> {
        self.0.dot(&self.0.t())
    }

    /// Factor of the leading `k x k` block (itself the leading block of `L`).
    pub fn leading(&self, k: usize) -> LowerTriangular<F> {
        LowerTriangular(self.0.slice(s![..k, ..k]).to_owned())
    }

    /// `L^{-1}`.
    pub fn inverse(&self) -> Array2<F> {
        let n = self.dim();
        solve_lower_mat(self, Array2::eye(n).view()).expect("square identity conforms")
    }
}

/// Max absolute asymmetry, then `(A + A^T) / 2`.
pub fn symmetrized<F: Scalar>(a: ArrayView2<F>) -> Result<Array2<F>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!("matrix is {}x{}", n, a.ncols())));
    }
    if n == 0 {
        return Err(Error::Empty("matrix has dimension 0".into()));
    }
    let mut worst = F::zero();
    for i in 0..n {
        for j in 0..i {
            let d = (a[[i, j]] - a[[j, i]]).abs();
            if !(d <= worst) {
                worst = d;
            }
        }
    }
    if !(worst <= F::lit(SYMMETRY_TOL)) {
        return Err(Error::NotSymmetric(worst.to_f64_lossy()));
    }
    let two = F::lit(2.0);
    Ok(Array2::from_shape_fn((n, n), |(i, j)| (a[[i, j]] + a[[j, i]]) / two))
}

/// Cholesky factorization `A = L L^T`.
///
/// Fails with the 1-based index of the first non-positive pivot.
pub fn cholesky<F: Scalar>(a: ArrayView2<F>) -> Result<LowerTriangular<F>> {
    let a = symmetrized(a)?;
    let n = a.nrows();
    let mut l = Array2::<F>::zeros((n, n));
    for j in 0..n {
        let row_j = l.slice(s![j, ..j]);
        let pivot = a[[j, j]] - row_j.dot(&row_j);
        if !(pivot > F::zero()) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j + 1, value: pivot.to_f64_lossy() });
        }
        let d = pivot.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let dot = l.slice(s![i, ..j]).dot(&l.slice(s![j, ..j]));
            l[[i, j]] = (a[[i, j]] - dot) / d;
        }
    }
    Ok(LowerTriangular(l))
}

fn check_rows(n: usize, rows: usize) -> Result<()> {
    if n != rows {
        return Err(Error::DimensionMismatch(format!("factor is {n}x{n}, right-hand side has {rows} rows")));
    }
    Ok(())
}

/// Forward substitution `L x = b`.
pub fn solve_lower_vec<F: Scalar>(l: &LowerTriangular<F>, b: ArrayView1<F>) -> Result<Array1<F>> {
    let l = &l.0;
    let n = l.nrows();
    check_rows(n, b.len())?;
    let mut x = b.to_owned();
    for i in 0..n {
        let acc = l.slice(s![i, ..i]).dot(&x.slice(s![..i]));
        x[i] = (x[i] - acc) / l[[i, i]];
    }
    Ok(x)
}

/// Back substitution `L^T x = b`.
pub fn solve_upper_t_vec<F: Scalar>(l: &LowerTriangular<F>, b: ArrayView1<F>) -> Result<Array1<F>> {
    let l = &l.0;
    let n = l.nrows();
    check_rows(n, b.len())?;
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let acc = l.slice(s![i + 1.., i]).dot(&x.slice(s![i + 1..]));
        x[i] = (x[i] - acc) / l[[i, i]];
    }
    Ok(x)
}

/// Forward substitution for every column of `b`.
pub fn solve_lower_mat<F: Scalar>(l: &LowerTriangular<F>, b: ArrayView2<F>) -> Result<Array2<F>> {
    let lm = &l.0;
    let n = lm.nrows();
    check_rows(n, b.nrows())?;
    let mut x = b.to_owned();
    for i in 0..n {
        let (done, mut rest) = x.view_mut().split_at(Axis(0), i);
        let acc = lm.slice(s![i, ..i]).dot(&done);
        let mut row = rest.row_mut(0);
        let d = lm[[i, i]];
        row.zip_mut_with(&acc, |r, &a| *r = (*r - a) / d);
    }
    Ok(x)
}

/// Back substitution `L^T X = B` for every column of `b`.
pub fn solve_upper_t_mat<F: Scalar>(l: &LowerTriangular<F>, b: ArrayView2<F>) -> Result<Array2<F>> {
    let lm = &l.0;
    let n = lm.nrows();
    check_rows(n, b.nrows())?;
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let (mut head, tail) = x.view_mut().split_at(Axis(0), i + 1);
        let acc = lm.slice(s![i + 1.., i]).dot(&tail);
        let mut row = head.row_mut(i);
        let d = lm[[i, i]];
        row.zip_mut_with(&acc, |r, &a| *r = (*r - a) / d);
    }
    Ok(x)
}

/// `(L L^T) x = b` via two triangular sweeps.
pub fn solve_chol_vec<F: Scalar>(l: &LowerTriangular<F>, b: ArrayView1<F>) -> Result<Array1<F>> {
    let y = solve_lower_vec(l, b)?;
    solve_upper_t_vec(l, y.view())
}

/// `(L L^T) X = B` column by column.
pub fn solve_chol_mat<F: Scalar>(l: &LowerTriangular<F>, b: ArrayView2<F>) -> Result<Array2<F>> {
    let y = solve_lower_mat(l, b)?;
    solve_upper_t_mat(l, y.view())
}

/// `log det(L L^T) = 2 sum_i log L_ii`.
pub fn logdet_from_chol<F: Scalar>(l: &LowerTriangular<F>) -> F {
    F::lit(2.0) * l.0.diag().iter().map(|d| d.ln()).sum::<F>()
}

/// Largest `L * d` for which the explicit Kronecker product may be built.
pub const KRON_MATERIALIZE_LIMIT: usize = 64;

/// `K ⊗ I_d`, explicit.
pub fn kron_identity<F: Scalar>(k: ArrayView2<F>, d: usize) -> Result<Array2<F>> {
    let n = k.nrows();
    if n * d > KRON_MATERIALIZE_LIMIT {
        return Err(Error::SizeBound(format!(
            "L*d = {} exceeds the materialization limit {KRON_MATERIALIZE_LIMIT}",
            n * d
        )));
    }
    let mut out = Array2::zeros((n * d, n * d));
    for i in 0..n {
        for j in 0..n {
            for c in 0..d {
                out[[i * d + c, j * d + c]] = k[[i, j]];
            }
        }
    }
    Ok(out)
}

/// Outcome of checking `det(K ⊗ I) = det(K)^d` and `(K ⊗ I)^{-1} = K^{-1} ⊗ I`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronReport<F> {
    pub det_kron: F,
    pub det_power: F,
    pub det_rel_err: F,
    pub inv_rel_err: F,
    pub passed: bool,
}

/// Relative tolerance for both Kronecker identities.
pub const KRON_TOL: f64 = 1e-8;

pub fn kron_identities_check<F: Scalar>(gram: &GramMatrix<F>, d: usize) -> Result<KronReport<F>> {
    if d == 0 {
        return Err(Error::InvalidArgument("latent dimension must be >= 1".into()));
    }
    let k = gram.matrix();
    let big = kron_identity(k.view(), d)?;
    let big_chol = cholesky(big.view())?;

    let det_kron = logdet_from_chol(&big_chol).exp();
    let det_power = gram.logdet().exp().powi(d as i32);
    let det_rel_err = (det_kron - det_power).abs() / det_power.abs();

    let n = big.nrows();
    let big_inv = solve_chol_mat(&big_chol, Array2::eye(n).view())?;
    let small_inv = solve_chol_mat(gram.chol(), Array2::eye(k.nrows()).view())?;
    let kron_inv = kron_identity(small_inv.view(), d)?;
    let diff = (&big_inv - &kron_inv).mapv(|x| x * x).sum().sqrt();
    let scale = kron_inv.mapv(|x| x * x).sum().sqrt();
    let inv_rel_err = diff / scale;

    let tol = F::lit(KRON_TOL);
    Ok(KronReport {
        det_kron,
        det_power,
        det_rel_err,
        inv_rel_err,
        passed: det_rel_err <= tol && inv_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_factors_to_identity() {
        let l = cholesky(Array2::<f64>::eye(3).view()).unwrap();
        assert_eq!(l.matrix(), &Array2::<f64>::eye(3));
    }

    #[test]
    fn two_by_two_by_hand() {
        let l = cholesky(array![[4.0, 2.0], [2.0, 3.0]].view()).unwrap();
        let expected = array![[2.0, 0.0], [1.0, 2f64.sqrt()]];
        assert!((l.matrix() - &expected).iter().all(|d| d.abs() < 1e-15));
        assert!((logdet_from_chol(&l) - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn indefinite_fails_at_second_pivot() {
        let err = cholesky(array![[1.0, 2.0], [2.0, 1.0]].view()).unwrap_err();
        assert_eq!(err, Error::NotPositiveDefinite { pivot: 2, value: -3.0 });
    }

    #[test]
    fn asymmetry_beyond_tolerance_is_rejected() {
        let err = cholesky(array![[1.0, 0.1], [0.1 + 1e-9, 1.0]].view()).unwrap_err();
        assert!(matches!(err, Error::NotSymmetric(_)));
        assert!(cholesky(array![[1.0, 0.1], [0.1 + 1e-14, 1.0]].view()).is_ok());
    }

    #[test]
    fn solves() {
        let eye = LowerTriangular::new(Array2::<f64>::eye(3)).unwrap();
        let b = array![1.0, 2.0, 3.0];
        assert_eq!(solve_lower_vec(&eye, b.view()).unwrap(), b);

        let l = cholesky(array![[4.0_f64, 2.0], [2.0, 3.0]].view()).unwrap();
        let x = solve_chol_vec(&l, array![6.0, 5.0].view()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);

        let xm = solve_chol_mat(&l, array![[6.0, 4.0], [5.0, 2.0]].view()).unwrap();
        assert!((xm[[0, 0]] - 1.0).abs() < 1e-14 && (xm[[1, 0]] - 1.0).abs() < 1e-14);
        assert!((xm[[0, 1]] - 1.0).abs() < 1e-14 && (xm[[1, 1]] - 0.0).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        let l = cholesky(Array2::<f64>::eye(3).view()).unwrap();
        assert!(matches!(solve_chol_vec(&l, array![1.0, 2.0].view()), Err(Error::DimensionMismatch(_))));
        assert!(matches!(solve_lower_mat(&l, Array2::zeros((2, 2)).view()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn diagonal_logdet() {
        let l = cholesky((Array2::<f64>::eye(3) * 2.0).view()).unwrap();
        assert!((logdet_from_chol(&l) - 3.0 * 2f64.ln()).abs() < 1e-14);
        let l = cholesky(Array2::<f64>::eye(5).view()).unwrap();
        assert_eq!(logdet_from_chol(&l), 0.0);
    }

    #[test]
    fn kron_scalar_and_identity() {
        let g = GramMatrix::from_matrix(array![[2.0_f64]]).unwrap();
        let r = kron_identities_check(&g, 3).unwrap();
        assert!((r.det_power - 8.0).abs() < 1e-12 && r.passed);

        let g = GramMatrix::from_matrix(Array2::<f64>::eye(4)).unwrap();
        let r = kron_identities_check(&g, 2).unwrap();
        assert_eq!(r.det_rel_err, 0.0);
        assert_eq!(r.inv_rel_err, 0.0);
    }

    #[test]
    fn kron_size_bound() {
        let g = GramMatrix::from_matrix(Array2::<f64>::eye(9)).unwrap();
        assert!(matches!(kron_identities_check(&g, 8), Err(Error::SizeBound(_))));
    }
}
