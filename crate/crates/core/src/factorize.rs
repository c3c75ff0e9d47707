//! Relative inner-product matrix and its rank-3 factorization.
//!
//! With `r1` and `s1` as references, squared ranges combine into
//! `D[i-1][j-1] = d(i,j)^2 - d(i,1)^2 - d(1,j)^2 + d(1,1)^2 = -2 (r_i - r1)^T (s_j - s1)`,
//! which has rank at most 3 for points in 3D. The truncated SVD `D ~ U V` recovers the
//! geometry up to an unknown invertible 3x3 mixing matrix.

use nalgebra::{DMatrix, Matrix3};

use crate::scene::RangeMatrix;
use crate::{Error, Result};

/// Rank-3 factorization `D ~ U V` of the relative inner-product matrix.
#[derive(Debug, Clone)]
pub struct Factorization {
    d: DMatrix<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    singular_values: Vec<f64>,
    v_condition: f64,
}

impl Factorization {
    /// `(M-1) x (N-1)` relative matrix the factors were taken from.
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// `(M-1) x 3`, orthonormal columns.
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// `3 x (N-1)`, rows scaled by the leading singular values.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// All singular values of `D`, descending.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// First three columns of `V`.
    pub fn v_leading(&self) -> Matrix3<f64> {
        self.v.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// 2-norm condition number of [`Self::v_leading`]; infinite when singular.
    pub fn v_condition(&self) -> f64 {
        self.v_condition
    }

    /// Frobenius norm of `D - U V` relative to that of `D` (0 when `D` is zero).
    pub fn relative_error(&self) -> f64 {
        let norm = self.d.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (&self.d - &self.u * &self.v).norm() / norm
    }

    /// Same factorization with singular pair `k` sign-flipped in both factors. `U V` is
    /// unchanged; only the implied mixing matrix differs.
    pub fn with_flipped_component(&self, k: usize) -> Factorization {
        assert!(k < 3, "component index out of range");
        let mut out = self.clone();
        out.u.column_mut(k).neg_mut();
        out.v.row_mut(k).neg_mut();
        out.v_condition = condition_number(&out.v_leading());
        out
    }
}

pub fn build_relative_matrix(ranges: &RangeMatrix) -> Result<DMatrix<f64>> {
    let m = ranges.sensor_count();
    let n = ranges.source_count();
    if m < 2 || n < 2 {
        return Err(Error::invalid(format!(
            "relative matrix needs M >= 2 and N >= 2, got {m}x{n}"
        )));
    }
    let d11 = ranges.squared(0, 0);
    Ok(DMatrix::from_fn(m - 1, n - 1, |a, b| {
        let (i, j) = (a + 1, b + 1);
        ranges.squared(i, j) - ranges.squared(i, 0) - ranges.squared(0, j) + d11
    }))
}

/// Thin SVD `d = U diag(s) V^T` with singular values in descending order.
fn thin_svd(d: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let m = faer::Mat::<f64>::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)]);
    let svd = m
        .thin_svd()
        .map_err(|e| Error::invalid(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let left = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]);
    let right = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)]);
    let values: Vec<f64> = (0..s.nrows()).map(|k| s[k]).collect();
    debug_assert!(values.windows(2).all(|w| w[0] >= w[1]));
    Ok((left, values, right))
}

/// Truncated SVD keeping the top three singular triplets.
///
/// Each left singular vector is signed so that its largest-magnitude entry is
/// positive, with the matching right vector flipped along with it.
pub fn rank3_factors(d: &DMatrix<f64>) -> Result<Factorization> {
    let (rows, cols) = d.shape();
    if rows < 3 || cols < 3 {
        return Err(Error::invalid(format!(
            "rank-3 factorization needs D at least 3x3 (M, N >= 4), got {rows}x{cols}"
        )));
    }
    let (left, singular_values, right) = thin_svd(d)?;

    let mut u = DMatrix::zeros(rows, 3);
    let mut v = DMatrix::zeros(3, cols);
    for (k, sigma) in singular_values.iter().take(3).enumerate() {
        let col = left.column(k);
        let pivot = col.iter().copied().fold(0.0_f64, |best, x| {
            if x.abs() > best.abs() {
                x
            } else {
                best
            }
        });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        u.set_column(k, &(col * sign));
        v.set_row(k, &(right.column(k).transpose() * (sign * sigma)));
    }

    let v_condition = condition_number(&v.fixed_view::<3, 3>(0, 0).into_owned());
    Ok(Factorization {
        d: d.clone(),
        u,
        v,
        singular_values,
        v_condition,
    })
}

/// Builds `D` from the ranges and factorizes it.
pub fn factorize(ranges: &RangeMatrix) -> Result<Factorization> {
    rank3_factors(&build_relative_matrix(ranges)?)
}

/// `sigma_4 / sigma_1` of `D`: zero for an exact rank-3 fit, grows with noise.
/// Defined as 0 when `D` has fewer than four singular values or is zero.
pub fn rank_defect(d: &DMatrix<f64>) -> f64 {
    if d.nrows() < 4 || d.ncols() < 4 {
        return 0.0;
    }
    let Ok((_, sv, _)) = thin_svd(d) else {
        return f64::INFINITY;
    };
    if sv[0] == 0.0 {
        0.0
    } else {
        sv[3] / sv[0]
    }
}

fn condition_number(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
