//! Dense kernels: thin SVD, energy-based rank selection, truncation,
//! orthogonal projection and Frobenius-norm utilities.
//!
//! The SVD itself is delegated to nalgebra's Golub–Kahan implementation; this
//! module adds the conventions the rest of the crate relies on (descending
//! order, deterministic signs, zero-trimming).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const ZERO_TRIM_RTOL: f64 = 1e-12;

/// Default iteration cap handed to the bidiagonal QR sweep.
pub const DEFAULT_SVD_MAX_ITER: usize = 10_000;

/// An `N x D` matrix of token features (rows are tokens, columns channels).
///
/// Entries are always finite; constructors reject NaN and infinities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct FeatureMatrix(DMatrix<f64>);

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for FeatureMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        FeatureMatrix::from_row_major(raw.rows, raw.cols, raw.data)
    }
}

impl From<FeatureMatrix> for RawMatrix {
    fn from(m: FeatureMatrix) -> Self {
        RawMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data: m.to_row_major(),
        }
    }
}

impl FeatureMatrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, &data))
    }

    /// Wraps a nalgebra matrix, checking shape and finiteness.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(Error::EmptyMatrix {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        ensure_finite(&m)?;
        Ok(FeatureMatrix(m))
    }

    /// Caller guarantees shape and finiteness (results of arithmetic on
    /// already-validated matrices).
    pub(crate) fn wrap(m: DMatrix<f64>) -> Self {
        debug_assert!(m.nrows() > 0 && m.ncols() > 0);
        FeatureMatrix(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(
            rows > 0 && cols > 0,
            "FeatureMatrix dimensions must be >= 1"
        );
        FeatureMatrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        assert!(n > 0, "FeatureMatrix dimensions must be >= 1");
        FeatureMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(rows: usize, cols: usize, diag: &[f64]) -> Result<Self> {
        let mut m = DMatrix::zeros(rows, cols);
        for (i, &d) in diag.iter().enumerate().take(rows.min(cols)) {
            m[(i, i)] = d;
        }
        Self::new(m)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.row_major_iter().collect()
    }

    /// Entries in row-major order.
    pub fn row_major_iter(&self) -> impl Iterator<Item = f64> + '_ {
        let (rows, cols) = self.shape();
        (0..rows).flat_map(move |r| (0..cols).map(move |c| self.0[(r, c)]))
    }

    pub fn add(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        check_same_shape(self, other)?;
        Ok(FeatureMatrix(&self.0 + &other.0))
    }

    pub fn sub(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        check_same_shape(self, other)?;
        Ok(FeatureMatrix(&self.0 - &other.0))
    }

    pub fn scale(&self, c: f64) -> FeatureMatrix {
        FeatureMatrix(&self.0 * c)
    }

    /// `a * self + b * other`, used by the EMA recursion.
    pub fn lincomb(&self, a: f64, other: &FeatureMatrix, b: f64) -> Result<FeatureMatrix> {
        check_same_shape(self, other)?;
        Ok(FeatureMatrix(
            self.0.zip_map(&other.0, |x, y| a * x + b * y),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Thin SVD `F = U diag(sigma) V^T` with descending singular values.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// `N x r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Length `r`, nonincreasing, nonnegative.
    pub sigma: Vec<f64>,
    /// `D x r`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    /// Number of retained components, `min(N, D)` straight out of [`thin_svd`].
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Count of singular values above `ZERO_TRIM_RTOL * sigma[0]`.
    pub fn effective_rank(&self) -> usize {
        effective_rank(&self.sigma)
    }

    pub fn reconstruct(&self) -> FeatureMatrix {
        truncate_unchecked(self, self.rank())
    }
}

pub fn effective_rank(sigma: &[f64]) -> usize {
    let Some(&top) = sigma.first() else {
        return 0;
    };
    if top <= 0.0 {
        return 0;
    }
    let floor = ZERO_TRIM_RTOL * top;
    sigma.iter().take_while(|&&s| s > floor).count()
}

pub fn thin_svd(f: &FeatureMatrix) -> Result<SvdFactors> {
    thin_svd_with(f, DEFAULT_SVD_MAX_ITER)
}

pub fn thin_svd_with(f: &FeatureMatrix, max_iter: usize) -> Result<SvdFactors> {
    let m = f.as_matrix();
    ensure_finite(m)?;
    let (rows, cols) = m.shape();

    let svd = nalgebra::SVD::try_new(m.clone(), true, true, f64::EPSILON, max_iter).ok_or(
        Error::NoConvergence {
            rows,
            cols,
            max_iter,
        },
    )?;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let s = svd.singular_values;

    let r = s.len();
    let mut order: Vec<usize> = (0..r).collect();
    // Stable sort keeps ties in nalgebra's order, so results stay deterministic.
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let mut u_out = DMatrix::zeros(rows, r);
    let mut v_out = DMatrix::zeros(cols, r);
    let mut sigma = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(s[src].max(0.0));
        u_out.set_column(dst, &u.column(src));
        v_out.set_column(dst, &v_t.row(src).transpose());
    }
    fix_signs(&mut u_out, &mut v_out);

    Ok(SvdFactors {
        u: u_out,
        sigma,
        v: v_out,
    })
}

/// Flips each `(u_i, v_i)` pair so that the largest-magnitude entry of `v_i`
/// is positive. The first index wins ties.
pub fn fix_signs(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for j in 0..v.ncols() {
        let col = v.column(j);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            v.column_mut(j).neg_mut();
            if j < u.ncols() {
                u.column_mut(j).neg_mut();
            }
        }
    }
}

/// Smallest `k >= 1` whose cumulative squared energy reaches `tau`.
pub fn select_rank(sigma: &[f64], tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidTau(tau));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let mut acc = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        acc += s * s;
        if acc / total >= tau {
            return Ok(i + 1);
        }
    }
    // Only reachable through rounding when tau == 1.
    Ok(sigma.len())
}

/// `U_k diag(sigma_1..k) V_k^T`.
pub fn truncate(f: &SvdFactors, k: usize) -> Result<FeatureMatrix> {
    if k == 0 || k > f.rank() {
        return Err(Error::RankOutOfRange { k, max: f.rank() });
    }
    Ok(truncate_unchecked(f, k))
}

fn truncate_unchecked(f: &SvdFactors, k: usize) -> FeatureMatrix {
    let mut us = f.u.columns(0, k).into_owned();
    for (j, &s) in f.sigma.iter().take(k).enumerate() {
        us.column_mut(j).scale_mut(s);
    }
    FeatureMatrix::wrap(us * f.v.columns(0, k).transpose())
}

/// `F V_k V_k^T`: orthogonal projection of the rows of `F` onto `span(V_k)`.
///
/// `V_k` must have orthonormal columns; this is not re-checked here.
pub fn project_onto_basis(f: &FeatureMatrix, v_k: &DMatrix<f64>) -> Result<FeatureMatrix> {
    if v_k.nrows() != f.cols() {
        return Err(Error::shape(
            format!("basis with {} rows", f.cols()),
            format!("basis with {} rows", v_k.nrows()),
        ));
    }
    let coeffs = f.as_matrix() * v_k;
    Ok(FeatureMatrix::wrap(coeffs * v_k.transpose()))
}

/// `|| V^T V - I ||_F`.
pub fn orthonormality_defect(v: &DMatrix<f64>) -> f64 {
    let gram = v.transpose() * v;
    (gram - DMatrix::<f64>::identity(v.ncols(), v.ncols())).norm()
}

pub fn frobenius_norm(f: &FeatureMatrix) -> f64 {
    f.as_matrix().norm()
}

pub fn frobenius_inner(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.as_matrix().dot(b.as_matrix()))
}

/// `||a - b||_F / ||b||_F`.
pub fn relative_error(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    check_same_shape(a, b)?;
    let denom = b.as_matrix().norm();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((a.as_matrix() - b.as_matrix()).norm() / denom)
}

pub(crate) fn check_same_shape(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        return Err(Error::shape(format!("{ar}x{ac}"), format!("{br}x{bc}")));
    }
    Ok(())
}

fn ensure_finite(m: &DMatrix<f64>) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite {
                    row: r,
                    col: c,
                    rows: m.nrows(),
                    cols: m.ncols(),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::gaussian_matrix;
    use approx::assert_relative_eq;

    fn diag_4x3() -> FeatureMatrix {
        FeatureMatrix::from_diagonal(4, 3, &[3.0, 2.0, 1.0]).unwrap()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let f = FeatureMatrix::identity(4);
        let svd = thin_svd(&f).unwrap();
        assert_eq!(svd.sigma.len(), 4);
        for s in &svd.sigma {
            assert_relative_eq!(*s, 1.0, epsilon = 1e-14);
        }
        let uvt = &svd.u * svd.v.transpose();
        assert!((uvt - DMatrix::<f64>::identity(4, 4)).norm() < 1e-13);
    }

    #[test]
    fn padded_diagonal_spectrum() {
        let svd = thin_svd(&diag_4x3()).unwrap();
        assert_eq!(svd.rank(), 3);
        for (s, want) in svd.sigma.iter().zip([3.0, 2.0, 1.0]) {
            assert_relative_eq!(*s, want, epsilon = 1e-14);
        }
    }

    #[test]
    fn seeded_reconstruction() {
        let f = gaussian_matrix(64, 32, 7);
        let svd = thin_svd(&f).unwrap();
        let err = relative_error(&svd.reconstruct(), &f).unwrap();
        assert!(err <= 1e-10, "relative reconstruction error {err}");
        assert!(orthonormality_defect(&svd.u) <= 1e-8 * 32.0);
        assert!(orthonormality_defect(&svd.v) <= 1e-8 * 32.0);
        assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn wide_matrix_is_thin() {
        let f = gaussian_matrix(8, 20, 3);
        let svd = thin_svd(&f).unwrap();
        assert_eq!(svd.u.shape(), (8, 8));
        assert_eq!(svd.v.shape(), (20, 8));
        assert!(relative_error(&svd.reconstruct(), &f).unwrap() < 1e-12);
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let svd = thin_svd(&gaussian_matrix(12, 9, 11)).unwrap();
        for j in 0..svd.v.ncols() {
            let col = svd.v.column(j);
            let max = col
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = DMatrix::zeros(2, 2);
        m[(1, 0)] = f64::NAN;
        assert!(matches!(
            FeatureMatrix::new(m),
            Err(Error::NonFinite { row: 1, col: 0, .. })
        ));
        assert!(matches!(
            FeatureMatrix::from_row_major(1, 2, vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn select_rank_hand_cases() {
        assert_eq!(select_rank(&[2.0, 1.0, 1.0], 0.5).unwrap(), 1);
        assert_eq!(select_rank(&[2.0, 1.0, 1.0], 1.0).unwrap(), 3);
        assert_eq!(select_rank(&[3.0, 2.0, 1.0], 0.9).unwrap(), 2);
    }

    #[test]
    fn select_rank_errors() {
        assert!(matches!(
            select_rank(&[0.0, 0.0], 0.5),
            Err(Error::ZeroSpectrum)
        ));
        assert!(matches!(
            select_rank(&[1.0], 0.0),
            Err(Error::InvalidTau(_))
        ));
        assert!(matches!(
            select_rank(&[1.0], 1.5),
            Err(Error::InvalidTau(_))
        ));
        assert!(matches!(
            select_rank(&[1.0], f64::NAN),
            Err(Error::InvalidTau(_))
        ));
    }

    #[test]
    fn select_rank_matches_linear_scan() {
        let svd = thin_svd(&gaussian_matrix(40, 30, 21)).unwrap();
        // Brute force: recompute every prefix energy from scratch.
        let total: f64 = svd.sigma.iter().map(|s| s * s).sum();
        let oracle = (1..=svd.sigma.len())
            .find(|&k| svd.sigma[..k].iter().map(|s| s * s).sum::<f64>() / total >= 0.85)
            .unwrap();
        assert_eq!(select_rank(&svd.sigma, 0.85).unwrap(), oracle);
    }

    #[test]
    fn truncate_full_rank_is_identity() {
        let f = gaussian_matrix(10, 6, 5);
        let svd = thin_svd(&f).unwrap();
        let full = truncate(&svd, svd.rank()).unwrap();
        assert!(relative_error(&full, &f).unwrap() < 1e-10);
    }

    #[test]
    fn truncate_diagonal() {
        let f = FeatureMatrix::from_diagonal(3, 3, &[3.0, 2.0, 1.0]).unwrap();
        let fk = truncate(&thin_svd(&f).unwrap(), 1).unwrap();
        let want = FeatureMatrix::from_diagonal(3, 3, &[3.0, 0.0, 0.0]).unwrap();
        assert!((fk.as_matrix() - want.as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn truncate_tail_energy() {
        let f = gaussian_matrix(64, 32, 99);
        let svd = thin_svd(&f).unwrap();
        let fk = truncate(&svd, 5).unwrap();
        let err2 = frobenius_norm(&f.sub(&fk).unwrap()).powi(2);
        let tail: f64 = svd.sigma[5..].iter().map(|s| s * s).sum();
        assert_relative_eq!(err2, tail, max_relative = 1e-8);
    }

    #[test]
    fn truncate_rejects_bad_rank() {
        let svd = thin_svd(&gaussian_matrix(4, 3, 1)).unwrap();
        assert!(matches!(
            truncate(&svd, 0),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(matches!(
            truncate(&svd, 4),
            Err(Error::RankOutOfRange { k: 4, max: 3 })
        ));
    }

    #[test]
    fn projection_onto_coordinate_axes() {
        let f = gaussian_matrix(5, 6, 2);
        let v = DMatrix::<f64>::identity(6, 6).columns(0, 2).into_owned();
        let p = project_onto_basis(&f, &v).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                let want = if c < 2 { f.get(r, c) } else { 0.0 };
                assert_eq!(p.get(r, c), want);
            }
        }
    }

    #[test]
    fn projection_onto_own_basis_matches_truncation() {
        let f = gaussian_matrix(30, 20, 17);
        let svd = thin_svd(&f).unwrap();
        let k = 6;
        let p = project_onto_basis(&f, &svd.v.columns(0, k).into_owned()).unwrap();
        let fk = truncate(&svd, k).unwrap();
        assert!(relative_error(&p, &fk).unwrap() < 1e-8);
    }

    #[test]
    fn projection_is_idempotent() {
        let f = gaussian_matrix(12, 10, 8);
        let v = thin_svd(&gaussian_matrix(15, 10, 9))
            .unwrap()
            .v
            .columns(0, 4)
            .into_owned();
        let once = project_onto_basis(&f, &v).unwrap();
        let twice = project_onto_basis(&once, &v).unwrap();
        assert!((once.as_matrix() - twice.as_matrix()).norm() <= 1e-10 * frobenius_norm(&f));
    }

    #[test]
    fn projection_dimension_mismatch() {
        let f = gaussian_matrix(3, 4, 1);
        let v = DMatrix::<f64>::identity(5, 2);
        assert!(matches!(
            project_onto_basis(&f, &v),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn norm_helpers() {
        let i3 = FeatureMatrix::identity(3);
        assert_relative_eq!(frobenius_norm(&i3), 3f64.sqrt(), epsilon = 1e-15);
        let a = gaussian_matrix(4, 5, 4);
        assert_relative_eq!(
            frobenius_inner(&a, &a).unwrap(),
            frobenius_norm(&a).powi(2),
            max_relative = 1e-14
        );
        assert_eq!(relative_error(&a, &a).unwrap(), 0.0);
        let z = FeatureMatrix::zeros(4, 5);
        assert!(matches!(relative_error(&a, &z), Err(Error::ZeroReference)));
        assert!(matches!(
            frobenius_inner(&a, &i3),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn effective_rank_trims_tiny_values() {
        assert_eq!(effective_rank(&[1.0, 0.5, 1e-13, 0.0]), 2);
        assert_eq!(effective_rank(&[0.0, 0.0]), 0);
        assert_eq!(effective_rank(&[]), 0);
    }

    #[test]
    fn serde_round_trip_is_row_major() {
        let f = FeatureMatrix::from_row_major(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let json = serde_json::to_string(&f).unwrap();
        assert!(json.contains("[1.0,2.0,3.0,4.0,5.0,6.0]"));
        let back: FeatureMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f);
    }
}
