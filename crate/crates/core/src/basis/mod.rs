//! Reference-basis extraction and reuse.
//!
//! A [`SpectralBasis`] holds the right singular vectors and singular values of
//! one reference feature matrix. Any later feature matrix with the same
//! channel count can be split against it into a principal part (its projection
//! onto the leading `k` right singular vectors) and an orthogonal residual,
//! without running another SVD.

mod file;
mod store;

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, FeatureMatrix};

pub use file::{load_basis, save_basis, BASIS_FORMAT_VERSION, BASIS_MAGIC};
pub use store::{BasisMode, BasisStore, Manifest, ManifestEntry};

/// Relative floor applied to cached singular values before inversion.
pub const SIGMA_CLAMP_RTOL: f64 = 1e-12;

/// Timestep label of a basis: a concrete step or the per-block global basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "i32", try_from = "i32")]
pub enum StepId {
    Step(u32),
    Global,
}

impl StepId {
    pub fn to_i32(self) -> i32 {
        match self {
            StepId::Step(s) => s as i32,
            StepId::Global => -1,
        }
    }

    pub fn from_i32(v: i32) -> Option<StepId> {
        match v {
            -1 => Some(StepId::Global),
            s if s >= 0 => Some(StepId::Step(s as u32)),
            _ => None,
        }
    }
}

impl From<StepId> for i32 {
    fn from(s: StepId) -> i32 {
        s.to_i32()
    }
}

impl TryFrom<i32> for StepId {
    type Error = String;

    fn try_from(v: i32) -> std::result::Result<Self, String> {
        StepId::from_i32(v).ok_or_else(|| format!("invalid step id {v}"))
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepId::Step(s) => write!(f, "{s}"),
            StepId::Global => f.write_str("global"),
        }
    }
}

/// Cached right singular vectors `V_C` and singular values `sigma_C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    /// `D x r`, orthonormal columns, sign-normalised.
    pub v: DMatrix<f64>,
    /// Length `r`, nonincreasing, all above the zero-trim floor.
    pub sigma: Vec<f64>,
    pub block_id: i32,
    pub step_id: StepId,
    pub source_id: String,
    pub tau: f64,
    pub k_default: usize,
}

impl SpectralBasis {
    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// First `k` columns of `V_C`.
    pub fn leading(&self, k: usize) -> Result<DMatrix<f64>> {
        self.check_rank(k)?;
        Ok(self.v.columns(0, k).into_owned())
    }

    fn check_rank(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.rank() {
            return Err(Error::RankOutOfRange {
                k,
                max: self.rank(),
            });
        }
        Ok(())
    }

    fn check_dim(&self, f: &FeatureMatrix) -> Result<()> {
        if f.cols() != self.dim() {
            return Err(Error::shape(
                format!("{} feature channels", self.dim()),
                format!("{} feature channels", f.cols()),
            ));
        }
        Ok(())
    }

    /// Checks the structural invariants; `Err` carries a description.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let r = self.rank();
        if r == 0 {
            return Err("basis has rank 0".into());
        }
        if self.v.ncols() != r {
            return Err(format!(
                "V has {} columns but sigma has {r} entries",
                self.v.ncols()
            ));
        }
        if self.k_default == 0 || self.k_default > r {
            return Err(format!("k_default {} outside 1..={r}", self.k_default));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err("sigma has negative or non-finite entries".into());
        }
        if self.sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err("sigma is not nonincreasing".into());
        }
        if self.v.iter().any(|x| !x.is_finite()) {
            return Err("V has non-finite entries".into());
        }
        let defect = linalg::orthonormality_defect(&self.v);
        if defect > 1e-6 {
            return Err(format!("V columns not orthonormal (defect {defect:.3e})"));
        }
        Ok(())
    }
}

/// Principal part, residual and the rank that separated them.
#[derive(Clone, Debug)]
pub struct SubspaceSplit {
    pub principal: FeatureMatrix,
    pub residual: FeatureMatrix,
    pub k: usize,
    /// `||principal||^2 / ||F||^2`, or 0 when `F` is zero.
    pub principal_energy_fraction: f64,
}

/// One-time SVD of a reference feature matrix.
pub fn build_reference_basis(
    f_ref: &FeatureMatrix,
    tau: f64,
    block_id: i32,
    step_id: StepId,
    source_id: impl Into<String>,
) -> Result<SpectralBasis> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidTau(tau));
    }
    let svd = linalg::thin_svd(f_ref)?;
    let r = svd.effective_rank();
    if r == 0 {
        return Err(Error::ZeroSpectrum);
    }
    let sigma = svd.sigma[..r].to_vec();
    let k_default = linalg::select_rank(&sigma, tau)?;
    Ok(SpectralBasis {
        v: svd.v.columns(0, r).into_owned(),
        sigma,
        block_id,
        step_id,
        source_id: source_id.into(),
        tau,
        k_default,
    })
}

/// `U = F V_C diag(sigma_C)^-1`, with each `sigma_C,i` clamped below at
/// `SIGMA_CLAMP_RTOL * sigma_C,1`.
pub fn reconstruct_left_factors(f: &FeatureMatrix, basis: &SpectralBasis) -> Result<DMatrix<f64>> {
    basis.check_dim(f)?;
    let floor = SIGMA_CLAMP_RTOL * basis.sigma[0];
    let mut u = f.as_matrix() * &basis.v;
    for (j, &s) in basis.sigma.iter().enumerate() {
        u.column_mut(j).scale_mut(1.0 / s.max(floor));
    }
    Ok(u)
}

/// `U_k diag(sigma_C,k) V_C,k^T` from left factors produced by
/// [`reconstruct_left_factors`].
pub fn principal_from_left_factors(
    u: &DMatrix<f64>,
    basis: &SpectralBasis,
    k: usize,
) -> Result<FeatureMatrix> {
    basis.check_rank(k)?;
    if u.ncols() < k {
        return Err(Error::shape(
            format!("at least {k} left factors"),
            u.ncols(),
        ));
    }
    let mut us = u.columns(0, k).into_owned();
    for (j, &s) in basis.sigma.iter().take(k).enumerate() {
        us.column_mut(j).scale_mut(s);
    }
    FeatureMatrix::new(us * basis.v.columns(0, k).transpose())
}

/// Splits `f` into its projection onto the leading `k` basis vectors and the
/// orthogonal remainder. `k` defaults to the basis' `k_default`.
pub fn split(f: &FeatureMatrix, basis: &SpectralBasis, k: Option<usize>) -> Result<SubspaceSplit> {
    basis.check_dim(f)?;
    let k = k.unwrap_or(basis.k_default);
    let v_k = basis.leading(k)?;
    let principal = linalg::project_onto_basis(f, &v_k)?;
    let residual = f.sub(&principal)?;
    let total = linalg::frobenius_norm(f).powi(2);
    let principal_energy_fraction = if total > 0.0 {
        linalg::frobenius_norm(&principal).powi(2) / total
    } else {
        0.0
    };
    Ok(SubspaceSplit {
        principal,
        residual,
        k,
        principal_energy_fraction,
    })
}

/// Cross-basis stability scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSimilarity {
    /// Cosine times min/max norm ratio of the two singular-value vectors.
    pub sigma: f64,
    /// `|<V_a[:, i], V_b[:, i]>|` for `i < min(r_a, r_b)`.
    pub vectors: Vec<f64>,
    /// Energy-weighted mean of `vectors`.
    pub summary: f64,
}

/// Compares two bases index by index.
///
/// The summary weights vector `i` by the mean of its normalised energy in
/// both spectra, which keeps the score symmetric in `a` and `b`.
pub fn basis_similarity(a: &SpectralBasis, b: &SpectralBasis) -> Result<BasisSimilarity> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("basis dimension {}", a.dim()),
            format!("basis dimension {}", b.dim()),
        ));
    }
    let len = a.rank().max(b.rank());
    let pad = |s: &[f64]| {
        let mut out = s.to_vec();
        out.resize(len, 0.0);
        out
    };
    let sigma = crate::metrics::similarity(&pad(&a.sigma), &pad(&b.sigma))?
        .product
        .clamp(0.0, 1.0);

    let m = a.rank().min(b.rank());
    let vectors: Vec<f64> = (0..m)
        .map(|i| a.v.column(i).dot(&b.v.column(i)).abs().min(1.0))
        .collect();

    let energy = |s: &[f64]| {
        let total: f64 = s.iter().map(|x| x * x).sum();
        s.iter().take(m).map(|x| x * x / total).collect::<Vec<_>>()
    };
    let (ea, eb) = (energy(&a.sigma), energy(&b.sigma));
    let weights: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| 0.5 * (x + y)).collect();
    let wsum: f64 = weights.iter().sum();
    let summary = if wsum > 0.0 {
        weights
            .iter()
            .zip(&vectors)
            .map(|(w, s)| w * s)
            .sum::<f64>()
            / wsum
    } else {
        0.0
    };

    Ok(BasisSimilarity {
        sigma,
        vectors,
        summary: summary.clamp(0.0, 1.0),
    })
}
