//! Trajectory shape statistics: 2-D PCA traces and smoothness measures of the
//! whole, principal and residual parts of a block's features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::TrajectoryRecord;
use crate::basis::{split, SpectralBasis};
use crate::error::{Error, Result};
use crate::linalg::{self, FeatureMatrix};

/// Which part of each feature matrix a trace follows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceComponent {
    #[default]
    Whole,
    Principal,
    Residual,
}

impl TraceComponent {
    pub const ALL: [TraceComponent; 3] = [Self::Whole, Self::Principal, Self::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Self::Whole => "whole",
            Self::Principal => "principal",
            Self::Residual => "residual",
        }
    }
}

fn component_series(
    rec: &TrajectoryRecord,
    block: usize,
    basis: Option<&SpectralBasis>,
    k: Option<usize>,
    component: TraceComponent,
) -> Result<Vec<FeatureMatrix>> {
    let feats = rec.block(block)?;
    match (component, basis) {
        (TraceComponent::Whole, _) => Ok(feats.to_vec()),
        (_, None) => Err(Error::InvalidConfig(format!(
            "{} trace needs a basis",
            component.name()
        ))),
        (c, Some(b)) => feats
            .iter()
            .map(|f| {
                let s = split(f, b, k)?;
                Ok(if c == TraceComponent::Principal {
                    s.principal
                } else {
                    s.residual
                })
            })
            .collect(),
    }
}

/// Projects each step's flattened features onto the top two principal
/// directions of the centred stack of steps.
///
/// Directions the stack does not span contribute zero coordinates, so a
/// constant trajectory maps every step to the origin.
pub fn pca_trace(
    rec: &TrajectoryRecord,
    block: usize,
    basis: Option<&SpectralBasis>,
    k: Option<usize>,
    component: TraceComponent,
) -> Result<Vec<[f64; 2]>> {
    let t = rec.num_steps();
    if t < 3 {
        return Err(Error::TooFewSteps { needed: 3, got: t });
    }
    let series = component_series(rec, block, basis, k, component)?;
    let width = series[0].rows() * series[0].cols();
    let mut stack = DMatrix::<f64>::zeros(t, width);
    for (i, f) in series.iter().enumerate() {
        for (j, x) in f.as_matrix().iter().enumerate() {
            stack[(i, j)] = *x;
        }
    }
    let scale = stack.norm();
    let mean = stack.row_mean();
    for mut row in stack.row_iter_mut() {
        row -= &mean;
    }
    let mut points = vec![[0.0; 2]; t];
    // Centring a constant stack leaves only rounding noise.
    if stack.norm() <= 1e-12 * scale {
        return Ok(points);
    }
    // The T x T Gram matrix is cheaper than an SVD of the T x ND stack and
    // gives the same scores: G = S S^T = U diag(sigma^2) U^T.
    let gram = FeatureMatrix::new(&stack * stack.transpose())?;
    let svd = linalg::thin_svd(&gram)?;
    for c in 0..2.min(svd.effective_rank()) {
        let scale = svd.sigma[c].sqrt();
        for (i, p) in points.iter_mut().enumerate() {
            p[c] = svd.u[(i, c)] * scale;
        }
    }
    Ok(points)
}

/// Smoothness of one sequence of matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    /// `mean_t |X_{t+1} - X_t| / mean_t |X_t|`; 0 for an all-zero sequence.
    pub step_change: f64,
    /// `sum_t |X_{t+1} - X_t| / |X_last - X_0|`. 1 for a constant sequence,
    /// infinite for a closed loop.
    pub path_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessStats {
    pub whole: PathStats,
    pub principal: PathStats,
    pub residual: PathStats,
}

fn path_stats(series: &[FeatureMatrix]) -> Result<PathStats> {
    let steps: Vec<f64> = series
        .windows(2)
        .map(|w| w[1].sub(&w[0]).map(|d| linalg::frobenius_norm(&d)))
        .collect::<Result<_>>()?;
    let length: f64 = steps.iter().sum();
    let mean_norm = series.iter().map(linalg::frobenius_norm).sum::<f64>() / series.len() as f64;
    let step_change = if mean_norm > 0.0 {
        length / steps.len() as f64 / mean_norm
    } else {
        0.0
    };
    let displacement = linalg::frobenius_norm(&series[series.len() - 1].sub(&series[0])?);
    let path_ratio = if length == 0.0 {
        1.0
    } else if displacement == 0.0 {
        f64::INFINITY
    } else {
        length / displacement
    };
    Ok(PathStats {
        step_change,
        path_ratio,
    })
}

/// Path statistics of block `block` split against `basis` at rank `k`
/// (default `k_default`).
pub fn smoothness_stats(
    rec: &TrajectoryRecord,
    block: usize,
    basis: &SpectralBasis,
    k: Option<usize>,
) -> Result<SmoothnessStats> {
    if rec.num_steps() < 2 {
        return Err(Error::TooFewSteps {
            needed: 2,
            got: rec.num_steps(),
        });
    }
    let part = |c| component_series(rec, block, Some(basis), k, c).and_then(|s| path_stats(&s));
    Ok(SmoothnessStats {
        whole: part(TraceComponent::Whole)?,
        principal: part(TraceComponent::Principal)?,
        residual: part(TraceComponent::Residual)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_reference_basis, StepId};
    use crate::testutil::gaussian_matrix;
    use crate::trajectory::{synth_generate, Provenance, SynthConfig};

    fn record(steps: Vec<FeatureMatrix>) -> TrajectoryRecord {
        TrajectoryRecord::new(vec![steps], Provenance::Unknown).unwrap()
    }

    #[test]
    fn constant_trajectory() {
        let f = gaussian_matrix(5, 4, 1);
        let rec = record(vec![f.clone(); 6]);
        let pts = pca_trace(&rec, 0, None, None, TraceComponent::Whole).unwrap();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| *p == pts[0]));

        let basis = build_reference_basis(&f, 0.85, 0, StepId::Step(0), "").unwrap();
        let s = smoothness_stats(&rec, 0, &basis, None).unwrap();
        assert_eq!(s.whole.step_change, 0.0);
        assert_eq!(s.whole.path_ratio, 1.0);
    }

    #[test]
    fn straight_line_has_unit_path_ratio() {
        let a = gaussian_matrix(5, 4, 2);
        let g = gaussian_matrix(5, 4, 3);
        let steps = (0..7)
            .map(|t| a.lincomb(1.0, &g, t as f64).unwrap())
            .collect();
        let rec = record(steps);
        let basis = build_reference_basis(&a, 0.85, 0, StepId::Step(0), "").unwrap();
        let s = smoothness_stats(&rec, 0, &basis, None).unwrap();
        assert!((s.whole.path_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_steps() {
        let rec = record(vec![gaussian_matrix(3, 3, 4); 2]);
        assert!(matches!(
            pca_trace(&rec, 0, None, None, TraceComponent::Whole),
            Err(Error::TooFewSteps { .. })
        ));
    }

    /// Least-squares conic `a x^2 + b xy + c y^2 + d x + e y = 1` through the
    /// points; returns the largest absolute residual of the conic equation.
    fn conic_fit_residual(points: &[[f64; 2]]) -> f64 {
        let rows: Vec<[f64; 5]> = points
            .iter()
            .map(|&[x, y]| [x * x, x * y, y * y, x, y])
            .collect();
        let a = DMatrix::from_fn(rows.len(), 5, |i, j| rows[i][j]);
        let rhs = nalgebra::DVector::from_element(rows.len(), 1.0);
        let coef = a.clone().svd(true, true).solve(&rhs, 1e-14).unwrap();
        (a * coef - rhs).amax()
    }

    #[test]
    fn rotation_traces_an_ellipse() {
        let p = gaussian_matrix(6, 5, 10);
        let q = gaussian_matrix(6, 5, 11);
        let steps = (0..40)
            .map(|t| {
                let w = 0.13 * t as f64;
                p.lincomb(w.cos(), &q, 2.0 * w.sin()).unwrap()
            })
            .collect();
        let pts = pca_trace(&record(steps), 0, None, None, TraceComponent::Whole).unwrap();
        let radius = pts.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
        assert!(radius > 0.0);
        assert!(
            conic_fit_residual(&pts) <= 1e-6,
            "conic residual {}",
            conic_fit_residual(&pts)
        );
    }

    #[test]
    fn residual_is_rougher_than_principal() {
        let cfg = SynthConfig::default();
        let rec = synth_generate(&cfg).unwrap();
        let basis = build_reference_basis(rec.feature(0, 0).unwrap(), 0.85, 0, StepId::Step(0), "")
            .unwrap();
        let s = smoothness_stats(&rec, 0, &basis, None).unwrap();
        assert!(s.residual.path_ratio > s.principal.path_ratio, "{s:?}");
        assert!(s.residual.step_change > s.principal.step_change, "{s:?}");
    }
}
