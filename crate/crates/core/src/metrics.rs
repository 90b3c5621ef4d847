//! Comparison metrics shared by run reports and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::engine::RunReport;
use crate::error::{Error, Result};
use crate::linalg::{self, FeatureMatrix};

/// Cosine similarity, magnitude similarity, and their product.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub cosine: f64,
    pub magnitude_ratio: f64,
    pub product: f64,
}

/// `cos(a, b) * min(|a|, |b|) / max(|a|, |b|)`.
///
/// Two zero vectors are identical (product 1). A zero paired with a nonzero
/// vector scores 0.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<SimilarityScore> {
    if a.len() != b.len() {
        return Err(Error::shape(
            format!("length {}", a.len()),
            format!("length {}", b.len()),
        ));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return Ok(SimilarityScore {
            cosine: 1.0,
            magnitude_ratio: 1.0,
            product: 1.0,
        });
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(SimilarityScore {
            cosine: 0.0,
            magnitude_ratio: 0.0,
            product: 0.0,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cosine = (dot / (na * nb)).clamp(-1.0, 1.0);
    let magnitude_ratio = na.min(nb) / na.max(nb);
    Ok(SimilarityScore {
        cosine,
        magnitude_ratio,
        product: cosine * magnitude_ratio,
    })
}

pub fn feature_similarity(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<SimilarityScore> {
    linalg::check_same_shape(a, b)?;
    similarity(a.as_matrix().as_slice(), b.as_matrix().as_slice())
}

/// `||part||_F^2 / ||whole||_F^2`.
pub fn energy_fraction(part: &FeatureMatrix, whole: &FeatureMatrix) -> Result<f64> {
    linalg::check_same_shape(part, whole)?;
    let denom = linalg::frobenius_norm(whole).powi(2);
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(linalg::frobenius_norm(part).powi(2) / denom)
}

/// Aggregates over the predicted (non-compute) rows of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_rel_error: f64,
    pub max_rel_error: f64,
    pub mean_similarity: f64,
    pub compute_fraction: f64,
    pub theoretical_speedup: f64,
    pub predicted_rows: usize,
}

/// Error and similarity statistics over predicted rows; compute rows only
/// enter the compute fraction. A report without predictions has zero error
/// and unit similarity.
pub fn run_summary(report: &RunReport) -> Result<RunSummary> {
    if report.rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    let predicted: Vec<_> = report.rows.iter().filter(|r| !r.is_compute).collect();
    let n = predicted.len();
    let (mean_rel_error, max_rel_error, mean_similarity) = if n == 0 {
        (0.0, 0.0, 1.0)
    } else {
        let mean_err = predicted.iter().map(|r| r.rel_error).sum::<f64>() / n as f64;
        let max_err = predicted.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        let mean_sim = predicted.iter().map(|r| r.similarity).sum::<f64>() / n as f64;
        (mean_err, max_err, mean_sim)
    };
    let computes = report.compute_steps.len();
    Ok(RunSummary {
        mean_rel_error,
        max_rel_error,
        mean_similarity,
        compute_fraction: computes as f64 / report.total_steps as f64,
        theoretical_speedup: report.total_steps as f64 / computes as f64,
        predicted_rows: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_reference_basis, split, StepId};
    use crate::testutil::gaussian_matrix;
    use approx::assert_relative_eq;

    #[test]
    fn similarity_hand_cases() {
        let a = [1.0, -2.0, 3.0];
        let s = similarity(&a, &a).unwrap();
        assert_relative_eq!(s.product, 1.0, epsilon = 1e-15);

        let two_a: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let s = similarity(&a, &two_a).unwrap();
        assert_relative_eq!(s.cosine, 1.0, epsilon = 1e-15);
        assert_relative_eq!(s.magnitude_ratio, 0.5, epsilon = 1e-15);
        assert_relative_eq!(s.product, 0.5, epsilon = 1e-15);

        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_relative_eq!(similarity(&a, &neg).unwrap().product, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn similarity_degenerate_inputs() {
        assert_eq!(similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap().product, 1.0);
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap().product, 0.0);
        assert!(matches!(
            similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn energy_fraction_cases() {
        let w = gaussian_matrix(5, 4, 1);
        assert_relative_eq!(energy_fraction(&w, &w).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(
            energy_fraction(&FeatureMatrix::zeros(5, 4), &w).unwrap(),
            0.0
        );
        assert!(matches!(
            energy_fraction(&w, &FeatureMatrix::zeros(5, 4)),
            Err(Error::ZeroReference)
        ));
    }

    #[test]
    fn principal_energy_matches_spectrum() {
        let f = gaussian_matrix(30, 20, 8);
        let basis = build_reference_basis(&f, 0.85, 0, StepId::Step(0), "s").unwrap();
        let s = split(&f, &basis, None).unwrap();
        let total: f64 = basis.sigma.iter().map(|x| x * x).sum();
        let head: f64 = basis.sigma[..s.k].iter().map(|x| x * x).sum();
        let got = energy_fraction(&s.principal, &f).unwrap();
        assert!((got - head / total).abs() < 1e-8);
        let rest = energy_fraction(&s.residual, &f).unwrap();
        assert!((got + rest - 1.0).abs() < 1e-8);
    }
}
