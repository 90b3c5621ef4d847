use crate::linalg::FeatureMatrix;
use crate::rng;

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    rng::gaussian_features(&mut rng::seeded(seed), rows, cols)
}
