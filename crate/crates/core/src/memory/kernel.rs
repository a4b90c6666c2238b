use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, squared_distance, DenseMatrix};

/// RBF kernel `exp(−‖a − b‖² / (2α²))`.
pub fn kernel_similarity(a: &[f64], b: &[f64], alpha: f64) -> f64 {
    rbf(squared_distance(a, b), alpha)
}

#[inline]
fn rbf(d2: f64, alpha: f64) -> f64 {
    // Keep entries strictly positive when exp underflows at large distances.
    (-d2 / (2.0 * alpha * alpha)).exp().max(f64::MIN_POSITIVE)
}

/// Kernel values between STM features (rows) and LTM features (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: DenseMatrix,
    pub alpha: f64,
}

/// Pairwise kernel matrix through `‖a‖² + ‖b‖² − 2a·b`.
///
/// Identical rows give exactly 1: both norms and the cross term come from
/// the same dot product, so the distance cancels to zero.
pub fn similarity_matrix(
    stm_features: &DenseMatrix,
    ltm_features: &DenseMatrix,
    alpha: f64,
) -> Result<SimilarityMatrix> {
    if stm_features.cols() != ltm_features.cols() {
        return Err(Error::dim(
            "similarity feature width",
            stm_features.cols(),
            ltm_features.cols(),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "kernel alpha must be positive, got {alpha}"
        )));
    }
    let ne: Vec<f64> = stm_features.row_iter().map(|r| dot(r, r)).collect();
    let nl: Vec<f64> = ltm_features.row_iter().map(|r| dot(r, r)).collect();
    let mut g = stm_features.matmul_transposed(ltm_features)?;
    for j in 0..g.rows() {
        for u in 0..g.cols() {
            let d2 = (ne[j] + nl[u] - 2.0 * g[(j, u)]).max(0.0);
            g[(j, u)] = rbf(d2, alpha);
        }
    }
    Ok(SimilarityMatrix { values: g, alpha })
}

/// Mean similarity of each STM sample to the LTM; `None` when the LTM is empty.
pub fn diversity_scores(s: &SimilarityMatrix) -> Option<Vec<f64>> {
    let n_l = s.values.cols();
    if n_l == 0 {
        return None;
    }
    Some(
        s.values
            .row_iter()
            .map(|r| r.iter().sum::<f64>() / n_l as f64)
            .collect(),
    )
}
