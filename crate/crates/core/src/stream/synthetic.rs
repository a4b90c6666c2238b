//! Gaussian-mixture datasets with guaranteed mode separation.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::rng;

use super::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub modes: usize,
    pub dim: usize,
    pub n_per_mode: usize,
    #[serde(default)]
    pub n_test_per_mode: usize,
    pub separation: f64,
    /// Added to every coordinate of every mean.
    #[serde(default)]
    pub offset: f64,
    pub seed: u64,
}

/// Mode means with pairwise distance at least `separation`.
///
/// With `k ≤ d` the means are `(s/√2)·e_i` (all pairwise distances equal
/// `s`); otherwise they are the first `k` points of a cubic lattice of
/// spacing `s`.
pub fn mode_means(k: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if k == 0 || d == 0 {
        return Err(Error::Config(
            "synthetic mixture needs at least one mode and one dimension".into(),
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!(
            "mode separation must be finite and non-negative, got {separation}"
        )));
    }
    if k == 1 {
        return Ok(vec![vec![0.0; d]]);
    }
    if k <= d {
        let a = separation / std::f64::consts::SQRT_2;
        return Ok((0..k)
            .map(|i| (0..d).map(|j| if i == j { a } else { 0.0 }).collect())
            .collect());
    }
    let side = (1..)
        .find(|&g: &usize| (g as f64).powi(d as i32) >= k as f64)
        .expect("unbounded search");
    if (side as f64) * separation > 1e6 {
        return Err(Error::Config(format!(
            "cannot pack {k} modes {separation} apart in {d} dimensions within coordinate bound"
        )));
    }
    Ok((0..k)
        .map(|mut idx| {
            (0..d)
                .map(|_| {
                    let c = idx % side;
                    idx /= side;
                    c as f64 * separation
                })
                .collect()
        })
        .collect())
}

/// Samples `n_per_mode` points per mode with unit-diagonal covariance,
/// labels equal to the mode index, ordered by mode.
pub fn gen_synthetic(
    k_modes: usize,
    d: usize,
    n_per_mode: usize,
    mode_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    sample(
        &mode_means(k_modes, d, mode_separation)?,
        n_per_mode,
        0.0,
        seed,
    )
}

fn sample(means: &[Vec<f64>], n_per_mode: usize, offset: f64, seed: u64) -> Result<Dataset> {
    let d = means[0].len();
    let mut r = rng::stream_rng(seed, 0);
    let mut data = Vec::with_capacity(means.len() * n_per_mode * d);
    let mut labels = Vec::with_capacity(means.len() * n_per_mode);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..n_per_mode {
            for &m in mean {
                let e: f64 = StandardNormal.sample(&mut r);
                data.push(m + offset + e);
            }
            labels.push(label);
        }
    }
    Ok(Dataset {
        samples: DenseMatrix::from_vec(labels.len(), d, data)?,
        labels: Some(labels),
    })
}

impl SyntheticSpec {
    /// Train and test splits drawn from the same means with distinct seeds.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let means = mode_means(self.modes, self.dim, self.separation)?;
        let train = sample(
            &means,
            self.n_per_mode,
            self.offset,
            rng::derive_seed(self.seed, 1, 0),
        )?;
        let test = sample(
            &means,
            self.n_test_per_mode,
            self.offset,
            rng::derive_seed(self.seed, 1, 1),
        )?;
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::squared_distance;

    #[test]
    fn single_mode() {
        let ds = gen_synthetic(1, 3, 50, 5.0, 1).unwrap();
        assert!(ds.labels.unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn means_respect_separation() {
        for (k, d) in [(2, 2), (4, 2), (7, 3), (3, 8), (5, 1)] {
            let m = mode_means(k, d, 10.0).unwrap();
            for i in 0..k {
                for j in 0..i {
                    assert!(squared_distance(&m[i], &m[j]).sqrt() >= 10.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn empirical_class_means_are_separated() {
        let ds = gen_synthetic(2, 2, 2000, 10.0, 3).unwrap();
        let labels = ds.labels.clone().unwrap();
        let mean = |c: usize| {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == c).collect();
            ds.samples.select_rows(&idx).column_means()
        };
        // two means of 2000 unit-variance points: standard error ≈ 0.03 per axis
        let dist = squared_distance(&mean(0), &mean(1)).sqrt();
        assert!((dist - 10.0).abs() < 0.2, "{dist}");
    }

    #[test]
    fn seeded() {
        assert_eq!(
            gen_synthetic(3, 2, 10, 4.0, 9).unwrap().samples,
            gen_synthetic(3, 2, 10, 4.0, 9).unwrap().samples
        );
    }

    #[test]
    fn infeasible_configuration() {
        assert!(gen_synthetic(3, 0, 10, 1.0, 0).is_err());
        assert!(gen_synthetic(2, 2, 10, -1.0, 0).is_err());
        assert!(gen_synthetic(10_000, 1, 1, 1e3, 0).is_err());
    }
}
