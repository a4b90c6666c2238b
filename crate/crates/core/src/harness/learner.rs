use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use crate::error::{Error, Result};
use crate::expansion::MixtureModel;
use crate::numerics::{squared_distance, DenseMatrix};
use crate::rng::{self, Rng64};
use crate::stream::{LabelAccess, StreamBatch};
use crate::vae::{KlMode, Objective, VaeComponent, VaeView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learner {
    Single(VaeComponent),
    Mixture(MixtureModel),
    Classifier(Classifier),
}

const EVAL_CHUNK: usize = 50;

impl Learner {
    pub fn is_generative(&self) -> bool {
        !matches!(self, Learner::Classifier(_))
    }

    pub fn latent_dim(&self) -> Option<usize> {
        match self {
            Learner::Single(c) => Some(c.latent_dim()),
            Learner::Mixture(m) => Some(m.latent_dim()),
            Learner::Classifier(_) => None,
        }
    }

    pub fn component_count(&self) -> usize {
        match self {
            Learner::Mixture(m) => m.component_count(),
            _ => 1,
        }
    }

    /// Views of every generative component, in creation order.
    pub fn views(&self) -> Vec<VaeView<'_>> {
        match self {
            Learner::Single(c) => vec![c.view()],
            Learner::Mixture(m) => (0..m.component_count())
                .map(|i| m.component_view(i).expect("in range"))
                .collect(),
            Learner::Classifier(_) => Vec::new(),
        }
    }

    /// Selection features: encoder means (concatenated over components) or
    /// the classifier's last hidden layer.
    pub fn features(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            Learner::Single(c) => c.feature_extract(x),
            Learner::Mixture(m) => m.augmented_features(x),
            Learner::Classifier(c) => c.features(x),
        }
    }

    /// Negative closed-form ELBO averaged over components and rows.
    pub fn memory_loss(&self, x: &DenseMatrix, noise: &DenseMatrix) -> Result<f64> {
        match self {
            Learner::Single(c) => {
                if x.rows() == 0 {
                    return Err(Error::Input(
                        "loss over an empty memory is undefined".into(),
                    ));
                }
                let total: f64 = c.elbo_rows(x, noise, KlMode::ClosedForm)?.iter().sum();
                Ok(-total / (1.0 * x.rows() as f64))
            }
            Learner::Mixture(m) => m.mixture_loss_r(x, noise),
            Learner::Classifier(_) => Err(Error::Internal(
                "memory loss is defined for generative learners".into(),
            )),
        }
    }

    pub fn train_step(
        &mut self,
        batch: &StreamBatch,
        objective: Objective,
        rng: &mut Rng64,
    ) -> Result<f64> {
        match self {
            Learner::Single(c) => c.train_step(batch.samples(), objective, rng),
            Learner::Mixture(m) => m.train_step(batch.samples(), objective, rng),
            Learner::Classifier(c) => {
                let labels = batch.labels(LabelAccess::supervised()).ok_or_else(|| {
                    Error::Config("classifier training needs labeled samples".into())
                })?;
                c.train_step(batch.samples(), labels)
            }
        }
    }

    /// Per-row ELBO, taking the best component for a mixture.
    pub fn elbo_rows(&self, x: &DenseMatrix, noise: &DenseMatrix) -> Result<Vec<f64>> {
        best_over(self.views(), |v| v.elbo_rows(x, noise, KlMode::ClosedForm))
    }

    /// Memory each generative component converged on: freeze-time
    /// snapshots for frozen mixture components, `live` otherwise.
    pub fn component_memories(&self, live: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        match self {
            Learner::Mixture(m) => (0..m.component_count())
                .map(|i| m.memory_for(i, live))
                .collect(),
            Learner::Single(_) => Ok(vec![live.clone()]),
            Learner::Classifier(_) => Err(Error::Config(
                "a classifier has no generative components".into(),
            )),
        }
    }

    pub fn digests(&self) -> Vec<String> {
        match self {
            Learner::Single(c) => vec![c.digest()],
            Learner::Mixture(m) => m.digests(),
            Learner::Classifier(c) => vec![c.digest()],
        }
    }
}

fn best_over<'a, F>(views: Vec<VaeView<'a>>, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&VaeView<'a>) -> Result<Vec<f64>>,
{
    if views.is_empty() {
        return Err(Error::Internal(
            "no generative component to evaluate".into(),
        ));
    }
    let mut best = f(&views[0])?;
    for v in &views[1..] {
        for (b, s) in best.iter_mut().zip(f(v)?) {
            if s > *b {
                *b = s;
            }
        }
    }
    Ok(best)
}

/// Mean IWAE(m) log-likelihood estimate in nats (higher is better). A
/// mixture scores each sample with its best component.
pub fn evaluate_nll(learner: &Learner, test: &DenseMatrix, m: usize, seed: u64) -> Result<f64> {
    if m == 0 {
        return Err(Error::Config(
            "importance sample count must be at least 1".into(),
        ));
    }
    if test.rows() == 0 {
        return Err(Error::Input("empty test set".into()));
    }
    let dz = learner
        .latent_dim()
        .ok_or_else(|| Error::Config("log-likelihood needs a generative learner".into()))?;
    let views = learner.views();
    let mut total = 0.0;
    for (chunk, start) in (0..test.rows()).step_by(EVAL_CHUNK).enumerate() {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(test.rows())).collect();
        let x = test.select_rows(&idx);
        let mut r = rng::stream_rng(rng::derive_seed(seed, 0xE7A1, chunk as u64), 0);
        let noise = rng::standard_normal(&mut r, x.rows() * m, dz);
        total += best_over(views.clone(), |v| v.iwae_rows(&x, &noise))?
            .iter()
            .sum::<f64>();
    }
    Ok(total / test.rows() as f64)
}

/// Mean `‖x − G*(μ(x))‖²`; a mixture uses the best-reconstructing component.
pub fn evaluate_reconstruction(learner: &Learner, test: &DenseMatrix) -> Result<f64> {
    if test.rows() == 0 {
        return Err(Error::Input("empty test set".into()));
    }
    let views = learner.views();
    if views.is_empty() {
        return Err(Error::Config(
            "reconstruction needs a generative learner".into(),
        ));
    }
    let mut best = vec![f64::INFINITY; test.rows()];
    for v in &views {
        let g = v.decode_mean(&v.features(test)?)?;
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(squared_distance(test.row(i), g.row(i)));
        }
    }
    Ok(best.iter().sum::<f64>() / test.rows() as f64)
}
