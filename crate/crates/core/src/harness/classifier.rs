use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Activation, AdamConfig, AdamState, DenseMatrix, MlpParams};
use crate::rng::Rng64;

/// MLP with tanh hidden layers and a softmax output trained by cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub net: MlpParams,
    pub optimizer: AdamState,
    pub classes: usize,
}

impl Classifier {
    pub fn new(
        input: usize,
        hidden: &[usize],
        classes: usize,
        adam: AdamConfig,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(
                "classifier needs at least two classes".into(),
            ));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        let net = MlpParams::init(&sizes, &acts, rng)?;
        Ok(Self {
            optimizer: AdamState::new(&net, adam),
            net,
            classes,
        })
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.net.predict(x)
    }

    /// Activations of the last hidden layer.
    pub fn features(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let acts = self.net.activations(x)?;
        Ok(acts[acts.len() - 2].clone())
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        Ok(l.row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                    )
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &DenseMatrix, labels: &[usize]) -> Result<f64> {
        if labels.len() != x.rows() {
            return Err(Error::dim("accuracy labels", x.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let p = self.predict(x)?;
        Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    /// Mean cross-entropy and its parameter gradient.
    pub fn loss_and_grads(&self, x: &DenseMatrix, labels: &[usize]) -> Result<(f64, MlpParams)> {
        if labels.len() != x.rows() {
            return Err(Error::dim("classifier labels", x.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Input(format!(
                "label {bad} outside {} classes",
                self.classes
            )));
        }
        let (logits, cache) = self.net.forward(x)?;
        let n = x.rows() as f64;
        let mut g = DenseMatrix::zeros(logits.rows(), logits.cols());
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let lse = log_sum_exp(row);
            loss += (lse - row[y]) / n;
            for (k, gv) in g.row_mut(i).iter_mut().enumerate() {
                *gv = ((row[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) / n;
            }
        }
        let (grads, _) = self.net.backward(&cache, &g)?;
        Ok((loss, grads))
    }

    pub fn train_step(&mut self, x: &DenseMatrix, labels: &[usize]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(x, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss {loss}")));
        }
        self.optimizer.step(&mut self.net, &grads)?;
        Ok(loss)
    }

    pub fn digest(&self) -> String {
        self.net.digest()
    }
}
