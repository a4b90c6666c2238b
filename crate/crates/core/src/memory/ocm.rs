use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{BufferKind, MemoryBuffer};
use super::kernel::{diversity_scores, similarity_matrix, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::rng::Rng64;
use crate::stream::StreamBatch;

/// Which side of the threshold moves a sample into the LTM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferDirection {
    /// Transfer iff mean similarity ≤ λ, and never an exact feature duplicate.
    #[default]
    KeepDissimilar,
    /// Transfer iff mean similarity > λ.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct OcmConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub stm_capacity: usize,
    pub direction: TransferDirection,
    pub ltm_cap: Option<usize>,
}

impl Default for OcmConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            alpha: 10.0,
            stm_capacity: 64,
            direction: TransferDirection::KeepDissimilar,
            ltm_cap: None,
        }
    }
}

impl OcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "memory.alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("memory.lambda must be finite".into()));
        }
        if self.stm_capacity == 0 {
            return Err(Error::Config("memory.stm_capacity must be positive".into()));
        }
        if self.ltm_cap == Some(0) {
            return Err(Error::Config(
                "memory.ltm_cap must be positive when set".into(),
            ));
        }
        Ok(())
    }
}

/// Appends the batch to the STM; returns whether the STM reached capacity.
pub fn stm_append(stm: &mut MemoryBuffer, batch: &StreamBatch) -> Result<bool> {
    stm.push_batch(batch)?;
    let cap = stm
        .capacity()
        .ok_or_else(|| Error::Config("short-term memory needs a capacity".into()))?;
    Ok(stm.len() >= cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    /// STM positions moved to the LTM, in STM order.
    pub moved: Vec<usize>,
    pub bootstrap: bool,
}

impl Transfer {
    pub fn count(&self) -> usize {
        self.moved.len()
    }
}

/// Moves selected STM samples into the LTM and empties the STM.
///
/// With an empty LTM every STM sample moves. Otherwise `scores` (one per
/// STM row) are compared against `lambda` in the given direction. In the
/// default direction a sample whose feature row coincides with an LTM row,
/// or with a row already accepted in this call, stays out.
pub fn select_transfer(
    stm: &mut MemoryBuffer,
    ltm: &mut MemoryBuffer,
    stm_features: &DenseMatrix,
    similarity: Option<&SimilarityMatrix>,
    lambda: f64,
    direction: TransferDirection,
) -> Result<Transfer> {
    if stm_features.rows() != stm.len() {
        return Err(Error::dim("stm features", stm.len(), stm_features.rows()));
    }
    let bootstrap = ltm.is_empty();
    let moved: Vec<usize> = if bootstrap {
        (0..stm.len()).collect()
    } else {
        let s = similarity
            .ok_or_else(|| Error::Internal("similarity matrix missing for non-empty LTM".into()))?;
        if s.values.rows() != stm.len() || s.values.cols() != ltm.len() {
            return Err(Error::dim(
                "similarity matrix shape",
                stm.len() * ltm.len(),
                s.values.rows() * s.values.cols(),
            ));
        }
        let scores = diversity_scores(s).expect("non-empty LTM");
        let mut accepted: Vec<usize> = Vec::new();
        for (j, &r) in scores.iter().enumerate() {
            let take = match direction {
                TransferDirection::Literal => r > lambda,
                TransferDirection::KeepDissimilar => {
                    r <= lambda
                        && !s.values.row(j).contains(&1.0)
                        && !accepted
                            .iter()
                            .any(|&a| stm_features.row(a) == stm_features.row(j))
                }
            };
            if take {
                accepted.push(j);
            }
        }
        accepted
    };
    for &j in &moved {
        ltm.push_from(stm, j)?;
    }
    stm.clear();
    Ok(Transfer { moved, bootstrap })
}

/// Evicts, one at a time, the LTM sample with the highest mean similarity
/// to the rest of the LTM until it holds at most `cap` samples. Returns the
/// evicted positions (relative to the buffer as it was at each eviction).
pub fn enforce_ltm_cap(
    ltm: &mut MemoryBuffer,
    ltm_features: &DenseMatrix,
    alpha: f64,
    cap: usize,
) -> Result<Vec<usize>> {
    if ltm.len() <= cap {
        return Ok(Vec::new());
    }
    if ltm_features.rows() != ltm.len() {
        return Err(Error::dim("ltm features", ltm.len(), ltm_features.rows()));
    }
    let s = similarity_matrix(ltm_features, ltm_features, alpha)?.values;
    let mut alive: Vec<usize> = (0..ltm.len()).collect();
    let mut sums: Vec<f64> = (0..ltm.len())
        .map(|i| s.row(i).iter().sum::<f64>() - s[(i, i)])
        .collect();
    let mut evicted = Vec::new();
    while alive.len() > cap {
        let (pos, _) = alive
            .iter()
            .enumerate()
            .max_by(|a, b| sums[*a.1].total_cmp(&sums[*b.1]))
            .expect("non-empty");
        let victim = alive.remove(pos);
        for &k in &alive {
            sums[k] -= s[(k, victim)];
        }
        ltm.remove(pos);
        evicted.push(pos);
    }
    Ok(evicted)
}

/// `⌈size/2⌉` draws from the STM and `⌊size/2⌋` from the LTM, uniform with
/// replacement; all from the STM while the LTM is empty.
pub fn training_minibatch(
    stm: &MemoryBuffer,
    ltm: &MemoryBuffer,
    size: usize,
    rng: &mut Rng64,
) -> Result<StreamBatch> {
    if stm.is_empty() {
        return Err(Error::Internal(
            "training minibatch requested from an empty STM".into(),
        ));
    }
    let from_ltm = if ltm.is_empty() { 0 } else { size / 2 };
    let from_stm = size - from_ltm;
    let mut data = Vec::with_capacity(size * stm.dim());
    let mut labels = Vec::with_capacity(size);
    let mut last_step = 0;
    for (buf, n) in [(stm, from_stm), (ltm, from_ltm)] {
        for _ in 0..n {
            let i = rng.random_range(0..buf.len());
            data.extend_from_slice(buf.row(i));
            labels.push(buf.label_of(i));
            last_step = last_step.max(buf.step_of(i));
        }
    }
    let labels = labels.into_iter().collect::<Option<Vec<usize>>>();
    Ok(StreamBatch::new(
        DenseMatrix::from_vec(size, stm.dim(), data)?,
        last_step,
        labels,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub scores: Option<Vec<f64>>,
    pub transferred: usize,
    pub evicted: usize,
    pub bootstrap: bool,
}

/// Short- and long-term memory pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcmMemory {
    pub config: OcmConfig,
    pub stm: MemoryBuffer,
    pub ltm: MemoryBuffer,
}

impl OcmMemory {
    pub fn new(config: OcmConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            stm: MemoryBuffer::new(BufferKind::Stm, dim, Some(config.stm_capacity)),
            ltm: MemoryBuffer::new(BufferKind::Ltm, dim, config.ltm_cap),
            config,
        })
    }

    /// Learning-stage append; `true` means evaluation and selection are due.
    pub fn observe(&mut self, batch: &StreamBatch) -> Result<bool> {
        stm_append(&mut self.stm, batch)
    }

    /// Joint memory `STM ∪ LTM` as one matrix (STM first).
    pub fn joint_samples(&self) -> Result<DenseMatrix> {
        self.stm.samples().vstack(&self.ltm.samples())
    }

    /// Evaluation and selection given current features of both memories.
    pub fn select(
        &mut self,
        stm_features: &DenseMatrix,
        ltm_features: &DenseMatrix,
    ) -> Result<SelectionOutcome> {
        if ltm_features.rows() != self.ltm.len() {
            return Err(Error::dim(
                "ltm features",
                self.ltm.len(),
                ltm_features.rows(),
            ));
        }
        let sim = if self.ltm.is_empty() {
            None
        } else {
            Some(similarity_matrix(
                stm_features,
                ltm_features,
                self.config.alpha,
            )?)
        };
        let scores = sim.as_ref().and_then(diversity_scores);
        let transfer = select_transfer(
            &mut self.stm,
            &mut self.ltm,
            stm_features,
            sim.as_ref(),
            self.config.lambda,
            self.config.direction,
        )?;
        let mut evicted = 0;
        if let Some(cap) = self.config.ltm_cap {
            if self.ltm.len() > cap {
                let moved = stm_features.select_rows(&transfer.moved);
                let feats = ltm_features.vstack(&moved)?;
                evicted = enforce_ltm_cap(&mut self.ltm, &feats, self.config.alpha, cap)?.len();
            }
        }
        Ok(SelectionOutcome {
            scores,
            transferred: transfer.count(),
            evicted,
            bootstrap: transfer.bootstrap,
        })
    }

    pub fn clear(&mut self) {
        self.stm.clear();
        self.ltm.clear();
    }
}
