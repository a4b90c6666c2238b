//! Task-free data streams: ingestion, class-incremental and cross-domain
//! construction, batching and binarization.
//!
//! Batches carry labels behind [`LabelAccess`]; unsupervised code only ever
//! sees samples and the step index.

mod delimited;
mod idx;
mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::rng;

pub use synthetic::{gen_synthetic, mode_means, SyntheticSpec};

pub mod formats {
    pub use super::delimited::{
        parse as parse_delimited, read as read_delimited, write as write_delimited,
    };
    pub use super::idx::{
        encode_images, encode_labels, parse_images, parse_labels, read_images, read_labels,
        IMAGES_MAGIC, LABELS_MAGIC,
    };
}

/// Samples with optional integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: DenseMatrix,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone().unwrap_or_default();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Rows belonging to one class, in dataset order.
    pub fn class_rows(&self, class: usize) -> Vec<usize> {
        match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] == class).collect(),
            None => Vec::new(),
        }
    }

    fn check_values(&self) -> Result<()> {
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::dim("dataset labels", self.len(), l.len()));
            }
        }
        if !self.samples.is_finite() {
            return Err(Error::Input("dataset contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Value scaling applied to delimited tables at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Global min–max of the training split, applied to both splits and clamped.
    #[default]
    MinMax,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DatasetDescriptor {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Keep only these classes (all when absent).
        #[serde(default)]
        classes: Option<Vec<usize>>,
        /// Cap on training samples per class, taken in file order.
        #[serde(default)]
        max_per_class: Option<usize>,
    },
    Delimited {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        scaling: Scaling,
    },
    Synthetic(SyntheticSpec),
}

/// Loads `(train, test)` splits.
pub fn load_dataset(descriptor: &DatasetDescriptor) -> Result<(Dataset, Dataset)> {
    let (train, test) = match descriptor {
        DatasetDescriptor::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
            max_per_class,
        } => {
            let read_pair = |img: &PathBuf, lab: &PathBuf| -> Result<Dataset> {
                let samples = idx::read_images(img)?;
                let labels = idx::read_labels(lab)?;
                if labels.len() != samples.rows() {
                    return Err(Error::Ingestion {
                        offset: 4,
                        message: format!("{} labels for {} images", labels.len(), samples.rows()),
                    });
                }
                Ok(Dataset {
                    samples,
                    labels: Some(labels),
                })
            };
            let train = read_pair(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => read_pair(i, l)?,
                (None, None) => Dataset {
                    samples: DenseMatrix::zeros(0, train.dim()),
                    labels: Some(Vec::new()),
                },
                _ => {
                    return Err(Error::Config(
                        "idx test split needs both images and labels".into(),
                    ))
                }
            };
            let filter = |ds: Dataset, cap: Option<usize>| -> Dataset {
                let labels = ds.labels.clone().unwrap_or_default();
                let mut counts = std::collections::HashMap::new();
                let keep: Vec<usize> = (0..ds.len())
                    .filter(|&i| classes.as_ref().is_none_or(|c| c.contains(&labels[i])))
                    .filter(|&i| {
                        let c = counts.entry(labels[i]).or_insert(0usize);
                        *c += 1;
                        cap.is_none_or(|m| *c <= m)
                    })
                    .collect();
                ds.subset(&keep)
            };
            (filter(train, *max_per_class), filter(test, None))
        }
        DatasetDescriptor::Delimited {
            train,
            test,
            scaling,
        } => {
            let mut tr = delimited::read(train)?;
            let mut te = match test {
                Some(p) => delimited::read(p)?,
                None => Dataset {
                    samples: DenseMatrix::zeros(0, tr.dim()),
                    labels: tr.labels.as_ref().map(|_| Vec::new()),
                },
            };
            if te.dim() != tr.dim() && !te.is_empty() {
                return Err(Error::dim("delimited test width", tr.dim(), te.dim()));
            }
            if *scaling == Scaling::MinMax {
                let lo = tr
                    .samples
                    .as_slice()
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                let hi = tr
                    .samples
                    .as_slice()
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let span = if hi > lo { hi - lo } else { 1.0 };
                for ds in [&mut tr, &mut te] {
                    ds.samples = ds.samples.map(|v| ((v - lo) / span).clamp(0.0, 1.0));
                }
            }
            (tr, te)
        }
        DatasetDescriptor::Synthetic(spec) => spec.generate()?,
    };
    train.check_values()?;
    test.check_values()?;
    Ok((train, test))
}

/// Learner-facing batch. Labels are only reachable through [`LabelAccess`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamBatch {
    samples: DenseMatrix,
    step_index: u64,
    labels: Option<Vec<usize>>,
}

/// Capability required to read labels; held by supervised and evaluation code.
#[derive(Debug, Clone, Copy)]
pub struct LabelAccess(());

impl LabelAccess {
    pub fn supervised() -> Self {
        LabelAccess(())
    }
}

impl StreamBatch {
    pub fn new(samples: DenseMatrix, step_index: u64, labels: Option<Vec<usize>>) -> Self {
        Self {
            samples,
            step_index,
            labels,
        }
    }

    pub fn samples(&self) -> &DenseMatrix {
        &self.samples
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self, _access: LabelAccess) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Same batch with labels removed.
    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }
}

/// An ordered, single-pass sequence of batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    batches: Vec<StreamBatch>,
    dim: usize,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batches(&self) -> &[StreamBatch] {
        &self.batches
    }

    pub fn total_samples(&self) -> usize {
        self.batches.iter().map(StreamBatch::len).sum()
    }

    pub fn strip_labels(self) -> Self {
        Self {
            batches: self
                .batches
                .into_iter()
                .map(StreamBatch::without_labels)
                .collect(),
            dim: self.dim,
        }
    }
}

fn batch_rows(
    samples: &DenseMatrix,
    labels: Option<&[usize]>,
    order: &[usize],
    batch_size: usize,
) -> Stream {
    let batches = order
        .chunks(batch_size)
        .enumerate()
        .map(|(t, idx)| StreamBatch {
            samples: samples.select_rows(idx),
            step_index: t as u64,
            labels: labels.map(|l| idx.iter().map(|&i| l[i]).collect()),
        })
        .collect();
    Stream {
        batches,
        dim: samples.cols(),
    }
}

/// Orders samples class by class (`class_order`, or ascending labels), with
/// a seeded shuffle inside each class, then cuts batches.
pub fn build_class_incremental(
    dataset: &Dataset,
    class_order: Option<&[usize]>,
    batch_size: usize,
    seed: u64,
) -> Result<Stream> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let labels = dataset
        .labels
        .as_deref()
        .ok_or_else(|| Error::Config("class-incremental stream needs labels".into()))?;
    let present = dataset.classes();
    let order: Vec<usize> = match class_order {
        Some(o) => {
            if let Some(c) = o.iter().find(|c| !present.contains(c)) {
                return Err(Error::Config(format!(
                    "class order references absent class {c}"
                )));
            }
            o.to_vec()
        }
        None => present.clone(),
    };
    let mut r = rng::stream_rng(seed, 11);
    let mut rows = Vec::with_capacity(dataset.len());
    for &c in &order {
        let mut idx = dataset.class_rows(c);
        idx.shuffle(&mut r);
        rows.extend(idx);
    }
    Ok(batch_rows(
        &dataset.samples,
        Some(labels),
        &rows,
        batch_size,
    ))
}

/// Seeded shuffle of the whole dataset with no class sorting.
pub fn build_unsorted(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Stream> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rows: Vec<usize> = (0..dataset.len()).collect();
    rows.shuffle(&mut rng::stream_rng(seed, 12));
    Ok(batch_rows(
        &dataset.samples,
        dataset.labels.as_deref(),
        &rows,
        batch_size,
    ))
}

/// Concatenates streams in order and renumbers step indices globally.
pub fn build_cross_domain(streams: Vec<Stream>) -> Result<Stream> {
    let dim = streams.first().map_or(0, |s| s.dim);
    let mut batches = Vec::new();
    for s in streams {
        if s.dim != dim {
            return Err(Error::dim("cross-domain source dimension", dim, s.dim));
        }
        batches.extend(s.batches);
    }
    for (t, b) in batches.iter_mut().enumerate() {
        b.step_index = t as u64;
    }
    Ok(Stream { batches, dim })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BinarizeMode {
    #[default]
    Off,
    Threshold,
    Stochastic,
}

/// Binarizes `[0, 1]` intensities. Stochastic draws use a seed derived from
/// `(seed, step_index)`, so re-delivery of the same step is reproducible.
pub fn binarize(batch: &StreamBatch, mode: BinarizeMode, seed: u64) -> StreamBatch {
    let samples = match mode {
        BinarizeMode::Off => batch.samples.clone(),
        BinarizeMode::Threshold => batch.samples.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        BinarizeMode::Stochastic => binarize_matrix(&batch.samples, seed, batch.step_index),
    };
    StreamBatch {
        samples,
        step_index: batch.step_index,
        labels: batch.labels.clone(),
    }
}

pub fn binarize_matrix(samples: &DenseMatrix, seed: u64, step_index: u64) -> DenseMatrix {
    let mut r = rng::stream_rng(rng::derive_seed(seed, 0xB1, step_index), 0);
    let data = samples
        .as_slice()
        .iter()
        .map(|&v| if r.random::<f64>() < v { 1.0 } else { 0.0 })
        .collect();
    DenseMatrix::from_vec(samples.rows(), samples.cols(), data).expect("same shape")
}

/// Where a source's batches come from and whether they are class-sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub dataset: DatasetDescriptor,
    #[serde(default = "default_sorted")]
    pub sorted: bool,
    #[serde(default)]
    pub class_order: Option<Vec<usize>>,
}

fn default_sorted() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub sources: Vec<SourceSpec>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub binarize: BinarizeMode,
}

fn default_batch() -> usize {
    10
}

/// A built stream plus the concatenated test split of all sources.
#[derive(Debug, Clone)]
pub struct StreamData {
    pub stream: Stream,
    pub test: Dataset,
}

impl StreamSpec {
    /// Builds the full stream; a pure function of `(self, seed)`.
    pub fn build(&self, seed: u64) -> Result<StreamData> {
        if self.sources.is_empty() {
            return Err(Error::Config("stream needs at least one source".into()));
        }
        let mut streams = Vec::new();
        let mut test: Option<Dataset> = None;
        for (i, src) in self.sources.iter().enumerate() {
            let (train, te) = load_dataset(&src.dataset)?;
            let s = rng::derive_seed(seed, 0x57, i as u64);
            streams.push(if src.sorted {
                build_class_incremental(&train, src.class_order.as_deref(), self.batch_size, s)?
            } else {
                build_unsorted(&train, self.batch_size, s)?
            });
            test = Some(match test {
                None => te,
                Some(acc) => {
                    if acc.dim() != te.dim() {
                        return Err(Error::dim(
                            "cross-domain source dimension",
                            acc.dim(),
                            te.dim(),
                        ));
                    }
                    Dataset {
                        samples: acc.samples.vstack(&te.samples)?,
                        labels: match (acc.labels, te.labels) {
                            (Some(mut a), Some(b)) => {
                                a.extend(b);
                                Some(a)
                            }
                            _ => None,
                        },
                    }
                }
            });
        }
        let mut test = test.expect("at least one source");
        if self.binarize != BinarizeMode::Off {
            test.samples = match self.binarize {
                BinarizeMode::Threshold => test.samples.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
                _ => binarize_matrix(&test.samples, seed, u64::MAX),
            };
        }
        Ok(StreamData {
            stream: build_cross_domain(streams)?,
            test,
        })
    }
}
