use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{Checkpoint, MemoryState, RngStates, Window, FORMAT_VERSION};
use super::classifier::Classifier;
use super::config::{ExperimentConfig, LearnerKind, MemoryConfig};
use super::diag::{diagnostics, matrix_digest, split_targets, target_mixture};
use super::learner::{evaluate_nll, evaluate_reconstruction, Learner};
use super::metrics::{summary_csv, to_ndjson, write_text, EvalRecord, FinalRecord, Record};
use crate::error::{Error, Result};
use crate::expansion::MixtureModel;
use crate::memory::{
    baseline_update, training_minibatch, BaselinePolicy, BufferKind, MemoryBuffer, OcmMemory,
};
use crate::ot::{exact_w2, EmpiricalDistribution};
use crate::rng::{self, Rng64, RngState};
use crate::stream::{binarize, BinarizeMode, Dataset, LabelAccess, StreamBatch, StreamData};
use crate::vae::VaeComponent;

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const BASELINE_STREAM: u64 = 2;
const LOSS_STREAM: u64 = 3;
const EXPANSION_STREAM: u64 = 4;
const EVAL_TAG: u64 = 0xE7;
const BINARIZE_TAG: u64 = 0xB1;

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMINGS_FILE: &str = "timings.ndjson";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<Record>,
    pub checkpoint: Checkpoint,
    /// Checkpoints written at evaluation points (when configured).
    pub checkpoints: Vec<Checkpoint>,
    pub output_dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn final_record(&self) -> Option<&FinalRecord> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Final(f) => Some(f),
            _ => None,
        })
    }

    pub fn eval_records(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Eval(e) => Some(e),
            _ => None,
        })
    }
}

/// Stage 1–3 experiment loop over a pre-built stream.
pub struct Runner {
    config: ExperimentConfig,
    data: StreamData,
    learner: Learner,
    memory: MemoryState,
    train_rng: Rng64,
    baseline_rng: Rng64,
    loss_rng: Rng64,
    expansion_rng: Rng64,
    cursor: usize,
    samples_seen: u64,
    cycles: u64,
    eval_points: u64,
    records_emitted: usize,
    memory_loss: Option<f64>,
    window: Window,
    records: Vec<Record>,
    checkpoints: Vec<Checkpoint>,
    last_good: Option<Checkpoint>,
    timings: Vec<(u64, f64)>,
    started: Instant,
}

fn class_count(config: &ExperimentConfig, data: &StreamData) -> Result<usize> {
    if let Some(k) = config.classifier.classes {
        return Ok(k);
    }
    let mut max = None::<usize>;
    for b in data.stream.batches() {
        let l = b
            .labels(LabelAccess::supervised())
            .ok_or_else(|| Error::Config("classifier learner needs a labeled stream".into()))?;
        max = l.iter().copied().chain(max).max();
    }
    if let Some(l) = &data.test.labels {
        max = l.iter().copied().chain(max).max();
    }
    Ok(max.map_or(0, |m| m + 1).max(2))
}

fn build_memory(config: &ExperimentConfig, dim: usize) -> Result<MemoryState> {
    Ok(match &config.memory {
        MemoryConfig::Ocm(c) => MemoryState::Ocm(OcmMemory::new(c.clone(), dim)?),
        MemoryConfig::RandomRemoval { capacity } => MemoryState::Baseline {
            buffer: MemoryBuffer::new(BufferKind::Baseline, dim, Some(*capacity)),
            policy: BaselinePolicy::RandomRemoval,
        },
        MemoryConfig::Reservoir { capacity } => MemoryState::Baseline {
            buffer: MemoryBuffer::new(BufferKind::Baseline, dim, Some(*capacity)),
            policy: BaselinePolicy::Reservoir,
        },
    })
}

fn build_data(config: &ExperimentConfig) -> Result<StreamData> {
    let mut data = config.stream.build(config.seed)?;
    if data.stream.is_empty() {
        return Err(Error::Config("stream.sources produced no batches".into()));
    }
    if config.learner == LearnerKind::Classifier {
        if data.stream.batches().iter().any(|b| !b.has_labels()) {
            return Err(Error::Config(
                "learner = \"classifier\" needs a labeled stream".into(),
            ));
        }
    } else {
        // The unsupervised path never sees labels.
        data.stream = data.stream.strip_labels();
    }
    Ok(data)
}

fn restore(state: &RngState) -> Result<Rng64> {
    state
        .restore()
        .ok_or_else(|| Error::Integrity("unreadable generator state".into()))
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = build_data(&config)?;
        let dim = data.stream.dim();
        let mut init = rng::stream_rng(config.seed, INIT_STREAM);
        let learner = match config.learner {
            LearnerKind::VaeSingle => Learner::Single(VaeComponent::new(
                &config.model.arch(dim),
                config.train.adam,
                &mut init,
            )?),
            LearnerKind::VaeMixture => {
                let mut m = MixtureModel::new(
                    &config.model.arch(dim),
                    config.train.adam,
                    config.expansion.k_max,
                    &mut init,
                )?;
                m.r_last_mode = config.expansion.r_last_mode;
                Learner::Mixture(m)
            }
            LearnerKind::Classifier => {
                let k = class_count(&config, &data)?;
                Learner::Classifier(Classifier::new(
                    dim,
                    &config.classifier.hidden,
                    k,
                    config.train.adam,
                    &mut init,
                )?)
            }
        };
        let memory = build_memory(&config, dim)?;
        let seed = config.seed;
        Ok(Self {
            data,
            learner,
            memory,
            train_rng: rng::stream_rng(seed, TRAIN_STREAM),
            baseline_rng: rng::stream_rng(seed, BASELINE_STREAM),
            loss_rng: rng::stream_rng(seed, LOSS_STREAM),
            expansion_rng: rng::stream_rng(seed, EXPANSION_STREAM),
            cursor: 0,
            samples_seen: 0,
            cycles: 0,
            eval_points: 0,
            records_emitted: 0,
            memory_loss: None,
            window: Window::default(),
            records: Vec::new(),
            checkpoints: Vec::new(),
            last_good: None,
            timings: Vec::new(),
            started: Instant::now(),
            config,
        })
    }

    /// Continues from a checkpoint; the stream is rebuilt from the echoed config.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let data = build_data(&ck.config)?;
        if ck.cursor > data.stream.len() {
            return Err(Error::Integrity(
                "checkpoint cursor is past the end of the stream".into(),
            ));
        }
        Ok(Self {
            train_rng: restore(&ck.rngs.train)?,
            baseline_rng: restore(&ck.rngs.baseline)?,
            loss_rng: restore(&ck.rngs.loss)?,
            expansion_rng: restore(&ck.rngs.expansion)?,
            data,
            learner: ck.learner.clone(),
            memory: ck.memory.clone(),
            cursor: ck.cursor,
            samples_seen: ck.samples_seen,
            cycles: ck.cycles,
            eval_points: ck.eval_points,
            records_emitted: ck.records_emitted,
            memory_loss: ck.memory_loss,
            window: ck.window.clone(),
            records: Vec::new(),
            checkpoints: Vec::new(),
            last_good: Some(ck.clone()),
            timings: Vec::new(),
            started: Instant::now(),
            config: ck.config,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn memory(&self) -> &MemoryState {
        &self.memory
    }

    pub fn data(&self) -> &StreamData {
        &self.data
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.data.stream.len()
    }

    /// Records produced by this runner (excluding any before a resume).
    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            learner: self.learner.clone(),
            memory: self.memory.clone(),
            rngs: RngStates {
                train: RngState::capture(&self.train_rng),
                baseline: RngState::capture(&self.baseline_rng),
                loss: RngState::capture(&self.loss_rng),
                expansion: RngState::capture(&self.expansion_rng),
            },
            cursor: self.cursor,
            samples_seen: self.samples_seen,
            cycles: self.cycles,
            eval_points: self.eval_points,
            records_emitted: self.records_emitted,
            memory_loss: self.memory_loss,
            window: self.window.clone(),
        }
    }

    fn incoming(&self) -> StreamBatch {
        let b = &self.data.stream.batches()[self.cursor];
        match self.config.stream.binarize {
            BinarizeMode::Off => b.clone(),
            mode => binarize(b, mode, rng::derive_seed(self.config.seed, BINARIZE_TAG, 0)),
        }
    }

    fn train(&mut self, mb: &StreamBatch) -> Result<()> {
        let loss = self
            .learner
            .train_step(mb, self.config.train.objective, &mut self.train_rng)?;
        self.window.loss_sum += loss;
        self.window.updates += 1;
        Ok(())
    }

    /// Processes the next stream batch. Returns the evaluation record when
    /// one is due.
    pub fn step(&mut self) -> Result<Option<EvalRecord>> {
        if self.is_done() {
            return Err(Error::Internal("stream exhausted".into()));
        }
        let batch = self.incoming();
        let step = batch.step_index();
        let u = self.config.train.updates_per_batch;
        let size = self.config.train.minibatch_size;
        let mut cycle_done = false;
        match &mut self.memory {
            MemoryState::Ocm(m) => {
                let full = m.observe(&batch)?;
                for _ in 0..u {
                    let MemoryState::Ocm(m) = &self.memory else {
                        unreachable!()
                    };
                    let mb = training_minibatch(&m.stm, &m.ltm, size, &mut self.train_rng)?;
                    self.train(&mb)?;
                }
                if full {
                    self.select(step)?;
                    self.cycles += 1;
                    cycle_done = true;
                }
            }
            MemoryState::Baseline { buffer, .. } => {
                let mut incoming = MemoryBuffer::new(BufferKind::Stm, buffer.dim(), None);
                incoming.push_batch(&batch)?;
                for _ in 0..u {
                    let MemoryState::Baseline { buffer, .. } = &self.memory else {
                        unreachable!()
                    };
                    let mb = training_minibatch(&incoming, buffer, size, &mut self.train_rng)?;
                    self.train(&mb)?;
                }
                let MemoryState::Baseline { buffer, policy } = &mut self.memory else {
                    unreachable!()
                };
                baseline_update(buffer, &batch, *policy, &mut self.baseline_rng)?;
            }
        }
        self.samples_seen += batch.len() as u64;
        self.cursor += 1;
        let due = match self.config.eval.eval_every {
            Some(k) => self.cursor.is_multiple_of(k),
            None => match self.memory {
                MemoryState::Ocm(_) => cycle_done,
                MemoryState::Baseline { .. } => self.cursor.is_multiple_of(self.config.eval.fallback_every),
            },
        };
        if !due {
            return Ok(None);
        }
        let rec = self.evaluate(step)?;
        self.records.push(Record::Eval(rec.clone()));
        self.records_emitted += 1;
        self.eval_points += 1;
        self.timings
            .push((step, self.started.elapsed().as_secs_f64()));
        let ck = self.checkpoint();
        if let Some(every) = self.config.eval.checkpoint_every {
            if self.eval_points.is_multiple_of(every as u64) {
                self.checkpoints.push(ck.clone());
            }
        }
        self.last_good = Some(ck);
        Ok(Some(rec))
    }

    /// Stages 2 and 3, plus the expansion test for a mixture.
    fn select(&mut self, step: u64) -> Result<()> {
        let MemoryState::Ocm(m) = &mut self.memory else {
            return Err(Error::Internal("selection needs the dual memory".into()));
        };
        let stm_x = m.stm.samples();
        let ltm_x = m.ltm.samples();
        if let Some(dz) = self.learner.latent_dim() {
            let joint = stm_x.vstack(&ltm_x)?;
            let noise = rng::standard_normal(&mut self.loss_rng, joint.rows(), dz);
            self.memory_loss = Some(self.learner.memory_loss(&joint, &noise)?);
        }
        let fs = self.learner.features(&stm_x)?;
        let fl = self.learner.features(&ltm_x)?;
        let out = m.select(&fs, &fl)?;
        self.window.transferred += out.transferred;
        self.window.evicted += out.evicted;
        if self.config.expansion.enabled {
            if let (Learner::Mixture(mix), Some(r)) = (&mut self.learner, self.memory_loss) {
                if mix.expansion_check(r, self.config.expansion.lambda2)
                    && mix
                        .expand(&mut m.stm, &mut m.ltm, step, r, &mut self.expansion_rng)?
                        .is_some()
                {
                    self.window.expansions.push(step);
                }
            }
        }
        Ok(())
    }

    fn periodic_subset(&self) -> Dataset {
        let test = &self.data.test;
        let n = self.config.eval.periodic_samples;
        if test.len() <= n {
            return test.clone();
        }
        // Evenly strided so class-ordered test sets stay balanced.
        let idx: Vec<usize> = (0..n).map(|i| i * test.len() / n).collect();
        test.subset(&idx)
    }

    fn evaluate(&mut self, step: u64) -> Result<EvalRecord> {
        let sub = self.periodic_subset();
        let (mut test_elbo, mut test_accuracy) = (None, None);
        if !sub.is_empty() {
            match &self.learner {
                Learner::Classifier(c) => {
                    if let Some(l) = &sub.labels {
                        test_accuracy = Some(c.accuracy(&sub.samples, l)?);
                    }
                }
                l => {
                    let dz = l.latent_dim().expect("generative");
                    let mut r = rng::stream_rng(
                        rng::derive_seed(self.config.seed, EVAL_TAG, self.eval_points),
                        0,
                    );
                    let noise = rng::standard_normal(&mut r, sub.len(), dz);
                    let rows = l.elbo_rows(&sub.samples, &noise)?;
                    test_elbo = Some(rows.iter().sum::<f64>() / rows.len() as f64);
                }
            }
        }
        let w = std::mem::take(&mut self.window);
        Ok(EvalRecord {
            step,
            batches: self.cursor as u64,
            samples_seen: self.samples_seen,
            train_loss: (w.updates > 0).then(|| w.loss_sum / w.updates as f64),
            stm_size: self.memory.short_term_len(),
            ltm_size: self.memory.long_term().len(),
            components: self.learner.component_count(),
            transferred: w.transferred,
            evicted: w.evicted,
            expansions: w.expansions,
            memory_loss: self.memory_loss,
            test_elbo,
            test_accuracy,
        })
    }

    /// Runs every remaining batch.
    pub fn run_remaining(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Final evaluation and diagnostics; returns the records appended.
    pub fn finish(&mut self) -> Result<Vec<Record>> {
        let step = self
            .data
            .stream
            .batches()
            .last()
            .map_or(0, |b| b.step_index());
        let test = &self.data.test;
        let final_test = match self.config.eval.final_samples {
            Some(n) if n < test.len() => {
                test.subset(&(0..n).map(|i| i * test.len() / n).collect::<Vec<_>>())
            }
            _ => test.clone(),
        };
        let ltm = self.memory.long_term().samples();
        let mut out = Vec::new();
        let mut fin = FinalRecord {
            step,
            components: self.learner.component_count(),
            stm_size: self.memory.short_term_len(),
            ltm_size: ltm.rows(),
            iwae_m: self.config.eval.iwae_m,
            test_log_likelihood: None,
            reconstruction_error: None,
            test_accuracy: None,
            w_target_memory: None,
            memory_digest: matrix_digest(&ltm),
            model_digests: self.learner.digests(),
        };
        if !final_test.is_empty() {
            match &self.learner {
                Learner::Classifier(c) => {
                    if let Some(l) = &final_test.labels {
                        fin.test_accuracy = Some(c.accuracy(&final_test.samples, l)?);
                    }
                }
                l => {
                    let seed = rng::derive_seed(self.config.seed, EVAL_TAG, u64::MAX);
                    fin.test_log_likelihood = Some(evaluate_nll(
                        l,
                        &final_test.samples,
                        self.config.eval.iwae_m,
                        seed,
                    )?);
                    fin.reconstruction_error =
                        Some(evaluate_reconstruction(l, &final_test.samples)?);
                }
            }
        }
        let mut bounds = Vec::new();
        if !test.is_empty() && ltm.rows() > 0 {
            let per_target = self.config.eval.diag_samples;
            let mixture = target_mixture(&split_targets(test, per_target)?)?;
            fin.w_target_memory = Some(exact_w2(
                &mixture,
                &EmpiricalDistribution::new(ltm.clone())?,
            )?);
            if self.config.eval.diagnostics && self.learner.is_generative() {
                bounds = diagnostics(
                    &self.learner,
                    &ltm,
                    test,
                    per_target,
                    step,
                    &self.config.eval.diag,
                )?;
            }
        }
        out.push(Record::Final(fin));
        out.extend(bounds);
        self.records.extend(out.iter().cloned());
        self.records_emitted += out.len();
        Ok(out)
    }

    /// Writes config echo, metrics, summary, timings and the final checkpoint.
    /// `prior` records (from before a resume) are written first.
    pub fn write_outputs(&self, dir: &Path, prior: &[Record]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join(CONFIG_FILE), &self.config.to_toml()?)?;
        let mut all = prior.to_vec();
        all.extend(self.records.iter().cloned());
        write_text(&dir.join(METRICS_FILE), &to_ndjson(&all)?)?;
        write_text(&dir.join(SUMMARY_FILE), &summary_csv(&all))?;
        let timings: String = self
            .timings
            .iter()
            .map(|(s, t)| format!("{{\"step\":{s},\"elapsed_s\":{t}}}\n"))
            .collect();
        write_text(&dir.join(TIMINGS_FILE), &timings)?;
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        for ck in &self.checkpoints {
            ck.save(&dir.join(format!("checkpoint-{:06}.json", ck.cursor)))?;
        }
        Ok(())
    }

    fn into_output(self) -> RunOutput {
        RunOutput {
            checkpoint: self.checkpoint(),
            records: self.records,
            checkpoints: self.checkpoints,
            output_dir: self.config.output_dir.clone(),
        }
    }

    /// Saves the last checkpoint taken at an evaluation point, if any.
    pub fn save_last_good(&self, dir: &Path) -> Result<Option<PathBuf>> {
        let Some(ck) = &self.last_good else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir)?;
        let p = dir.join("checkpoint-last-good.json");
        ck.save(&p)?;
        Ok(Some(p))
    }
}

fn drive(mut runner: Runner, prior: Vec<Record>) -> Result<RunOutput> {
    let result = runner.run_remaining().and_then(|_| runner.finish());
    let dir = runner.config.output_dir.clone();
    match result {
        Ok(_) => {
            if let Some(d) = &dir {
                runner.write_outputs(d, &prior)?;
            }
            Ok(runner.into_output())
        }
        Err(e) => {
            if let Some(d) = &dir {
                runner.save_last_good(d)?;
            }
            Err(e)
        }
    }
}

/// Runs a configured experiment end to end. Files are written when
/// `output_dir` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    drive(Runner::new(config.clone())?, Vec::new())
}

/// Continues a run from a checkpoint. `prior` holds the records emitted
/// before the checkpoint; the first `records_emitted` of them are kept.
pub fn resume_experiment(ck: Checkpoint, prior: &[Record]) -> Result<RunOutput> {
    let keep = ck.records_emitted.min(prior.len());
    drive(Runner::from_checkpoint(ck)?, prior[..keep].to_vec())
}

/// Classifier-mode experiment; identical loop with the classifier learner.
pub fn run_classifier_mode(config: &ExperimentConfig) -> Result<RunOutput> {
    if config.learner != LearnerKind::Classifier {
        return Err(Error::Config(
            "learner must be \"classifier\" for classifier mode".into(),
        ));
    }
    run_experiment(config)
}
