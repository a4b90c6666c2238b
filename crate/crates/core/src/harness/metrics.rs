use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::BoundReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub batches: u64,
    pub samples_seen: u64,
    /// Mean training loss over the updates since the previous record.
    pub train_loss: Option<f64>,
    pub stm_size: usize,
    pub ltm_size: usize,
    pub components: usize,
    pub transferred: usize,
    pub evicted: usize,
    /// Step indices of expansions since the previous record.
    pub expansions: Vec<u64>,
    /// Negative ELBO on the joint memory at the latest selection point.
    pub memory_loss: Option<f64>,
    pub test_elbo: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub step: u64,
    pub components: usize,
    pub stm_size: usize,
    pub ltm_size: usize,
    pub iwae_m: usize,
    pub test_log_likelihood: Option<f64>,
    pub reconstruction_error: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Squared 2-Wasserstein distance between the held-out target mixture
    /// and the long-term store.
    pub w_target_memory: Option<f64>,
    /// sha256 over the long-term store's sample bytes.
    pub memory_digest: String,
    pub model_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub step: u64,
    pub target: usize,
    pub component: usize,
    pub elbo_source: f64,
    pub elbo_target: f64,
    pub w_m_g: f64,
    pub w_x_m: f64,
    pub f_tilde: f64,
    pub rhs: f64,
    pub lhs: f64,
    pub gap: f64,
    /// Encoder-coupled transport cost and its standard error.
    pub upper_bound: f64,
    pub upper_bound_se: f64,
    /// Exact transport cost from the target to generator samples.
    pub w_x_g: f64,
    pub theorem1_lhs: Option<f64>,
    pub theorem1_rhs: Option<f64>,
}

impl BoundRecord {
    pub fn report(&self) -> BoundReport {
        BoundReport {
            elbo_source: self.elbo_source,
            elbo_target: self.elbo_target,
            w_m_g: self.w_m_g,
            w_x_m: self.w_x_m,
            f_tilde: self.f_tilde,
            rhs: self.rhs,
            lhs: self.lhs,
            gap: self.gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaRecord {
    pub step: u64,
    pub components: usize,
    pub aggregate: f64,
    /// Aggregate using each component alone, in creation order.
    pub single_component: Vec<f64>,
}

/// Encoder-coupled cost against the exact transport cost to the
/// generator, on the whole held-out target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportRecord {
    pub step: u64,
    pub samples: usize,
    pub upper_bound: f64,
    pub upper_bound_se: f64,
    /// Mean over independent generator draws, with its standard error.
    pub w_x_g: f64,
    pub w_x_g_se: f64,
}

impl TransportRecord {
    /// Standard error of `upper_bound − w_x_g`.
    pub fn combined_se(&self) -> f64 {
        self.upper_bound_se.hypot(self.w_x_g_se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Eval(EvalRecord),
    Final(FinalRecord),
    Bound(BoundRecord),
    Lemma(LemmaRecord),
    Transport(TransportRecord),
}

impl Record {
    pub fn step(&self) -> u64 {
        match self {
            Record::Eval(r) => r.step,
            Record::Final(r) => r.step,
            Record::Bound(r) => r.step,
            Record::Lemma(r) => r.step,
            Record::Transport(r) => r.step,
        }
    }
}

pub fn to_ndjson(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_ndjson(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Input(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SUMMARY_HEADER: &str =
    "step,kind,train_loss,stm_size,ltm_size,components,memory_loss,test_elbo,test_accuracy,test_log_likelihood,reconstruction_error";

/// One comma-separated row per evaluation or final record.
pub fn summary_csv(records: &[Record]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in records {
        match r {
            Record::Eval(e) => writeln!(
                out,
                "{},eval,{},{},{},{},{},{},{},,",
                e.step,
                opt(e.train_loss),
                e.stm_size,
                e.ltm_size,
                e.components,
                opt(e.memory_loss),
                opt(e.test_elbo),
                opt(e.test_accuracy)
            ),
            Record::Final(f) => writeln!(
                out,
                "{},final,,{},{},{},,,{},{},{}",
                f.step,
                f.stm_size,
                f.ltm_size,
                f.components,
                opt(f.test_accuracy),
                opt(f.test_log_likelihood),
                opt(f.reconstruction_error)
            ),
            _ => Ok(()),
        }
        .expect("writing to a string");
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}
