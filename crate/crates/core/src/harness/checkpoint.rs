use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::learner::Learner;
use crate::error::{Error, Result};
use crate::memory::{BaselinePolicy, MemoryBuffer, OcmMemory};
use crate::rng::RngState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ocmlab-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemoryState {
    Ocm(OcmMemory),
    Baseline {
        buffer: MemoryBuffer,
        policy: BaselinePolicy,
    },
}

impl MemoryState {
    /// The store that persists across selection points.
    pub fn long_term(&self) -> &MemoryBuffer {
        match self {
            MemoryState::Ocm(m) => &m.ltm,
            MemoryState::Baseline { buffer, .. } => buffer,
        }
    }

    pub fn short_term_len(&self) -> usize {
        match self {
            MemoryState::Ocm(m) => m.stm.len(),
            MemoryState::Baseline { .. } => 0,
        }
    }

    fn consistent(&self) -> bool {
        match self {
            MemoryState::Ocm(m) => m.stm.consistent() && m.ltm.consistent(),
            MemoryState::Baseline { buffer, .. } => buffer.consistent(),
        }
    }
}

/// Accumulators between two evaluation records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub loss_sum: f64,
    pub updates: u64,
    pub transferred: usize,
    pub evicted: usize,
    pub expansions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStates {
    pub train: RngState,
    pub baseline: RngState,
    pub loss: RngState,
    pub expansion: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub learner: Learner,
    pub memory: MemoryState,
    pub rngs: RngStates,
    /// Index of the next stream batch to process.
    pub cursor: usize,
    pub samples_seen: u64,
    pub cycles: u64,
    pub eval_points: u64,
    pub records_emitted: usize,
    pub memory_loss: Option<f64>,
    pub window: Window,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    payload_bytes: usize,
    payload_sha256: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_vec(self)
            .map_err(|e| Error::Internal(format!("checkpoint encode: {e}")))?;
        let header = Header {
            format: MAGIC.into(),
            version: self.format_version,
            payload_bytes: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
        out.push(b'\n');
        out.extend(payload);
        Ok(out)
    }

    /// Verifies the header, length and digest before decoding anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Integrity("checkpoint header missing".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Integrity(format!("checkpoint header unreadable: {e}")))?;
        if header.format != MAGIC {
            return Err(Error::Integrity(format!(
                "not a checkpoint file (format {:?})",
                header.format
            )));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != header.payload_bytes {
            return Err(Error::Integrity(format!(
                "checkpoint truncated: {} of {} payload bytes",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::Integrity(
                "checkpoint payload digest mismatch".into(),
            ));
        }
        let ck: Checkpoint = serde_json::from_slice(payload)
            .map_err(|e| Error::Integrity(format!("checkpoint payload undecodable: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Integrity(
                "checkpoint payload version disagrees with header".into(),
            ));
        }
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        if !self.memory.consistent() {
            return Err(Error::Integrity(
                "buffer snapshot is internally inconsistent".into(),
            ));
        }
        if let Learner::Mixture(m) = &self.learner {
            if !m.consistent() {
                return Err(Error::Integrity(
                    "mixture state violates the single-trainable-component rule".into(),
                ));
            }
        }
        for r in [
            &self.rngs.train,
            &self.rngs.baseline,
            &self.rngs.loss,
            &self.rngs.expansion,
        ] {
            if r.restore().is_none() {
                return Err(Error::Integrity("unreadable generator state".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_bytes(&bytes)
    }
}
