use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::MemoryBuffer;
use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::stream::{LabelAccess, StreamBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    /// Append, then evict uniformly at random down to capacity.
    RandomRemoval,
    /// Single-pass reservoir sampling over the stream.
    Reservoir,
}

pub fn baseline_update(
    buffer: &mut MemoryBuffer,
    batch: &StreamBatch,
    policy: BaselinePolicy,
    rng: &mut Rng64,
) -> Result<()> {
    let cap = buffer
        .capacity()
        .ok_or_else(|| Error::Config("baseline buffer needs a capacity".into()))?;
    match policy {
        BaselinePolicy::RandomRemoval => {
            buffer.push_batch(batch)?;
            buffer.note_seen(batch.len() as u64);
            while buffer.len() > cap {
                let i = rng.random_range(0..buffer.len());
                buffer.remove(i);
            }
        }
        BaselinePolicy::Reservoir => {
            if batch.samples().cols() != buffer.dim() {
                return Err(Error::dim(
                    "baseline batch",
                    buffer.dim(),
                    batch.samples().cols(),
                ));
            }
            let labels = batch.labels(LabelAccess::supervised());
            for (i, row) in batch.samples().row_iter().enumerate() {
                buffer.note_seen(1);
                let label = labels.map(|l| l[i]);
                if buffer.len() < cap {
                    buffer.push(row, label, batch.step_index())?;
                } else {
                    let j = rng.random_range(0..buffer.seen());
                    if (j as usize) < cap {
                        buffer.replace(j as usize, row, label, batch.step_index());
                    }
                }
            }
        }
    }
    Ok(())
}
