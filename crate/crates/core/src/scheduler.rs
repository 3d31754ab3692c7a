//! Allocation of the master test list to devices and batch dispatch.
//!
//! Within a cluster tests are dealt round-robin in master order, so queue
//! lengths differ by at most one. Each device then consumes its queue in
//! batches through a [`DispatchCursor`]. When a batch reports a crash:
//!
//! - [`Strategy::Rebuild`] restarts immediately after the crashed test;
//! - [`Strategy::Discard`] drops the rest of the batch and continues at the
//!   next batch boundary, so boundaries stay at multiples of `batch_size`.
//!
//! The crashed test itself counts as executed under both strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{DeviceCluster, DeviceId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Discard,
    Rebuild,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Discard => f.write_str("discard"),
            Strategy::Rebuild => f.write_str("rebuild"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "discard" => Ok(Strategy::Discard),
            "rebuild" => Ok(Strategy::Rebuild),
            other => Err(format!("unknown strategy {other:?} (expected discard or rebuild)")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("redundancy must be at least 1")]
    ZeroRedundancy,
    #[error("redundancy {redundancy} exceeds size {size} of cluster {brand}/{model}/{api_level}")]
    RedundancyTooLarge {
        redundancy: usize,
        size: usize,
        brand: String,
        model: String,
        api_level: u32,
    },
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("crash report for batch {reported} but the open batch is {open:?}")]
    StaleCrash { reported: u64, open: Option<u64> },
    #[error("crash offset {offset} outside batch {batch_index} of length {len}")]
    CrashOffset {
        batch_index: u64,
        offset: usize,
        len: usize,
    },
}

/// Per-device personal queues of test ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub queues: BTreeMap<DeviceId, Vec<String>>,
}

impl Assignment {
    pub fn queue(&self, device: &DeviceId) -> Option<&[String]> {
        self.queues.get(device).map(Vec::as_slice)
    }
}

/// Deals `tests` round-robin to every cluster; each test lands on
/// `redundancy` distinct members of each cluster.
pub fn allocate(tests: &[String], clusters: &[DeviceCluster], redundancy: usize) -> Result<Assignment, SchedulerError> {
    if redundancy == 0 {
        return Err(SchedulerError::ZeroRedundancy);
    }
    if let Some(c) = clusters.iter().find(|c| c.members.len() < redundancy) {
        return Err(SchedulerError::RedundancyTooLarge {
            redundancy,
            size: c.members.len(),
            brand: c.key.brand.clone(),
            model: c.key.model.clone(),
            api_level: c.key.api_level,
        });
    }
    let mut queues = BTreeMap::new();
    for cluster in clusters {
        let m = cluster.members.len();
        let mut per_member: Vec<Vec<String>> = vec![Vec::new(); m];
        let mut slot = 0usize;
        for test in tests {
            for _ in 0..redundancy {
                per_member[slot % m].push(test.clone());
                slot += 1;
            }
        }
        for (member, queue) in cluster.members.iter().zip(per_member) {
            queues.insert(member.clone(), queue);
        }
    }
    Ok(Assignment { queues })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashReport {
    pub batch_index: u64,
    /// 0-based offset within the batch of the test that crashed the runner.
    pub crashed_at: usize,
}

/// One dispatched batch and what became of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: u64,
    pub start: usize,
    pub len: usize,
    pub crashed_at: Option<usize>,
}

impl BatchRecord {
    pub fn executed(&self) -> usize {
        self.crashed_at.map_or(self.len, |c| c + 1)
    }

    /// Queue positions dispatched in this batch but never run.
    pub fn unexecuted(&self) -> Range<usize> {
        self.start + self.executed()..self.start + self.len
    }

    pub fn positions(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSlice {
    pub index: u64,
    pub start: usize,
    pub len: usize,
}

impl BatchSlice {
    pub fn test_ids(&self, queue: &[String]) -> Vec<String> {
        queue[self.start..self.start + self.len].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dispatch {
    Batch(BatchSlice),
    Done,
}

/// Dispatch state for one device's queue.
#[derive(Debug, Clone)]
pub struct DispatchCursor {
    device: DeviceId,
    queue_len: usize,
    position: usize,
    strategy: Strategy,
    batch_size: usize,
    history: Vec<BatchRecord>,
    open: bool,
    rebatched: usize,
}

impl DispatchCursor {
    pub fn new(
        device: DeviceId,
        queue_len: usize,
        strategy: Strategy,
        batch_size: usize,
    ) -> Result<Self, SchedulerError> {
        if batch_size == 0 {
            return Err(SchedulerError::ZeroBatchSize);
        }
        Ok(Self {
            device,
            queue_len,
            position: 0,
            strategy,
            batch_size,
            history: Vec::new(),
            open: false,
            rebatched: 0,
        })
    }

    pub fn device(&self) -> &DeviceId {
        &self.device
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn queue_len(&self) -> usize {
        self.queue_len
    }

    pub fn history(&self) -> &[BatchRecord] {
        &self.history
    }

    /// The most recent batch, while it can still receive a crash report.
    pub fn open_batch(&self) -> Option<&BatchRecord> {
        self.history.last().filter(|_| self.open)
    }

    /// Tests dispatched again after a rebuild: the unexecuted tails of crashed
    /// batches under [`Strategy::Rebuild`].
    pub fn rebatched(&self) -> usize {
        self.rebatched
    }

    pub fn is_done(&self) -> bool {
        !self.open && self.position >= self.queue_len
    }

    pub fn next_batch(&mut self, last_crash: Option<CrashReport>) -> Result<Dispatch, SchedulerError> {
        if let Some(crash) = last_crash {
            let open = self.open_batch().map(|b| b.index);
            let record = match self.history.last_mut() {
                Some(r) if self.open && r.index == crash.batch_index => r,
                _ => {
                    return Err(SchedulerError::StaleCrash {
                        reported: crash.batch_index,
                        open,
                    })
                }
            };
            if crash.crashed_at >= record.len {
                return Err(SchedulerError::CrashOffset {
                    batch_index: record.index,
                    offset: crash.crashed_at,
                    len: record.len,
                });
            }
            record.crashed_at = Some(crash.crashed_at);
            if self.strategy == Strategy::Rebuild {
                self.rebatched += record.unexecuted().len();
                self.position = record.start + crash.crashed_at + 1;
            }
        }
        self.open = false;
        if self.position >= self.queue_len {
            return Ok(Dispatch::Done);
        }
        let len = self.batch_size.min(self.queue_len - self.position);
        let index = self.history.len() as u64;
        let record = BatchRecord {
            index,
            start: self.position,
            len,
            crashed_at: None,
        };
        self.history.push(record);
        self.position += len;
        self.open = true;
        Ok(Dispatch::Batch(BatchSlice {
            index,
            start: record.start,
            len,
        }))
    }

    pub fn coverage(&self) -> Coverage {
        coverage(&self.history, self.queue_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub executed: usize,
    pub fraction: f64,
}

impl Coverage {
    pub fn from_counts(executed: usize, queue_len: usize) -> Self {
        let fraction = if queue_len == 0 {
            1.0
        } else {
            executed as f64 / queue_len as f64
        };
        Self { executed, fraction }
    }

    pub fn percent(&self) -> f64 {
        self.fraction * 100.0
    }
}

/// Executed tests over a cursor history. Crashed tests count as executed;
/// discarded ones do not.
pub fn coverage(history: &[BatchRecord], queue_len: usize) -> Coverage {
    let executed = history.iter().map(BatchRecord::executed).sum();
    Coverage::from_counts(executed, queue_len)
}

/// Result of driving one queue to completion against a fixed crash trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replay {
    pub executed: Vec<bool>,
    pub executed_count: usize,
    pub batches: usize,
    pub rebatched: usize,
}

impl Replay {
    /// Logical time: one tick per executed test plus `rebuild_penalty` ticks
    /// per re-batched test.
    pub fn cost_ticks(&self, rebuild_penalty: u64) -> u64 {
        self.executed_count as u64 + rebuild_penalty * self.rebatched as u64
    }
}

/// Replays a queue of `queue_len` tests where `crashes(pos)` says whether the
/// test at queue position `pos` crashes the runner when executed.
pub fn replay(
    queue_len: usize,
    batch_size: usize,
    strategy: Strategy,
    crashes: impl Fn(usize) -> bool,
) -> Result<Replay, SchedulerError> {
    let mut cursor = DispatchCursor::new(DeviceId::from("replay"), queue_len, strategy, batch_size)?;
    let mut executed = vec![false; queue_len];
    let mut crash = None;
    loop {
        let batch = match cursor.next_batch(crash.take())? {
            Dispatch::Done => break,
            Dispatch::Batch(b) => b,
        };
        for offset in 0..batch.len {
            let pos = batch.start + offset;
            executed[pos] = true;
            if crashes(pos) {
                crash = Some(CrashReport {
                    batch_index: batch.index,
                    crashed_at: offset,
                });
                break;
            }
        }
    }
    let executed_count = executed.iter().filter(|e| **e).count();
    debug_assert_eq!(executed_count, cursor.coverage().executed);
    Ok(Replay {
        executed,
        executed_count,
        batches: cursor.history().len(),
        rebatched: cursor.rebatched(),
    })
}
