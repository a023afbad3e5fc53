//! Version-ordered record of recomputed scores and job updates.

use std::collections::{BTreeSet, VecDeque};

use biaslens_core::engine::BiasScore;
use biaslens_core::generation::JobStatus;
use biaslens_core::NodeId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Change {
    Score {
        node_id: NodeId,
        score: BiasScore,
    },
    Job {
        job_id: String,
        node_id: NodeId,
        status: JobStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeFeedEntry {
    pub version: u64,
    pub changed: Vec<Change>,
}

/// The requested position is no longer (or not yet) covered by the feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gone {
    pub floor: u64,
    pub head: u64,
}

#[derive(Debug, Clone)]
pub struct ChangeFeed {
    entries: VecDeque<ChangeFeedEntry>,
    /// Readers must start at or after this version.
    floor: u64,
    capacity: usize,
}

impl ChangeFeed {
    /// An empty feed whose history starts at `floor`.
    pub fn new(floor: u64, capacity: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            floor,
            capacity: capacity.max(1),
        }
    }

    pub fn floor(&self) -> u64 {
        self.floor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry. Versions must strictly increase.
    pub fn publish(&mut self, entry: ChangeFeedEntry) {
        let last = self.entries.back().map_or(self.floor, |e| e.version);
        assert!(entry.version > last, "feed versions must increase");
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            if let Some(dropped) = self.entries.pop_front() {
                self.floor = dropped.version;
            }
        }
    }

    /// Entries newer than `since`, oldest first. Repeated updates of the same
    /// node or job keep only the latest one; entries left empty are skipped.
    pub fn since(&self, since: u64, head: u64) -> Result<Vec<ChangeFeedEntry>, Gone> {
        if since < self.floor || since > head {
            return Err(Gone {
                floor: self.floor,
                head,
            });
        }
        let mut seen_nodes = BTreeSet::new();
        let mut seen_jobs = BTreeSet::new();
        let mut out = Vec::new();
        for entry in self.entries.iter().rev().take_while(|e| e.version > since) {
            let changed: Vec<Change> = entry
                .changed
                .iter()
                .rev()
                .filter(|c| match c {
                    Change::Score { node_id, .. } => seen_nodes.insert(*node_id),
                    Change::Job { job_id, .. } => seen_jobs.insert(job_id.clone()),
                })
                .cloned()
                .collect();
            if !changed.is_empty() {
                out.push(ChangeFeedEntry {
                    version: entry.version,
                    changed: changed.into_iter().rev().collect(),
                });
            }
        }
        out.reverse();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: &str, status: JobStatus) -> Change {
        Change::Job {
            job_id: id.into(),
            node_id: NodeId(1),
            status,
        }
    }

    fn entry(v: u64, changed: Vec<Change>) -> ChangeFeedEntry {
        ChangeFeedEntry { version: v, changed }
    }

    #[test]
    fn since_head_is_empty_and_one_entry_later() {
        let mut f = ChangeFeed::new(3, 8);
        assert_eq!(f.since(3, 3).unwrap(), vec![]);
        f.publish(entry(4, vec![job("a", JobStatus::Pending)]));
        assert_eq!(f.since(3, 4).unwrap().len(), 1);
        assert!(f.since(4, 4).unwrap().is_empty());
    }

    #[test]
    fn coalesces_per_key() {
        let mut f = ChangeFeed::new(0, 8);
        f.publish(entry(
            1,
            vec![job("a", JobStatus::Pending), job("b", JobStatus::Pending)],
        ));
        f.publish(entry(2, vec![job("a", JobStatus::Running { completed: 1 })]));
        f.publish(entry(5, vec![job("a", JobStatus::Done)]));
        let got = f.since(0, 5).unwrap();
        assert_eq!(
            got,
            vec![
                entry(1, vec![job("b", JobStatus::Pending)]),
                entry(5, vec![job("a", JobStatus::Done)])
            ]
        );
        assert_eq!(f.since(1, 5).unwrap(), vec![entry(5, vec![job("a", JobStatus::Done)])]);
    }

    #[test]
    fn compaction_and_future_positions_are_gone() {
        let mut f = ChangeFeed::new(0, 2);
        for v in 1..=4 {
            f.publish(entry(v, vec![job(&v.to_string(), JobStatus::Pending)]));
        }
        assert_eq!(f.len(), 2);
        assert_eq!(f.floor(), 2);
        assert_eq!(f.since(1, 4), Err(Gone { floor: 2, head: 4 }));
        assert_eq!(f.since(2, 4).unwrap().len(), 2);
        assert!(f.since(9, 4).is_err());
    }

    #[test]
    #[should_panic(expected = "increase")]
    fn rejects_non_increasing_versions() {
        let mut f = ChangeFeed::new(5, 4);
        f.publish(entry(5, vec![]));
    }
}
