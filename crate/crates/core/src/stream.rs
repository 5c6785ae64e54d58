//! Non-stationary utterance streams with hidden task identity.
//!
//! A schedule lays out contiguous runs of batches per task. Batches carry no
//! task information; the true task of each batch is recorded in a separate
//! audit log that only evaluation code should consult.

use crate::autodiff::Array;
use crate::data::Dataset;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("schedule references unknown task {0}")]
    UnknownTask(String),
    #[error("task {task} provides {have} stream utterances but the schedule needs {need}")]
    InsufficientData {
        task: String,
        need: usize,
        have: usize,
    },
    #[error("schedule is empty or has zero batch size")]
    EmptySchedule,
}

/// One contiguous run of batches drawn from a single task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StreamSegment {
    pub task: String,
    pub batches: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StreamSchedule {
    pub segments: Vec<StreamSegment>,
    pub batch_size: usize,
    pub seed: u64,
    /// Whether batches expose ground-truth labels.
    pub supervised: bool,
}

#[derive(Debug, Clone)]
pub struct StreamUtterance {
    pub id: String,
    pub features: Array,
    /// Ground truth, present only on supervised streams.
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub index: usize,
    pub utterances: Vec<StreamUtterance>,
}

/// Single-pass batch iterator over the scheduled stream.
#[derive(Debug)]
pub struct TaskStream {
    batches: std::collections::VecDeque<StreamBatch>,
    audit: Vec<String>,
}

impl TaskStream {
    /// Lay out the full stream up front. Each task's stream split is
    /// shuffled once (seeded per task) and consumed without replacement
    /// across all of that task's segments.
    pub fn new(
        schedule: &StreamSchedule,
        sources: &HashMap<String, &Dataset>,
    ) -> Result<Self, StreamError> {
        if schedule.segments.is_empty() || schedule.batch_size == 0 {
            return Err(StreamError::EmptySchedule);
        }

        let mut need: HashMap<&str, usize> = HashMap::new();
        for seg in &schedule.segments {
            *need.entry(seg.task.as_str()).or_default() +=
                seg.batches * schedule.batch_size;
        }
        for (&task, &n) in &need {
            let ds = sources
                .get(task)
                .ok_or_else(|| StreamError::UnknownTask(task.to_string()))?;
            if ds.utterances.len() < n {
                return Err(StreamError::InsufficientData {
                    task: task.to_string(),
                    need: n,
                    have: ds.utterances.len(),
                });
            }
        }

        let mut order: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut cursor: HashMap<&str, usize> = HashMap::new();
        for (i, (&task, _)) in {
            let mut keys: Vec<_> = need.iter().collect();
            keys.sort();
            keys
        }
        .into_iter()
        .enumerate()
        {
            let ds = sources[task];
            let mut idx: Vec<usize> = (0..ds.utterances.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(i as u64 + 1));
            idx.shuffle(&mut rng);
            order.insert(task, idx);
            cursor.insert(task, 0);
        }

        let mut batches = std::collections::VecDeque::new();
        let mut audit = Vec::new();
        let mut index = 0;
        for seg in &schedule.segments {
            let ds = sources[seg.task.as_str()];
            for _ in 0..seg.batches {
                let cur = cursor.get_mut(seg.task.as_str()).unwrap();
                let idx = &order[seg.task.as_str()];
                let mut utterances = Vec::with_capacity(schedule.batch_size);
                for k in 0..schedule.batch_size {
                    let u = &ds.utterances[idx[*cur + k]];
                    utterances.push(StreamUtterance {
                        id: u.id.clone(),
                        features: u.features.clone(),
                        labels: schedule.supervised.then(|| u.tokens.clone()),
                    });
                }
                *cur += schedule.batch_size;
                batches.push_back(StreamBatch { index, utterances });
                audit.push(seg.task.clone());
                index += 1;
            }
        }
        Ok(TaskStream { batches, audit })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// True task id per batch index. Evaluation-only bookkeeping; adaptation
    /// code must not consult this.
    pub fn audit_log(&self) -> &[String] {
        &self.audit
    }
}

impl Iterator for TaskStream {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        self.batches.pop_front()
    }
}
