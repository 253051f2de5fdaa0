//! Dynamic prompt curation and RL-SFT trajectory selection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::protocol::{SegmentKind, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub attempts: u64,
    pub successes: u64,
    pub seen_in_sft: bool,
}

impl PromptRecord {
    pub fn new(prompt_id: impl Into<String>) -> Self {
        Self { prompt_id: prompt_id.into(), attempts: 0, successes: 0, seen_in_sft: false }
    }

    /// Cumulative success rate; `None` before the first attempt.
    pub fn rate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.successes as f64 / self.attempts as f64)
    }

    pub fn record(&mut self, rewards: &[u8]) {
        self.attempts += rewards.len() as u64;
        self.successes += rewards.iter().map(|&r| u64::from(r.min(1))).sum::<u64>();
    }
}

/// Prompts whose cumulative rate lies strictly inside (0, 1) and that were
/// not used for SFT.
pub fn eligible_prompts<'a>(records: impl IntoIterator<Item = &'a PromptRecord>) -> BTreeSet<String> {
    records
        .into_iter()
        .filter(|r| !r.seen_in_sft)
        .filter(|r| r.rate().is_some_and(|rate| rate > 0.0 && rate < 1.0))
        .map(|r| r.prompt_id.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    /// Prompts must score strictly below this rate.
    pub max_rate: f64,
    /// Reasoning tokens required right after a feedback block.
    pub min_analysis_tokens: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self { max_rate: 0.5, min_analysis_tokens: 50 }
    }
}

/// True when some feedback block is immediately followed by reasoning of at
/// least `min_tokens` tokens.
pub fn analyzes_feedback(trajectory: &Trajectory, min_tokens: usize) -> bool {
    trajectory.segments.windows(2).any(|w| {
        w[0].kind == SegmentKind::ReplFeedback
            && w[1].kind == SegmentKind::Reasoning
            && w[1].token_len >= min_tokens
    })
}

/// Correct trajectories from hard prompts that engage with verifier feedback.
pub fn select_rlsft<'t>(
    trajectories: &'t [Trajectory],
    records: &BTreeMap<String, PromptRecord>,
    policy: &SelectionPolicy,
) -> Vec<&'t Trajectory> {
    trajectories
        .iter()
        .filter(|t| t.reward == Some(1))
        .filter(|t| {
            records
                .get(&t.prompt_id)
                .and_then(PromptRecord::rate)
                .is_some_and(|rate| rate < policy.max_rate)
        })
        .filter(|t| analyzes_feedback(t, policy.min_analysis_tokens))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterMode {
    /// Ineligible prompts leave the pool as soon as their rate settles at 0 or 1.
    #[default]
    Continuous,
    /// Every prompt stays in the pool until [`Curator::finalize`].
    Final,
}

/// Thread-safe ledger of per-prompt outcomes for a whole run.
#[derive(Debug, Default)]
pub struct Curator {
    records: Mutex<BTreeMap<String, PromptRecord>>,
    mode: FilterMode,
}

impl Curator {
    pub fn new(mode: FilterMode) -> Self {
        Self { records: Mutex::new(BTreeMap::new()), mode }
    }

    pub fn from_records(records: impl IntoIterator<Item = PromptRecord>, mode: FilterMode) -> Self {
        let map = records.into_iter().map(|r| (r.prompt_id.clone(), r)).collect();
        Self { records: Mutex::new(map), mode }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, PromptRecord>> {
        self.records.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn mark_sft(&self, prompt_id: &str) {
        self.lock()
            .entry(prompt_id.to_string())
            .or_insert_with(|| PromptRecord::new(prompt_id))
            .seen_in_sft = true;
    }

    /// Adds one group's rewards atomically and returns the updated record.
    pub fn record_group(&self, prompt_id: &str, rewards: &[u8]) -> PromptRecord {
        let mut map = self.lock();
        let rec = map.entry(prompt_id.to_string()).or_insert_with(|| PromptRecord::new(prompt_id));
        rec.record(rewards);
        rec.clone()
    }

    pub fn snapshot(&self) -> BTreeMap<String, PromptRecord> {
        self.lock().clone()
    }

    pub fn get(&self, prompt_id: &str) -> Option<PromptRecord> {
        self.lock().get(prompt_id).cloned()
    }

    /// Which of `candidates` should still be sampled for training.
    pub fn training_pool<'a>(&self, candidates: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let map = self.lock();
        candidates
            .into_iter()
            .filter(|id| {
                let Some(rec) = map.get(*id) else { return true };
                if rec.seen_in_sft {
                    return false;
                }
                match (self.mode, rec.rate()) {
                    (FilterMode::Final, _) | (_, None) => true,
                    (FilterMode::Continuous, Some(rate)) => rate > 0.0 && rate < 1.0,
                }
            })
            .map(str::to_string)
            .collect()
    }

    /// The retained prompt set at the end of the run.
    pub fn finalize(&self) -> BTreeSet<String> {
        eligible_prompts(self.lock().values())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for rec in self.lock().values() {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead, mode: FilterMode) -> std::io::Result<Self> {
        let mut records = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PromptRecord = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            if rec.successes > rec.attempts {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}: successes exceed attempts", rec.prompt_id),
                ));
            }
            records.push(rec);
        }
        Ok(Self::from_records(records, mode))
    }
}
