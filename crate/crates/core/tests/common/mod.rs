//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use sketchloop::curation::PromptRecord;
use sketchloop::protocol::{Segment, SegmentKind, StopReason, Trajectory};

/// Closed form for binary rewards: with `k` successes out of `g`, a success
/// gets `sqrt((g-k)/k)` and a failure `-sqrt(k/(g-k))`.
pub fn oracle_advantages(rewards: &[u8]) -> Vec<f64> {
    let g = rewards.len() as f64;
    let k = rewards.iter().filter(|&&r| r == 1).count() as f64;
    if k == 0.0 || k == g {
        return vec![0.0; rewards.len()];
    }
    rewards
        .iter()
        .map(|&r| if r == 1 { ((g - k) / k).sqrt() } else { -(k / (g - k)).sqrt() })
        .collect()
}

/// Piecewise form of the clipped term: positive advantages cap the ratio from
/// above, negative ones from below.
pub fn oracle_term(r: f64, a: f64, eps: f64) -> f64 {
    if a >= 0.0 {
        a * r.min(1.0 + eps)
    } else {
        a * r.max(1.0 - eps)
    }
}

pub fn oracle_objective(groups: &[(Vec<f64>, Vec<u8>)], eps: f64) -> f64 {
    let mut total = 0.0;
    for (ratios, rewards) in groups {
        let adv = oracle_advantages(rewards);
        let s: f64 = ratios.iter().zip(&adv).map(|(&r, &a)| oracle_term(r, a, eps)).sum();
        total += s / ratios.len() as f64;
    }
    total / groups.len() as f64
}

pub fn random_group(rng: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    let g = rng.gen_range(2..=16);
    let rewards: Vec<u8> = (0..g).map(|_| rng.gen_range(0..=1)).collect();
    let ratios: Vec<f64> = (0..g).map(|_| (rng.gen_range(-0.7f64..0.7)).exp()).collect();
    (ratios, rewards)
}

/// Brute-force eligibility straight from the set definition.
pub fn oracle_eligible(records: &[PromptRecord]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for r in records {
        if r.seen_in_sft || r.attempts == 0 {
            continue;
        }
        if r.successes > 0 && r.successes < r.attempts {
            out.insert(r.prompt_id.clone());
        }
    }
    out
}

pub fn random_record(rng: &mut impl Rng, id: usize) -> PromptRecord {
    let attempts = match rng.gen_range(0..10) {
        0 => 0,
        _ => rng.gen_range(1..64),
    };
    let successes = match rng.gen_range(0..4) {
        0 => 0,
        1 => attempts,
        _ => rng.gen_range(0..=attempts),
    };
    PromptRecord { prompt_id: format!("p{id}"), attempts, successes, seen_in_sft: rng.gen_bool(0.2) }
}

/// Well-formed trajectory with random segment texts and token counts.
pub fn random_trajectory(rng: &mut impl Rng, prompt_id: &str) -> Trajectory {
    let rounds = rng.gen_range(0..8);
    let mut segments = vec![Segment::with_tokens(SegmentKind::Reasoning, "r", rng.gen_range(0..80))];
    for i in 0..rounds {
        segments.push(Segment::with_tokens(SegmentKind::Sketch, format!("s{i}"), rng.gen_range(1..60)));
        segments.push(Segment::with_tokens(SegmentKind::ReplFeedback, format!("f{i}"), rng.gen_range(1..120)));
        if rng.gen_bool(0.8) {
            segments.push(Segment::with_tokens(SegmentKind::Reasoning, format!("r{i}"), rng.gen_range(0..120)));
        }
    }
    let (stop_reason, reward) = if rng.gen_bool(0.7) {
        segments.push(Segment::with_tokens(SegmentKind::FinalAnswer, "a", rng.gen_range(1..100)));
        (StopReason::FinalAnswer, Some(rng.gen_range(0..=1)))
    } else {
        (StopReason::LengthLimit, Some(0))
    };
    Trajectory { prompt_id: prompt_id.to_string(), stop_reason, reward, segments }
}

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use sketchloop::backend::{BackendError, MockBackend, VerifierBackend};
use sketchloop::broker::BackendFactory;

/// Mock backend that also counts how often each code string was executed.
/// Code containing `HANG` never answers and ignores its timeout.
pub struct CountingBackend {
    inner: MockBackend,
    calls: Arc<Mutex<HashMap<String, usize>>>,
}

#[async_trait::async_trait]
impl VerifierBackend for CountingBackend {
    async fn check(&mut self, code: &str, timeout: Duration) -> Result<String, BackendError> {
        *self.calls.lock().unwrap().entry(code.to_string()).or_default() += 1;
        if code.contains("HANG") {
            std::future::pending::<()>().await;
        }
        self.inner.check(code, timeout).await
    }

    async fn reset(&mut self) -> Result<(), BackendError> {
        self.inner.reset().await
    }
}

pub fn counting_factory() -> (BackendFactory, Arc<Mutex<HashMap<String, usize>>>) {
    let calls = Arc::new(Mutex::new(HashMap::new()));
    let c = calls.clone();
    let factory: BackendFactory =
        Arc::new(move |_| Box::new(CountingBackend { inner: MockBackend::default(), calls: c.clone() }));
    (factory, calls)
}

/// Backend that never answers and ignores its own timeout, so only the
/// broker's grace period can end the check.
pub struct HangingBackend;

#[async_trait::async_trait]
impl VerifierBackend for HangingBackend {
    async fn check(&mut self, _code: &str, _timeout: Duration) -> Result<String, BackendError> {
        std::future::pending().await
    }

    async fn reset(&mut self) -> Result<(), BackendError> {
        Ok(())
    }
}

use sketchloop::verdict::VerdictStatus;

/// Random job mix with the status each job must end in. Codes are unique.
pub fn job_mix(rng: &mut impl Rng, n: usize, timeout_s: f64) -> Vec<(String, VerdictStatus)> {
    (0..n)
        .map(|i| match rng.gen_range(0..100) {
            0..=54 => (format!("theorem t{i} : True := trivial"), VerdictStatus::Success),
            55..=69 => (format!("theorem t{i} := by\n  MOCK_FAIL"), VerdictStatus::Failed),
            70..=74 => (format!("theorem t{i} := by\n  sorry"), VerdictStatus::Incomplete),
            75..=84 => (format!("MOCK_CRASH {i}"), VerdictStatus::Crash),
            85..=93 => (format!("MOCK_SLEEP:{:.3} job {i}", rng.gen_range(0.0..timeout_s * 0.9)), VerdictStatus::Success),
            94..=95 => (format!("HANG {i}"), VerdictStatus::Timeout),
            _ => (format!("MOCK_SLEEP:{:.3} job {i}", timeout_s * rng.gen_range(1.5..20.0)), VerdictStatus::Timeout),
        })
        .collect()
}
