//! Drives one tool-integrated rollout: generate until a sketch closes, verify
//! it through the broker, inject the verdict, resume, and finally score the
//! answer after `</think>`.

use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError};
use crate::protocol::{
    assemble, extract_final_answer, inject_feedback, whitespace_tokens, ParseEvent, ProtocolError, Segment,
    SegmentKind, StopReason, StreamParser, Trajectory,
};
use crate::verdict::{reward, VerdictStatus, VerifierVerdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub text: String,
    pub tokens: usize,
}

impl Chunk {
    pub fn new(text: impl Into<String>, tokens: usize) -> Self {
        Self { text: text.into(), tokens }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopSignal {
    /// Output ends exactly at `</sketch>`.
    SketchEnd,
    /// `</think>` and the answer were emitted.
    ThinkEnd,
    BudgetExhausted,
    NaturalEnd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub chunks: Vec<Chunk>,
    pub stop: StopSignal,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("generator error: {0}")]
pub struct GeneratorError(pub String);

/// Sampling surface of the policy. Each call continues from `context` and
/// must not emit more than `budget` tokens.
#[async_trait]
pub trait Generator: Send {
    async fn next(&mut self, context: &str, budget: usize) -> Result<Generation, GeneratorError>;

    /// Token count of injected text (feedback blocks).
    fn count_tokens(&self, text: &str) -> usize {
        whitespace_tokens(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutLimits {
    pub max_total_tokens: usize,
    pub sketch_timeout: Duration,
    pub max_interactions: Option<usize>,
}

impl RolloutLimits {
    pub const TRAIN_MAX_TOKENS: usize = 16384;
    pub const EVAL_MAX_TOKENS: usize = 20480;

    pub fn train() -> Self {
        Self { max_total_tokens: Self::TRAIN_MAX_TOKENS, sketch_timeout: Duration::from_secs(60), max_interactions: None }
    }

    pub fn eval() -> Self {
        Self { max_total_tokens: Self::EVAL_MAX_TOKENS, ..Self::train() }
    }
}

impl Default for RolloutLimits {
    fn default() -> Self {
        Self::train()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutOptions {
    pub timeout_feedback: String,
    pub crash_feedback: String,
    /// Extra attempts after a broker failure before the rollout fails.
    pub broker_retries: u32,
    pub retry_backoff: Duration,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            timeout_feedback: r#"{"error":"timeout"}"#.into(),
            crash_feedback: r#"{"error":"crash"}"#.into(),
            broker_retries: 2,
            retry_backoff: Duration::from_millis(200),
        }
    }
}

impl RolloutOptions {
    /// Text the generator sees for a sketch verdict.
    pub fn feedback_for(&self, verdict: &VerifierVerdict) -> String {
        match verdict.status {
            VerdictStatus::Timeout => self.timeout_feedback.clone(),
            VerdictStatus::Crash => self.crash_feedback.clone(),
            _ => verdict.raw.clone(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RolloutError {
    #[error("broker unavailable: {0}")]
    Broker(#[from] BrokerError),
}

/// A scored trajectory plus the verdict of every verified sketch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    #[serde(flatten)]
    pub trajectory: Trajectory,
    pub sketch_verdicts: Vec<VerdictStatus>,
    pub final_verdict: Option<VerdictStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RolloutRecord {
    pub fn reward(&self) -> u8 {
        self.trajectory.reward.unwrap_or(0)
    }

    /// Placeholder for a rollout that could not run at all; scores 0.
    pub fn failed(prompt_id: &str, error: impl Into<String>) -> Self {
        Self {
            trajectory: Trajectory {
                prompt_id: prompt_id.to_string(),
                stop_reason: StopReason::Aborted,
                reward: Some(0),
                segments: vec![Segment::new(SegmentKind::Reasoning, "")],
            },
            sketch_verdicts: Vec::new(),
            final_verdict: None,
            error: Some(error.into()),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub prompt_id: String,
    pub text: String,
}

impl Prompt {
    pub fn new(prompt_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { prompt_id: prompt_id.into(), text: text.into() }
    }
}

async fn verify_with_retry(
    broker: &Broker,
    prompt_id: &str,
    code: &str,
    timeout: Duration,
    opts: &RolloutOptions,
) -> Result<VerifierVerdict, RolloutError> {
    let mut attempt = 0;
    loop {
        match broker.verify(prompt_id, code, Some(timeout)).await {
            Ok(res) => return Ok(res.verdict),
            Err(e @ BrokerError::InvalidJob(_)) => return Err(e.into()),
            Err(e) if attempt >= opts.broker_retries => return Err(e.into()),
            Err(e) => {
                tracing::debug!(prompt_id, attempt, error = %e, "retrying verification");
                attempt += 1;
                tokio::time::sleep(opts.retry_backoff * attempt).await;
            }
        }
    }
}

enum Turn {
    Sketch(String),
    Finished(StopReason),
    Continue,
}

/// Runs a rollout to completion. Generator misbehaviour ends the rollout as
/// `Aborted` with reward 0; only a broker that stays unavailable after the
/// configured retries is reported as an error.
pub async fn run_rollout<G: Generator + ?Sized>(
    prompt: &Prompt,
    generator: &mut G,
    broker: &Broker,
    limits: &RolloutLimits,
    opts: &RolloutOptions,
) -> Result<RolloutRecord, RolloutError> {
    let mut parser = StreamParser::new();
    let mut context = prompt.text.clone();
    let mut generated = String::new();
    // (byte offset in `generated`, tokens) for each emitted chunk.
    let mut chunk_marks: Vec<(usize, usize)> = Vec::new();
    let mut events: Vec<ParseEvent> = Vec::new();
    let mut feedbacks: Vec<String> = Vec::new();
    let mut feedback_tokens: Vec<usize> = Vec::new();
    let mut sketch_verdicts = Vec::new();
    let mut used = 0usize;

    let stop_reason = loop {
        let budget = limits.max_total_tokens.saturating_sub(used);
        if budget == 0 {
            break StopReason::LengthLimit;
        }
        let committed = (events.len(), generated.len(), chunk_marks.len(), parser.clone());
        let turn = match generator.next(&context, budget).await {
            Ok(gen) => {
                let mut fresh = Vec::new();
                let mut violation: Option<String> = None;
                for chunk in &gen.chunks {
                    chunk_marks.push((generated.len(), chunk.tokens));
                    generated.push_str(&chunk.text);
                    context.push_str(&chunk.text);
                    used += chunk.tokens;
                    match parser.feed(&chunk.text) {
                        Ok(ev) => fresh.extend(ev),
                        Err(e) => {
                            violation = Some(e.to_string());
                            break;
                        }
                    }
                }
                let sketch_at = fresh.iter().position(|e| matches!(e, ParseEvent::SketchComplete(_)));
                if violation.is_none() && fresh.iter().any(|e| matches!(e, ParseEvent::Feedback(_))) {
                    violation = Some("generator emitted a feedback block".into());
                }
                if violation.is_none() {
                    if let Some(at) = sketch_at {
                        if at + 1 != fresh.len() || parser.pending_len() > 0 || parser.saw_think_end() {
                            violation = Some("output continued past `</sketch>`".into());
                        }
                    } else if gen.stop == StopSignal::SketchEnd {
                        violation = Some("SketchEnd without a closed sketch".into());
                    } else if gen.stop == StopSignal::ThinkEnd && !parser.saw_think_end() {
                        violation = Some("ThinkEnd without `</think>`".into());
                    }
                }
                match violation {
                    Some(reason) => Err(reason),
                    None => {
                        let code = match fresh.last() {
                            Some(ParseEvent::SketchComplete(code)) if sketch_at.is_some() => Some(code.clone()),
                            _ => None,
                        };
                        events.extend(fresh);
                        Ok(match code {
                            Some(code) => Turn::Sketch(code),
                            None if parser.saw_think_end() => Turn::Finished(StopReason::FinalAnswer),
                            None => match gen.stop {
                                StopSignal::BudgetExhausted => Turn::Finished(StopReason::LengthLimit),
                                StopSignal::NaturalEnd => Turn::Finished(StopReason::GeneratorExhausted),
                                _ if used >= limits.max_total_tokens => Turn::Finished(StopReason::LengthLimit),
                                _ => Turn::Continue,
                            },
                        })
                    }
                }
            }
            Err(e) => Err(e.0),
        };
        match turn {
            Ok(Turn::Continue) => continue,
            Ok(Turn::Finished(reason)) => break reason,
            Ok(Turn::Sketch(code)) => {
                if limits.max_interactions.is_some_and(|cap| feedbacks.len() >= cap) {
                    break StopReason::LengthLimit;
                }
                let verdict = verify_with_retry(broker, &prompt.prompt_id, &code, limits.sketch_timeout, opts).await?;
                let payload = opts.feedback_for(&verdict);
                let rendered = inject_feedback(&payload);
                let tokens = generator.count_tokens(&rendered);
                if used + tokens > limits.max_total_tokens {
                    break StopReason::LengthLimit;
                }
                used += tokens;
                context.push_str(&rendered);
                feedbacks.push(payload);
                feedback_tokens.push(tokens);
                sketch_verdicts.push(verdict.status);
            }
            Err(reason) => {
                tracing::debug!(prompt_id = %prompt.prompt_id, %reason, "rollout aborted");
                let (n_events, n_bytes, n_marks, p) = committed;
                events.truncate(n_events);
                generated.truncate(n_bytes);
                chunk_marks.truncate(n_marks);
                parser = p;
                break StopReason::Aborted;
            }
        }
    };

    match parser.finish() {
        Ok(tail) => events.extend(tail),
        Err(e) => tracing::debug!(error = %e, "discarding unterminated tail"),
    }
    let mut trajectory = match assemble(&prompt.prompt_id, &events, &feedbacks) {
        Ok(t) => t,
        Err(e) => return Ok(RolloutRecord::failed(&prompt.prompt_id, format!("assembly failed: {e}"))),
    };
    trajectory.stop_reason = stop_reason;
    attribute_tokens(&mut trajectory, &chunk_marks, &feedback_tokens);

    let mut final_verdict = None;
    trajectory.reward = Some(0);
    if stop_reason == StopReason::FinalAnswer {
        let answer = extract_final_answer(&generated).map_err(|e: ProtocolError| e.to_string());
        if let Ok(answer) = answer {
            let verdict = verify_with_retry(broker, &prompt.prompt_id, &answer, limits.sketch_timeout, opts).await?;
            trajectory.reward = Some(reward(&verdict));
            final_verdict = Some(verdict.status);
        }
    }
    Ok(RolloutRecord { trajectory, sketch_verdicts, final_verdict, error: None })
}

/// Credits each chunk's tokens to the segment that contains the chunk's first
/// byte; feedback segments get the injected token counts.
fn attribute_tokens(trajectory: &mut Trajectory, chunk_marks: &[(usize, usize)], feedback_tokens: &[usize]) {
    let mut ranges = Vec::new();
    let mut offset = 0usize;
    for (i, seg) in trajectory.segments.iter().enumerate() {
        if seg.kind != SegmentKind::ReplFeedback {
            let len = seg.render().len();
            ranges.push((i, offset, offset + len));
            offset += len;
        }
    }
    for seg in &mut trajectory.segments {
        seg.token_len = 0;
    }
    for &(at, tokens) in chunk_marks {
        let target = ranges
            .iter()
            .find(|&&(_, start, end)| at >= start && at < end)
            .or_else(|| ranges.iter().rev().find(|&&(_, start, end)| end > start))
            .or(ranges.first());
        if let Some(&(i, _, _)) = target {
            trajectory.segments[i].token_len += tokens;
        }
    }
    let feedback_segments = trajectory.segments.iter_mut().filter(|s| s.kind == SegmentKind::ReplFeedback);
    for (seg, &tokens) in feedback_segments.zip(feedback_tokens) {
        seg.token_len = tokens;
    }
}

/// One prompt's sampled group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRewards {
    pub prompt_id: String,
    pub rewards: Vec<u8>,
    pub records: Vec<RolloutRecord>,
}

impl GroupRewards {
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.records.iter().map(|r| &r.trajectory)
    }
}

/// Runs `g` rollouts concurrently; result order follows the sample index.
/// A rollout that fails outright still occupies its slot with reward 0.
pub async fn run_group<G, F>(
    prompt: &Prompt,
    mut factory: F,
    broker: &Broker,
    limits: &RolloutLimits,
    opts: &RolloutOptions,
    g: usize,
) -> GroupRewards
where
    G: Generator,
    F: FnMut(usize) -> G,
{
    if g == 1 {
        tracing::warn!(prompt_id = %prompt.prompt_id, "group of one: advantages will be zero");
    }
    let futures = (0..g).map(|i| {
        let mut generator = factory(i);
        async move {
            match run_rollout(prompt, &mut generator, broker, limits, opts).await {
                Ok(rec) => rec,
                Err(e) => RolloutRecord::failed(&prompt.prompt_id, e.to_string()),
            }
        }
    });
    let records = futures::future::join_all(futures).await;
    GroupRewards {
        prompt_id: prompt.prompt_id.clone(),
        rewards: records.iter().map(RolloutRecord::reward).collect(),
        records,
    }
}

/// Splits text into word chunks (word plus trailing whitespace), one token each.
/// Leading whitespace becomes its own zero-token chunk.
pub fn word_chunks(text: &str) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut seen_word = false;
    let mut in_space = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_space = true;
        } else {
            if in_space && seen_word {
                chunks.push(Chunk::new(&text[start..i], 1));
                start = i;
            } else if in_space && i > 0 {
                chunks.push(Chunk::new(&text[start..i], 0));
                start = i;
            }
            in_space = false;
            seen_word = true;
        }
    }
    if start < text.len() {
        chunks.push(Chunk::new(&text[start..], usize::from(seen_word)));
    }
    chunks
}

/// Replays a fixed list of generator turns. Turn `i` is emitted on call `i`;
/// every context the generator was shown is recorded.
#[derive(Debug, Clone, Default)]
pub struct ScriptedGenerator {
    turns: Vec<String>,
    next_turn: usize,
    pub contexts: Vec<String>,
}

impl ScriptedGenerator {
    pub fn new(turns: Vec<String>) -> Self {
        Self { turns, next_turn: 0, contexts: Vec::new() }
    }

    pub fn calls(&self) -> usize {
        self.next_turn
    }
}

fn stop_for(text: &str) -> StopSignal {
    if text.contains(crate::protocol::THINK_END) {
        StopSignal::ThinkEnd
    } else if text.trim_end().ends_with(crate::protocol::SKETCH_CLOSE) {
        StopSignal::SketchEnd
    } else {
        StopSignal::NaturalEnd
    }
}

/// Emits at most `budget` tokens of `text`.
fn emit_within(text: &str, budget: usize) -> Generation {
    let mut chunks = Vec::new();
    let mut used = 0;
    for chunk in word_chunks(text) {
        if used + chunk.tokens > budget {
            return Generation { chunks, stop: StopSignal::BudgetExhausted };
        }
        used += chunk.tokens;
        chunks.push(chunk);
    }
    Generation { chunks, stop: stop_for(text) }
}

#[async_trait]
impl Generator for ScriptedGenerator {
    async fn next(&mut self, context: &str, budget: usize) -> Result<Generation, GeneratorError> {
        self.contexts.push(context.to_string());
        let Some(turn) = self.turns.get(self.next_turn) else {
            return Ok(Generation { chunks: Vec::new(), stop: StopSignal::NaturalEnd });
        };
        self.next_turn += 1;
        Ok(emit_within(turn, budget))
    }
}

/// Synthetic policy for mock suites: makes `failed_rounds` failing sketches,
/// then answers correctly with probability `solve_rate`.
#[derive(Debug, Clone)]
pub struct SimulatedGenerator {
    turns: ScriptedGenerator,
    pub solved: bool,
}

impl SimulatedGenerator {
    pub fn new(solve_rate: f64, failed_rounds: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let solved = rng.gen_bool(solve_rate.clamp(0.0, 1.0));
        let padding = rng.gen_range(8..64);
        let mut turns = Vec::with_capacity(failed_rounds + 1);
        for round in 0..failed_rounds {
            turns.push(format!(
                "{}attempt {round}\n<sketch>\ntheorem t : True := by\n  {}\n</sketch>",
                "consider the goal ".repeat(padding / 4 + 1),
                crate::backend::MOCK_FAIL,
            ));
        }
        let tactic = if solved { "trivial" } else { crate::backend::MOCK_FAIL };
        turns.push(format!(
            "{}the proof follows\n</think>\ntheorem t : True := by\n  {tactic}\n",
            "reflect on feedback ".repeat(padding),
        ));
        Self { turns: ScriptedGenerator::new(turns), solved }
    }
}

#[async_trait]
impl Generator for SimulatedGenerator {
    async fn next(&mut self, context: &str, budget: usize) -> Result<Generation, GeneratorError> {
        self.turns.next(context, budget).await
    }
}

/// Mixes a run seed with prompt and trial indices into an independent stream seed.
pub fn stream_seed(seed: u64, prompt_index: u64, trial: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(prompt_index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ trial);
    rng.gen()
}
