//! Delimiter protocol for tool-integrated rollouts.
//!
//! A rollout interleaves free-form reasoning, proof sketches wrapped in
//! `<sketch>`/`</sketch>`, verifier feedback injected between `<REPL>` and
//! `</REPL>`, and a final answer that follows `</think>`. This module holds the
//! streaming parser for that grammar, the typed [`Trajectory`] it assembles
//! into, and the loss mask that hides injected feedback from training.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SKETCH_OPEN: &str = "<sketch>";
pub const SKETCH_CLOSE: &str = "</sketch>";
pub const REPL_OPEN: &str = "<REPL>";
pub const REPL_CLOSE: &str = "</REPL>";
pub const THINK_END: &str = "</think>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("`<sketch>` opened inside an unclosed sketch at byte {offset}")]
    MalformedNesting { offset: usize },
    #[error("stream ended inside an unterminated `<REPL>` block")]
    UnterminatedFeedback,
    #[error("no `</think>` delimiter in text")]
    NoFinalAnswer,
    #[error("feedback arity mismatch: {0}")]
    ArityMismatch(String),
    #[error("feedback event in a generated stream; split the transcript first")]
    UnexpectedFeedback,
}

/// Events produced by [`StreamParser`]. Text-bearing events always carry a
/// whole span, so the event list does not depend on how the input was chunked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseEvent {
    /// Reasoning text preceding a delimiter (never empty).
    ReasoningText(String),
    /// Fired once `</sketch>` is fully consumed; carries the code between the tags.
    SketchComplete(String),
    /// Fired once `</think>` is fully consumed.
    ThinkEnd,
    /// Text after `</think>`, emitted when the stream is finished.
    PlainText(String),
    /// Inner text of a `<REPL>...</REPL>` block. Only seen when replaying a
    /// recorded transcript; a live generator never emits feedback itself.
    Feedback(String),
    /// Sketch still open when the stream finished.
    SketchTruncated(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Reasoning,
    Sketch,
    Feedback,
    Answer,
}

/// Incremental parser for the sketch/feedback/think-end grammar.
///
/// Operates on bytes so chunks may split both delimiters and multi-byte
/// characters. Delimiters are exact, case-sensitive ASCII literals.
#[derive(Debug, Clone)]
pub struct StreamParser {
    mode: Mode,
    buf: Vec<u8>,
    // First byte of `buf` that may still begin an unseen delimiter.
    scan_from: usize,
    consumed: usize,
    saw_think_end: bool,
}

impl Default for StreamParser {
    fn default() -> Self {
        Self::new()
    }
}

const LONGEST_DELIMITER: usize = 9; // "</sketch>"

impl StreamParser {
    pub fn new() -> Self {
        Self {
            mode: Mode::Reasoning,
            buf: Vec::new(),
            scan_from: 0,
            consumed: 0,
            saw_think_end: false,
        }
    }

    pub fn feed(&mut self, chunk: &str) -> Result<Vec<ParseEvent>, ProtocolError> {
        self.feed_bytes(chunk.as_bytes())
    }

    pub fn feed_bytes(&mut self, chunk: &[u8]) -> Result<Vec<ParseEvent>, ProtocolError> {
        let mut events = Vec::new();
        self.buf.extend_from_slice(chunk);
        loop {
            let delimiters: &[&str] = match self.mode {
                Mode::Reasoning => &[SKETCH_OPEN, THINK_END, REPL_OPEN],
                Mode::Sketch => &[SKETCH_CLOSE, SKETCH_OPEN],
                Mode::Feedback => &[REPL_CLOSE],
                Mode::Answer => &[],
            };
            let hit = delimiters
                .iter()
                .filter_map(|d| find_bytes(&self.buf, d.as_bytes(), self.scan_from).map(|at| (at, *d)))
                .min_by_key(|(at, _)| *at);
            let Some((at, delim)) = hit else {
                self.scan_from = self.buf.len().saturating_sub(LONGEST_DELIMITER - 1);
                break;
            };
            let span = lossy(&self.buf[..at]);
            let delim_offset = self.consumed + at;
            match (self.mode, delim) {
                (Mode::Reasoning, SKETCH_OPEN) => {
                    push_reasoning(&mut events, span);
                    self.mode = Mode::Sketch;
                }
                (Mode::Reasoning, THINK_END) => {
                    push_reasoning(&mut events, span);
                    events.push(ParseEvent::ThinkEnd);
                    self.saw_think_end = true;
                    self.mode = Mode::Answer;
                }
                (Mode::Reasoning, REPL_OPEN) => {
                    push_reasoning(&mut events, span);
                    self.mode = Mode::Feedback;
                }
                (Mode::Sketch, SKETCH_CLOSE) => {
                    events.push(ParseEvent::SketchComplete(span));
                    self.mode = Mode::Reasoning;
                }
                (Mode::Sketch, SKETCH_OPEN) => {
                    return Err(ProtocolError::MalformedNesting { offset: delim_offset });
                }
                (Mode::Feedback, REPL_CLOSE) => {
                    events.push(ParseEvent::Feedback(span));
                    self.mode = Mode::Reasoning;
                }
                _ => unreachable!("delimiter not searched in this mode"),
            }
            let cut = at + delim.len();
            self.buf.drain(..cut);
            self.consumed += cut;
            self.scan_from = 0;
        }
        Ok(events)
    }

    /// Flushes whatever span is still open at end of stream.
    pub fn finish(&mut self) -> Result<Vec<ParseEvent>, ProtocolError> {
        let span = lossy(&self.buf);
        self.consumed += self.buf.len();
        self.buf.clear();
        self.scan_from = 0;
        let mut events = Vec::new();
        match self.mode {
            Mode::Reasoning => push_reasoning(&mut events, span),
            Mode::Sketch => events.push(ParseEvent::SketchTruncated(span)),
            Mode::Feedback => return Err(ProtocolError::UnterminatedFeedback),
            Mode::Answer => {
                if !span.is_empty() {
                    events.push(ParseEvent::PlainText(span));
                }
            }
        }
        self.mode = Mode::Reasoning;
        Ok(events)
    }

    /// Bytes buffered but not yet attributed to an event.
    pub fn pending_len(&self) -> usize {
        self.buf.len()
    }

    pub fn saw_think_end(&self) -> bool {
        self.saw_think_end
    }

    pub fn in_sketch(&self) -> bool {
        self.mode == Mode::Sketch
    }
}

fn push_reasoning(events: &mut Vec<ParseEvent>, span: String) {
    if !span.is_empty() {
        events.push(ParseEvent::ReasoningText(span));
    }
}

fn lossy(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn find_bytes(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if from >= hay.len() || hay.len() - from < needle.len() {
        return None;
    }
    hay[from..]
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

/// Parses a complete string in one pass.
pub fn parse_all(text: &str) -> Result<Vec<ParseEvent>, ProtocolError> {
    let mut parser = StreamParser::new();
    let mut events = parser.feed(text)?;
    events.extend(parser.finish()?);
    Ok(events)
}

/// Wraps a verifier payload for appending to the generator context.
pub fn inject_feedback(payload: &str) -> String {
    let mut out = String::with_capacity(payload.len() + 18);
    out.push_str(REPL_OPEN);
    out.push('\n');
    out.push_str(payload);
    out.push('\n');
    out.push_str(REPL_CLOSE);
    out.push('\n');
    out
}

/// Returns the candidate proof following the first `</think>`.
pub fn extract_final_answer(full_text: &str) -> Result<String, ProtocolError> {
    let at = full_text.find(THINK_END).ok_or(ProtocolError::NoFinalAnswer)?;
    Ok(clean_answer(&full_text[at + THINK_END.len()..]))
}

/// Strips blank edge lines and one surrounding code fence.
pub fn clean_answer(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let mut lines = trim_blank(&lines);
    if lines.len() >= 2
        && lines[0].trim_start().starts_with("```")
        && lines[lines.len() - 1].trim() == "```"
    {
        lines = trim_blank(&lines[1..lines.len() - 1]);
    }
    lines.join("\n")
}

/// Drops leading and trailing whitespace-only lines.
pub fn strip_blank_lines(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    trim_blank(&lines).join("\n")
}

fn trim_blank<'a, 'b>(lines: &'b [&'a str]) -> &'b [&'a str] {
    let start = lines.iter().position(|l| !l.trim().is_empty());
    let Some(start) = start else { return &[] };
    let end = lines.iter().rposition(|l| !l.trim().is_empty()).unwrap_or(start);
    &lines[start..=end]
}

/// Number of whitespace-separated words. Used as the default token count
/// wherever no real tokenizer is plugged in.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Reasoning,
    Sketch,
    ReplFeedback,
    FinalAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    pub token_len: usize,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Self { kind, text: text.into(), token_len: 0 }
    }

    pub fn with_tokens(kind: SegmentKind, text: impl Into<String>, token_len: usize) -> Self {
        Self { kind, text: text.into(), token_len }
    }

    /// The exact bytes this segment occupies in the flattened trajectory.
    pub fn render(&self) -> Cow<'_, str> {
        match self.kind {
            SegmentKind::Reasoning => Cow::Borrowed(&self.text),
            SegmentKind::Sketch => Cow::Owned(format!("{SKETCH_OPEN}{}{SKETCH_CLOSE}", self.text)),
            SegmentKind::ReplFeedback => Cow::Owned(inject_feedback(&self.text)),
            SegmentKind::FinalAnswer => Cow::Owned(format!("{THINK_END}{}", self.text)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FinalAnswer,
    LengthLimit,
    GeneratorExhausted,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    pub stop_reason: StopReason,
    pub reward: Option<u8>,
    pub segments: Vec<Segment>,
}

impl Trajectory {
    /// Reassembles the full interleaved text, feedback blocks included.
    pub fn flatten(&self) -> String {
        self.segments.iter().map(|s| s.render()).collect()
    }

    pub fn repl_rounds(&self) -> usize {
        self.count(SegmentKind::ReplFeedback)
    }

    pub fn sketch_count(&self) -> usize {
        self.count(SegmentKind::Sketch)
    }

    fn count(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|s| s.kind == kind).count()
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.token_len).sum()
    }

    pub fn final_answer(&self) -> Option<&Segment> {
        self.segments.last().filter(|s| s.kind == SegmentKind::FinalAnswer)
    }

    /// Recomputes every `token_len` from the rendered segment text.
    pub fn retokenize(&mut self, count: impl Fn(&str) -> usize) {
        for seg in &mut self.segments {
            seg.token_len = count(&seg.render());
        }
    }

    /// Checks the ordering invariants, returning a description of the first
    /// violation.
    pub fn validate(&self) -> Result<(), String> {
        let first = self.segments.first().ok_or("trajectory has no segments")?;
        if first.kind != SegmentKind::Reasoning {
            return Err("first segment must be reasoning".into());
        }
        let n = self.segments.len();
        for (i, seg) in self.segments.iter().enumerate() {
            match seg.kind {
                SegmentKind::Sketch => {
                    let answered = self
                        .segments
                        .get(i + 1)
                        .is_some_and(|next| next.kind == SegmentKind::ReplFeedback);
                    let trailing = i + 1 == n && self.stop_reason != StopReason::FinalAnswer;
                    if !answered && !trailing {
                        return Err(format!("sketch at {i} is not followed by feedback"));
                    }
                }
                SegmentKind::ReplFeedback => {
                    if i == 0 || self.segments[i - 1].kind != SegmentKind::Sketch {
                        return Err(format!("feedback at {i} does not follow a sketch"));
                    }
                }
                SegmentKind::FinalAnswer => {
                    if i + 1 != n {
                        return Err("final answer must be the last segment".into());
                    }
                    if self.stop_reason != StopReason::FinalAnswer {
                        return Err("final answer present but stop reason differs".into());
                    }
                }
                SegmentKind::Reasoning => {}
            }
        }
        if self.stop_reason == StopReason::FinalAnswer && self.final_answer().is_none() {
            return Err("stop reason is final_answer but no final answer segment".into());
        }
        if let Some(r) = self.reward {
            if r > 1 {
                return Err(format!("reward {r} is not binary"));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

/// Builds a trajectory from parser events plus the feedback payloads that
/// answered each completed sketch.
///
/// A sketch may go unanswered only if it is the final event. Feedback events
/// must already have been separated out (see [`split_transcript`]).
pub fn assemble(
    prompt_id: &str,
    events: &[ParseEvent],
    feedbacks: &[String],
) -> Result<Trajectory, ProtocolError> {
    let mut segments = Vec::with_capacity(events.len() + feedbacks.len() + 1);
    let mut pending = feedbacks.iter();
    let mut answered = 0usize;
    let mut in_answer = false;
    for (i, event) in events.iter().enumerate() {
        let last = i + 1 == events.len();
        match event {
            ParseEvent::ReasoningText(t) => segments.push(Segment::new(SegmentKind::Reasoning, t.clone())),
            ParseEvent::SketchComplete(code) => {
                segments.push(Segment::new(SegmentKind::Sketch, code.clone()));
                match pending.next() {
                    Some(fb) => {
                        segments.push(Segment::new(SegmentKind::ReplFeedback, fb.clone()));
                        answered += 1;
                    }
                    None if last => {}
                    None => {
                        return Err(ProtocolError::ArityMismatch(format!(
                            "sketch {} has no feedback but the rollout continues",
                            answered + 1
                        )))
                    }
                }
            }
            ParseEvent::SketchTruncated(code) => {
                segments.push(Segment::new(SegmentKind::Sketch, code.clone()));
            }
            ParseEvent::ThinkEnd => {
                segments.push(Segment::new(SegmentKind::FinalAnswer, String::new()));
                in_answer = true;
            }
            ParseEvent::PlainText(t) => {
                if let Some(seg) = segments.last_mut().filter(|_| in_answer) {
                    seg.text.push_str(t);
                } else {
                    segments.push(Segment::new(SegmentKind::FinalAnswer, t.clone()));
                    in_answer = true;
                }
            }
            ParseEvent::Feedback(_) => return Err(ProtocolError::UnexpectedFeedback),
        }
    }
    let leftover = pending.count();
    if leftover > 0 {
        return Err(ProtocolError::ArityMismatch(format!(
            "{leftover} feedback payload(s) without a matching sketch"
        )));
    }
    if segments.first().map(|s| s.kind) != Some(SegmentKind::Reasoning) {
        segments.insert(0, Segment::new(SegmentKind::Reasoning, String::new()));
    }
    let stop_reason = match events.last() {
        Some(ParseEvent::ThinkEnd | ParseEvent::PlainText(_)) => StopReason::FinalAnswer,
        Some(ParseEvent::SketchTruncated(_)) => StopReason::Aborted,
        Some(ParseEvent::SketchComplete(_)) if segments.last().map(|s| s.kind) == Some(SegmentKind::Sketch) => {
            StopReason::Aborted
        }
        _ => StopReason::GeneratorExhausted,
    };
    Ok(Trajectory { prompt_id: prompt_id.to_string(), stop_reason, reward: None, segments })
}

/// Separates a recorded transcript (generated text with feedback blocks inline)
/// into generator events and feedback payloads.
///
/// Payloads are unwrapped from the [`inject_feedback`] framing: one newline
/// after `<REPL>`, one before `</REPL>` and one after `</REPL>` are removed.
/// Whitespace between `</sketch>` and the following `<REPL>` is folded away.
pub fn split_transcript(text: &str) -> Result<(Vec<ParseEvent>, Vec<String>), ProtocolError> {
    let raw = parse_all(text)?;
    let mut events = Vec::with_capacity(raw.len());
    let mut feedbacks = Vec::new();
    let mut strip_next_newline = false;
    let mut iter = raw.into_iter().peekable();
    while let Some(event) = iter.next() {
        match event {
            ParseEvent::Feedback(inner) => {
                let inner = inner.strip_prefix('\n').unwrap_or(&inner);
                let inner = inner.strip_suffix('\n').unwrap_or(inner);
                feedbacks.push(inner.to_string());
                strip_next_newline = true;
                continue;
            }
            ParseEvent::ReasoningText(t) => {
                let after_sketch = matches!(events.last(), Some(ParseEvent::SketchComplete(_)));
                if after_sketch
                    && t.trim().is_empty()
                    && matches!(iter.peek(), Some(ParseEvent::Feedback(_)))
                {
                    continue;
                }
                let t = if strip_next_newline { t.strip_prefix('\n').map(str::to_string).unwrap_or(t) } else { t };
                if !t.is_empty() {
                    events.push(ParseEvent::ReasoningText(t));
                }
            }
            other => events.push(other),
        }
        strip_next_newline = false;
    }
    Ok((events, feedbacks))
}

/// Parses a recorded transcript straight into a trajectory with token counts
/// computed by `count` over each rendered segment.
pub fn trajectory_from_transcript(
    prompt_id: &str,
    text: &str,
    count: impl Fn(&str) -> usize,
) -> Result<Trajectory, ProtocolError> {
    let (events, feedbacks) = split_transcript(text)?;
    let mut traj = assemble(prompt_id, &events, &feedbacks)?;
    traj.retokenize(count);
    Ok(traj)
}

/// Per-token inclusion flags for the flattened trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    pub included: Vec<bool>,
}

impl LossMask {
    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    /// Compact `1`/`0` rendering used on the wire.
    pub fn to_bitstring(&self) -> String {
        self.included.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Some(true),
                '0' => Some(false),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(|included| Self { included })
    }
}

/// Feedback tokens, wrapping delimiters included, are excluded from the loss.
pub fn build_loss_mask(trajectory: &Trajectory) -> LossMask {
    let mut included = Vec::with_capacity(trajectory.total_tokens());
    for seg in &trajectory.segments {
        let keep = seg.kind != SegmentKind::ReplFeedback;
        included.extend(std::iter::repeat_n(keep, seg.token_len));
    }
    LossMask { included }
}
