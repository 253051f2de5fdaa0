//! Proof-checker output parsing, verdict classification and the binary reward.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
    #[serde(alias = "information", alias = "trace")]
    Info,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
            Severity::Info => "info",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    /// 1-based.
    pub line: u32,
    /// 0-based.
    pub column: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplMessage {
    pub severity: Severity,
    pub pos: Position,
    #[serde(rename = "endPos", default)]
    pub end_pos: Option<Position>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SorryRecord {
    #[serde(rename = "proofState", default)]
    pub proof_state: Option<i64>,
    pub pos: Position,
    #[serde(rename = "endPos", default)]
    pub end_pos: Option<Position>,
    pub goal: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplOutput {
    pub messages: Vec<ReplMessage>,
    pub sorries: Vec<SorryRecord>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("checker output is not JSON: {0}")]
    NotJson(String),
    #[error("checker output is not a JSON object")]
    NotObject,
    #[error("checker reported a command error: {0}")]
    CommandError(String),
    #[error("malformed checker output: {0}")]
    Schema(String),
}

#[derive(Deserialize)]
struct RawOutput {
    #[serde(default)]
    messages: Vec<ReplMessage>,
    #[serde(default)]
    sorries: Vec<SorryRecord>,
}

/// Extracts `messages` and `sorries` from one REPL response. Other fields are
/// ignored here and survive only in the verdict's raw text.
pub fn parse_repl_output(raw: &str) -> Result<ReplOutput, ParseError> {
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| ParseError::NotJson(e.to_string()))?;
    let obj = value.as_object().ok_or(ParseError::NotObject)?;
    // The REPL answers an unusable command with a bare {"message": ...}.
    if let Some(msg) = obj.get("message").and_then(|m| m.as_str()) {
        if !obj.contains_key("messages") && !obj.contains_key("sorries") {
            return Err(ParseError::CommandError(msg.to_string()));
        }
    }
    let parsed: RawOutput =
        serde_json::from_value(value).map_err(|e| ParseError::Schema(e.to_string()))?;
    Ok(ReplOutput { messages: parsed.messages, sorries: parsed.sorries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictStatus {
    Success,
    Failed,
    Incomplete,
    Timeout,
    Crash,
}

impl VerdictStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictStatus::Success => "success",
            VerdictStatus::Failed => "failed",
            VerdictStatus::Incomplete => "incomplete",
            VerdictStatus::Timeout => "timeout",
            VerdictStatus::Crash => "crash",
        }
    }
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerdictStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "success" => VerdictStatus::Success,
            "failed" => VerdictStatus::Failed,
            "incomplete" => VerdictStatus::Incomplete,
            "timeout" => VerdictStatus::Timeout,
            "crash" => VerdictStatus::Crash,
            other => return Err(format!("unknown verdict status `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierVerdict {
    pub status: VerdictStatus,
    pub messages: Vec<ReplMessage>,
    pub sorries: Vec<SorryRecord>,
    pub raw: String,
    pub elapsed: Duration,
}

impl VerifierVerdict {
    pub fn errors(&self) -> impl Iterator<Item = &ReplMessage> {
        self.messages.iter().filter(|m| m.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ReplMessage> {
        self.messages.iter().filter(|m| m.severity == Severity::Warning)
    }
}

/// Precedence: Timeout > Crash > Failed > Incomplete > Success. Crash is only
/// reachable through [`classify_outcome`]; warnings never fail a proof.
pub fn classify(
    messages: Vec<ReplMessage>,
    sorries: Vec<SorryRecord>,
    elapsed: Duration,
    timed_out: bool,
) -> VerifierVerdict {
    let status = if timed_out {
        VerdictStatus::Timeout
    } else if messages.iter().any(|m| m.severity == Severity::Error) {
        VerdictStatus::Failed
    } else if !sorries.is_empty() {
        VerdictStatus::Incomplete
    } else {
        VerdictStatus::Success
    };
    VerifierVerdict { status, messages, sorries, raw: String::new(), elapsed }
}

/// What a backend produced for one check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    Output(String),
    TimedOut,
    Crashed(String),
}

pub fn classify_outcome(outcome: &CheckOutcome, elapsed: Duration) -> VerifierVerdict {
    match outcome {
        CheckOutcome::TimedOut => {
            let mut v = classify(Vec::new(), Vec::new(), elapsed, true);
            v.raw = String::new();
            v
        }
        CheckOutcome::Crashed(reason) => crash_verdict(reason.clone(), elapsed),
        CheckOutcome::Output(raw) => match parse_repl_output(raw) {
            Ok(out) => {
                let mut v = classify(out.messages, out.sorries, elapsed, false);
                v.raw = raw.clone();
                v
            }
            Err(_) => crash_verdict(raw.clone(), elapsed),
        },
    }
}

fn crash_verdict(raw: String, elapsed: Duration) -> VerifierVerdict {
    VerifierVerdict {
        status: VerdictStatus::Crash,
        messages: Vec::new(),
        sorries: Vec::new(),
        raw,
        elapsed,
    }
}

/// An empty submission is never handed to a checker; it fails with a
/// synthesized diagnostic.
pub fn empty_input_verdict() -> VerifierVerdict {
    let raw = r#"{"messages":[{"severity":"error","pos":{"line":1,"column":0},"endPos":null,"data":"empty input: nothing to check"}]}"#;
    classify_outcome(&CheckOutcome::Output(raw.to_string()), Duration::ZERO)
}

/// 1 iff the final answer verified cleanly.
pub fn reward(verdict: &VerifierVerdict) -> u8 {
    u8::from(verdict.status == VerdictStatus::Success)
}
