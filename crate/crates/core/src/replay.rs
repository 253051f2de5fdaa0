//! Turning a recorded transcript back into a scripted generator plus mock
//! verifier rules, so a rollout can be replayed through the live engine.

use serde::{Deserialize, Serialize};

use crate::backend::{MockOutcome, MockRule};
use crate::protocol::{strip_blank_lines, trajectory_from_transcript, whitespace_tokens, ProtocolError, SegmentKind, Trajectory};
use crate::rollout::ScriptedGenerator;

/// Everything needed to replay one transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayScript {
    pub prompt_id: String,
    /// Generator output between feedback blocks.
    pub turns: Vec<String>,
    /// One rule per answered sketch, longest trigger first.
    pub rules: Vec<MockRule>,
}

impl ReplayScript {
    pub fn from_transcript(prompt_id: &str, text: &str) -> Result<Self, ProtocolError> {
        let trajectory = trajectory_from_transcript(prompt_id, text, whitespace_tokens)?;
        Ok(Self {
            prompt_id: prompt_id.to_string(),
            turns: turns_of(&trajectory),
            rules: rules_of(&trajectory),
        })
    }

    pub fn generator(&self) -> ScriptedGenerator {
        ScriptedGenerator::new(self.turns.clone())
    }
}

/// Splits the generated text of a trajectory at each feedback block.
pub fn turns_of(trajectory: &Trajectory) -> Vec<String> {
    let mut turns = Vec::new();
    let mut current = String::new();
    for seg in &trajectory.segments {
        if seg.kind == SegmentKind::ReplFeedback {
            turns.push(std::mem::take(&mut current));
        } else {
            current.push_str(&seg.render());
        }
    }
    if !current.is_empty() {
        turns.push(current);
    }
    turns
}

/// Maps each answered sketch's code to the payload that followed it.
///
/// Rules are ordered longest trigger first because later sketches often
/// extend earlier ones and matching is by substring.
pub fn rules_of(trajectory: &Trajectory) -> Vec<MockRule> {
    let mut rules: Vec<MockRule> = trajectory
        .segments
        .windows(2)
        .filter(|w| w[0].kind == SegmentKind::Sketch && w[1].kind == SegmentKind::ReplFeedback)
        .map(|w| MockRule::new(strip_blank_lines(&w[0].text), MockOutcome::Output(w[1].text.clone())))
        .filter(|r| !r.trigger.is_empty())
        .collect();
    rules.sort_by_key(|r| std::cmp::Reverse(r.trigger.len()));
    rules
}

/// Feedback payloads of a transcript in order.
pub fn payloads_of(trajectory: &Trajectory) -> Vec<&str> {
    trajectory
        .segments
        .iter()
        .filter(|s| s.kind == SegmentKind::ReplFeedback)
        .map(|s| s.text.as_str())
        .collect()
}
