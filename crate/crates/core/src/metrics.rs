//! Evaluation metrics: pass@1, REPL-interaction histograms and
//! generation-length scaling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Trajectory;

/// Maximum generation lengths evaluated by default.
pub const DEFAULT_BUDGETS: [usize; 5] = [4096, 8192, 12288, 16384, 20480];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub reward: u8,
    /// Token position at which the trial finished.
    pub finish_token: usize,
    pub repl_rounds: usize,
}

impl TrialOutcome {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self { reward: t.reward.unwrap_or(0), finish_token: t.total_tokens(), repl_rounds: t.repl_rounds() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemTrials {
    pub problem_id: String,
    pub trials: Vec<TrialOutcome>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("trials per problem must be at least 1")]
    ZeroTrials,
    #[error("problem {problem} has {got} trials, expected {expected}")]
    TrialCount { problem: String, got: usize, expected: usize },
}

/// Every problem carries exactly `k` trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRun {
    problems: Vec<ProblemTrials>,
    k: usize,
}

impl EvalRun {
    pub fn new(problems: Vec<ProblemTrials>, k: usize) -> Result<Self, EvalError> {
        if k == 0 {
            return Err(EvalError::ZeroTrials);
        }
        if let Some(p) = problems.iter().find(|p| p.trials.len() != k) {
            return Err(EvalError::TrialCount { problem: p.problem_id.clone(), got: p.trials.len(), expected: k });
        }
        Ok(Self { problems, k })
    }

    /// Groups trajectories by prompt id, in first-appearance order.
    pub fn from_trajectories(trajectories: &[Trajectory], k: usize) -> Result<Self, EvalError> {
        let mut order: Vec<String> = Vec::new();
        let mut by_id: BTreeMap<&str, Vec<TrialOutcome>> = BTreeMap::new();
        for t in trajectories {
            let entry = by_id.entry(&t.prompt_id).or_default();
            if entry.is_empty() {
                order.push(t.prompt_id.clone());
            }
            entry.push(TrialOutcome::from_trajectory(t));
        }
        let problems = order
            .into_iter()
            .map(|id| {
                let trials = by_id.remove(id.as_str()).unwrap_or_default();
                ProblemTrials { problem_id: id, trials }
            })
            .collect();
        Self::new(problems, k)
    }

    pub fn problems(&self) -> &[ProblemTrials] {
        &self.problems
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Macro average over problems of the per-problem success fraction.
pub fn pass_at_1(run: &EvalRun) -> f64 {
    pass_at_1_by(run, |t| t.reward == 1)
}

fn pass_at_1_by(run: &EvalRun, success: impl Fn(&TrialOutcome) -> bool) -> f64 {
    if run.problems.is_empty() {
        return 0.0;
    }
    let total: f64 = run
        .problems
        .iter()
        .map(|p| p.trials.iter().filter(|t| success(t)).count() as f64 / run.k as f64)
        .sum();
    total / run.problems.len() as f64
}

/// REPL round counts over successful trajectories only.
pub fn interaction_histogram<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> BTreeMap<usize, usize> {
    rounds_histogram(
        trajectories.into_iter().filter(|t| t.reward == Some(1)).map(Trajectory::repl_rounds),
    )
}

pub fn rounds_histogram(rounds: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for r in rounds {
        *hist.entry(r).or_insert(0) += 1;
    }
    hist
}

/// pass@1 per budget, counting a trial as solved under budget `L` only if it
/// succeeded and finished by token `L`.
pub fn length_scaling(run: &EvalRun, budgets: &[usize]) -> Vec<(usize, f64)> {
    budgets
        .iter()
        .map(|&budget| (budget, pass_at_1_by(run, |t| t.reward == 1 && t.finish_token <= budget)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub problems: usize,
    pub trials_per_problem: usize,
    pub pass_at_1: f64,
    pub interaction_histogram: BTreeMap<usize, usize>,
    pub length_scaling: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn build(run: &EvalRun, trajectories: &[Trajectory], budgets: &[usize]) -> Self {
        Self {
            problems: run.problems.len(),
            trials_per_problem: run.k,
            pass_at_1: pass_at_1(run),
            interaction_histogram: interaction_histogram(trajectories),
            length_scaling: length_scaling(run, budgets),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "problems: {}  trials/problem: {}", self.problems, self.trials_per_problem);
        let _ = writeln!(out, "pass@1: {:.4}", self.pass_at_1);
        let _ = writeln!(out, "\nmax tokens    pass@1");
        for (budget, p) in &self.length_scaling {
            let _ = writeln!(out, "{budget:>10}    {:.1}%", p * 100.0);
        }
        let _ = writeln!(out, "\nrepl rounds   successes");
        for (rounds, n) in &self.interaction_histogram {
            let _ = writeln!(out, "{rounds:>11}   {n}");
        }
        out
    }
}

/// Parses a comma-separated budget list like `4096,8192`.
pub fn parse_budgets(s: &str) -> Result<Vec<usize>, String> {
    let mut budgets = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().map_err(|e| format!("bad budget `{p}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if budgets.is_empty() {
        return Err("no budgets given".into());
    }
    budgets.sort_unstable();
    budgets.dedup();
    Ok(budgets)
}
