//! Verifier backends: a deterministic mock and a subprocess adapter that talks
//! to a proof-checker REPL over its line-oriented JSON protocol.

use std::path::PathBuf;
use std::process::Stdio;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("check exceeded its {0:?} timeout")]
    TimedOut(Duration),
    #[error("backend crashed: {0}")]
    Crashed(String),
}

/// One checker per worker. Implementations must return within
/// `timeout` plus a small grace, and `reset` must leave the backend usable
/// after a crash.
#[async_trait]
pub trait VerifierBackend: Send {
    async fn check(&mut self, code: &str, timeout: Duration) -> Result<String, BackendError>;
    async fn reset(&mut self) -> Result<(), BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MockOutcome {
    /// Reply with this raw text.
    Output(String),
    /// Sleep, then reply `{}`.
    Delay(Duration),
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub trigger: String,
    pub outcome: MockOutcome,
}

impl MockRule {
    pub fn new(trigger: impl Into<String>, outcome: MockOutcome) -> Self {
        Self { trigger: trigger.into(), outcome }
    }
}

pub const MOCK_FAIL: &str = "MOCK_FAIL";
pub const MOCK_SLEEP: &str = "MOCK_SLEEP:";
pub const MOCK_CRASH: &str = "MOCK_CRASH";

/// Decides the mock's response. Configured rules are tried first, in
/// declaration order; then the built-in markers; then `{}`.
pub fn mock_response(rules: &[MockRule], code: &str) -> MockOutcome {
    if let Some(rule) = rules.iter().find(|r| code.contains(&r.trigger)) {
        return rule.outcome.clone();
    }
    if code.contains(MOCK_CRASH) {
        return MockOutcome::Crash;
    }
    if let Some(secs) = sleep_marker(code) {
        return MockOutcome::Delay(Duration::from_secs_f64(secs));
    }
    if code.contains(MOCK_FAIL) {
        return MockOutcome::Output(mock_error_output(code));
    }
    if code.contains("sorry") {
        return MockOutcome::Output(mock_sorry_output(code));
    }
    MockOutcome::Output("{}".to_string())
}

fn sleep_marker(code: &str) -> Option<f64> {
    let at = code.find(MOCK_SLEEP)? + MOCK_SLEEP.len();
    let digits: String = code[at..]
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.')
        .collect();
    digits.parse::<f64>().ok().filter(|s| s.is_finite() && *s >= 0.0)
}

fn line_col(code: &str, byte: usize) -> (u32, u32) {
    let before = &code[..byte];
    let line = before.matches('\n').count() as u32 + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) as u32;
    (line, col)
}

fn mock_error_output(code: &str) -> String {
    let (line, column) = line_col(code, code.find(MOCK_FAIL).unwrap_or(0));
    serde_json::json!({
        "messages": [{
            "severity": "error",
            "pos": {"line": line, "column": column},
            "endPos": {"line": line, "column": column + MOCK_FAIL.len() as u32},
            "data": "unknown tactic (mock failure)"
        }]
    })
    .to_string()
}

fn mock_sorry_output(code: &str) -> String {
    let (line, column) = line_col(code, code.find("sorry").unwrap_or(0));
    serde_json::json!({
        "sorries": [{
            "proofState": 0,
            "pos": {"line": line, "column": column},
            "endPos": {"line": line, "column": column + 5},
            "goal": "⊢ False"
        }],
        "messages": [{
            "severity": "warning",
            "pos": {"line": line, "column": column},
            "endPos": {"line": line, "column": column + 5},
            "data": "declaration uses 'sorry'"
        }]
    })
    .to_string()
}

/// Deterministic in-process backend driven by [`mock_response`].
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    rules: std::sync::Arc<Vec<MockRule>>,
    crashed: bool,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules: std::sync::Arc::new(rules), crashed: false }
    }

    pub fn shared(rules: std::sync::Arc<Vec<MockRule>>) -> Self {
        Self { rules, crashed: false }
    }
}

#[async_trait]
impl VerifierBackend for MockBackend {
    async fn check(&mut self, code: &str, timeout: Duration) -> Result<String, BackendError> {
        if self.crashed {
            return Err(BackendError::Crashed("backend not reset after crash".into()));
        }
        match mock_response(&self.rules, code) {
            MockOutcome::Output(raw) => Ok(raw),
            MockOutcome::Crash => {
                self.crashed = true;
                Err(BackendError::Crashed("injected crash".into()))
            }
            MockOutcome::Delay(d) if d > timeout => {
                tokio::time::sleep(timeout).await;
                Err(BackendError::TimedOut(timeout))
            }
            MockOutcome::Delay(d) => {
                tokio::time::sleep(d).await;
                Ok("{}".to_string())
            }
        }
    }

    async fn reset(&mut self) -> Result<(), BackendError> {
        self.crashed = false;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub cwd: Option<PathBuf>,
}

impl ReplConfig {
    /// Splits a command line on whitespace; no quoting is supported.
    pub fn from_command_line(cmd: &str, cwd: Option<PathBuf>) -> Option<Self> {
        let command: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        (!command.is_empty()).then_some(Self { command, cwd })
    }
}

/// Serialized request for one check: a single-line JSON object followed by a
/// blank line.
pub fn encode_request(code: &str) -> String {
    let mut line = serde_json::json!({ "cmd": code }).to_string();
    line.push_str("\n\n");
    line
}

struct ReplProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Speaks to a REPL subprocess. The process is started lazily, killed on
/// timeout or crash, and restarted by `reset` or the next check.
pub struct SubprocessBackend {
    config: ReplConfig,
    proc: Option<ReplProcess>,
}

impl SubprocessBackend {
    pub fn new(config: ReplConfig) -> Self {
        Self { config, proc: None }
    }

    fn spawn(&self) -> Result<ReplProcess, BackendError> {
        let (program, args) = self
            .config
            .command
            .split_first()
            .ok_or_else(|| BackendError::Crashed("empty REPL command".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .kill_on_drop(true);
        if let Some(dir) = &self.config.cwd {
            cmd.current_dir(dir);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| BackendError::Crashed(format!("spawn `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ReplProcess { child, stdin, stdout })
    }

    async fn kill(&mut self) {
        if let Some(mut p) = self.proc.take() {
            let _ = p.child.start_kill();
            let _ = p.child.wait().await;
        }
    }

    async fn exchange(proc: &mut ReplProcess, request: &str) -> Result<String, BackendError> {
        let io_err = |e: std::io::Error| BackendError::Crashed(e.to_string());
        proc.stdin.write_all(request.as_bytes()).await.map_err(io_err)?;
        proc.stdin.flush().await.map_err(io_err)?;
        let mut response = String::new();
        let mut line = String::new();
        loop {
            line.clear();
            let n = proc.stdout.read_line(&mut line).await.map_err(io_err)?;
            if n == 0 {
                return Err(BackendError::Crashed("REPL closed its output".into()));
            }
            if line.trim().is_empty() {
                if response.is_empty() {
                    continue;
                }
                break;
            }
            response.push_str(&line);
        }
        while response.ends_with('\n') || response.ends_with('\r') {
            response.pop();
        }
        Ok(response)
    }
}

#[async_trait]
impl VerifierBackend for SubprocessBackend {
    async fn check(&mut self, code: &str, timeout: Duration) -> Result<String, BackendError> {
        if self.proc.is_none() {
            self.proc = Some(self.spawn()?);
        }
        let request = encode_request(code);
        let proc = self.proc.as_mut().expect("spawned above");
        match tokio::time::timeout(timeout, Self::exchange(proc, &request)).await {
            Ok(Ok(raw)) => Ok(raw),
            Ok(Err(e)) => {
                self.kill().await;
                Err(e)
            }
            Err(_) => {
                self.kill().await;
                Err(BackendError::TimedOut(timeout))
            }
        }
    }

    async fn reset(&mut self) -> Result<(), BackendError> {
        self.kill().await;
        self.proc = Some(self.spawn()?);
        Ok(())
    }
}
