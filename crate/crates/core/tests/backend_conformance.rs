//! The same contract checks run against the in-process mock and a REPL
//! subprocess (the binary's hidden `stub-repl` command).

use std::time::Duration;

use sketchloop::backend::{mock_response, BackendError, MockBackend, MockOutcome, MockRule, ReplConfig, SubprocessBackend, VerifierBackend};
use sketchloop::verdict::{classify_outcome, CheckOutcome, VerdictStatus};

fn stub() -> SubprocessBackend {
    SubprocessBackend::new(ReplConfig { command: vec![env!("CARGO_BIN_EXE_sketchloop").into(), "stub-repl".into()], cwd: None })
}

fn stub_with_rules(path: &std::path::Path) -> SubprocessBackend {
    SubprocessBackend::new(ReplConfig {
        command: vec![
            env!("CARGO_BIN_EXE_sketchloop").into(),
            "--mock-rules".into(),
            path.display().to_string(),
            "stub-repl".into(),
        ],
        cwd: None,
    })
}

async fn status_of(b: &mut dyn VerifierBackend, code: &str, timeout: Duration) -> VerdictStatus {
    let outcome = match b.check(code, timeout).await {
        Ok(raw) => CheckOutcome::Output(raw),
        Err(BackendError::TimedOut(_)) => CheckOutcome::TimedOut,
        Err(BackendError::Crashed(r)) => {
            b.reset().await.unwrap();
            CheckOutcome::Crashed(r)
        }
    };
    classify_outcome(&outcome, Duration::ZERO).status
}

const SCRIPT: &[(&str, VerdictStatus)] = &[
    ("theorem t : True := trivial", VerdictStatus::Success),
    ("theorem t : False := by\n  MOCK_FAIL", VerdictStatus::Failed),
    ("theorem t : False := by\n  sorry", VerdictStatus::Incomplete),
    ("MOCK_CRASH", VerdictStatus::Crash),
    ("after crash", VerdictStatus::Success),
    ("MOCK_SLEEP:30", VerdictStatus::Timeout),
    ("after timeout", VerdictStatus::Success),
    ("MOCK_SLEEP:0.05", VerdictStatus::Success),
    ("unicode ∀ x, x = x", VerdictStatus::Success),
];

async fn run_script(b: &mut dyn VerifierBackend) -> Vec<VerdictStatus> {
    let mut out = Vec::new();
    for (code, _) in SCRIPT {
        out.push(status_of(b, code, Duration::from_millis(1500)).await);
    }
    out
}

#[tokio::test]
async fn mock_and_subprocess_agree() {
    let expected: Vec<_> = SCRIPT.iter().map(|s| s.1).collect();
    let mut mock = MockBackend::default();
    assert_eq!(run_script(&mut mock).await, expected);
    let mut sub = stub();
    assert_eq!(run_script(&mut sub).await, expected);
}

#[tokio::test]
async fn subprocess_outputs_parse_identically() {
    let mut sub = stub();
    for code in ["ok", "MOCK_FAIL", "x\n sorry"] {
        let raw = sub.check(code, Duration::from_secs(5)).await.unwrap();
        let MockOutcome::Output(direct) = mock_response(&[], code) else { panic!() };
        let a: serde_json::Value = serde_json::from_str(&raw).unwrap();
        let b: serde_json::Value = serde_json::from_str(&direct).unwrap();
        assert_eq!(a, b);
    }
}

#[tokio::test]
async fn killed_mid_check_then_usable() {
    let mut sub = stub();
    let err = sub.check("MOCK_SLEEP:30", Duration::from_millis(200)).await.unwrap_err();
    assert_eq!(err, BackendError::TimedOut(Duration::from_millis(200)));
    assert_eq!(sub.check("fine", Duration::from_secs(5)).await.unwrap(), "{}");
    assert!(matches!(sub.check("MOCK_CRASH", Duration::from_secs(5)).await, Err(BackendError::Crashed(_))));
    sub.reset().await.unwrap();
    assert_eq!(sub.check("fine", Duration::from_secs(5)).await.unwrap(), "{}");
}

#[tokio::test]
async fn custom_rules_reach_the_subprocess() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rules.jsonl");
    let rule = MockRule::new("special", MockOutcome::Output(r#"{"messages":[{"severity":"warning","pos":{"line":1,"column":0},"data":"w"}]}"#.into()));
    std::fs::write(&path, serde_json::to_string(&rule).unwrap() + "\n").unwrap();
    let mut sub = stub_with_rules(&path);
    let mut mock = MockBackend::new(vec![rule]);
    for b in [&mut sub as &mut dyn VerifierBackend, &mut mock] {
        assert_eq!(status_of(b, "a special proof", Duration::from_secs(5)).await, VerdictStatus::Success);
    }
}

#[tokio::test]
async fn missing_program_is_a_crash() {
    let mut b = SubprocessBackend::new(ReplConfig { command: vec!["/nonexistent/repl".into()], cwd: None });
    assert!(matches!(b.check("x", Duration::from_secs(1)).await, Err(BackendError::Crashed(_))));
}

#[test]
fn mock_is_pure() {
    let rules = vec![MockRule::new("k", MockOutcome::Crash)];
    for code in ["a", "k", "MOCK_FAIL\nx", "sorry", "MOCK_SLEEP:2"] {
        assert_eq!(mock_response(&rules, code), mock_response(&rules, code));
    }
}
