use std::time::Duration;

use sketchloop::verdict::{classify, classify_outcome, reward, CheckOutcome, Position, ReplMessage, Severity, SorryRecord, VerdictStatus};

fn msg(severity: Severity) -> ReplMessage {
    ReplMessage { severity, pos: Position { line: 1, column: 0 }, end_pos: None, data: "m".into() }
}

fn sorry() -> SorryRecord {
    SorryRecord { proof_state: Some(0), pos: Position { line: 1, column: 0 }, end_pos: None, goal: "⊢ False".into() }
}

#[test]
fn exhaustive_precedence_table() {
    use VerdictStatus::*;
    // (errors, sorries, timed_out) -> status
    let table = [
        (false, false, false, Success),
        (false, false, true, Timeout),
        (false, true, false, Incomplete),
        (false, true, true, Timeout),
        (true, false, false, Failed),
        (true, false, true, Timeout),
        (true, true, false, Failed),
        (true, true, true, Timeout),
    ];
    for elapsed in [Duration::ZERO, Duration::from_millis(3), Duration::from_secs(90)] {
        for (errors, sorries, timed_out, want) in table {
            let mut messages = vec![msg(Severity::Warning), msg(Severity::Info)];
            if errors {
                messages.push(msg(Severity::Error));
            }
            let s = if sorries { vec![sorry()] } else { vec![] };
            let v = classify(messages, s, elapsed, timed_out);
            assert_eq!(v.status, want, "errors={errors} sorries={sorries} timeout={timed_out}");
            assert_eq!(v.elapsed, elapsed);
            assert_eq!(reward(&v) == 1, want == Success);
        }
    }
}

#[test]
fn outcome_mapping() {
    let status = |o: CheckOutcome| classify_outcome(&o, Duration::ZERO).status;
    assert_eq!(status(CheckOutcome::TimedOut), VerdictStatus::Timeout);
    assert_eq!(status(CheckOutcome::Crashed("gone".into())), VerdictStatus::Crash);
    assert_eq!(status(CheckOutcome::Output("{}".into())), VerdictStatus::Success);
    assert_eq!(status(CheckOutcome::Output("".into())), VerdictStatus::Crash);
    assert_eq!(status(CheckOutcome::Output("[1]".into())), VerdictStatus::Crash);
    assert_eq!(status(CheckOutcome::Output(r#"{"message":"unknown command"}"#.into())), VerdictStatus::Crash);
    assert_eq!(
        status(CheckOutcome::Output(r#"{"messages":[{"severity":"information","pos":{"line":1,"column":0},"data":"x"}]}"#.into())),
        VerdictStatus::Success
    );
}

#[test]
fn status_strings_round_trip() {
    use VerdictStatus::*;
    for s in [Success, Failed, Incomplete, Timeout, Crash] {
        assert_eq!(s.as_str().parse::<VerdictStatus>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
    }
    assert!("Success".parse::<VerdictStatus>().is_err());
}
