use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use sketchloop::backend::{MockBackend, MockOutcome, MockRule};
use sketchloop::broker::{Broker, BrokerConfig};
use sketchloop::protocol::{build_loss_mask, SegmentKind, StopReason};
use sketchloop::rollout::{
    run_group, run_rollout, stream_seed, Chunk, Generation, Generator, GeneratorError, Prompt, RolloutError,
    RolloutLimits, RolloutOptions, ScriptedGenerator, SimulatedGenerator, StopSignal,
};
use sketchloop::verdict::VerdictStatus;

fn broker_with(rules: Vec<MockRule>, workers: usize) -> Broker {
    let rules = Arc::new(rules);
    Broker::start(
        BrokerConfig { worker_count: workers, ..Default::default() },
        Arc::new(move |_| Box::new(MockBackend::shared(rules.clone()))),
    )
}

fn tagged_payload(i: usize) -> String {
    format!(r#"{{"messages":[{{"severity":"info","pos":{{"line":1,"column":0}},"data":"tag-{i}"}}]}}"#)
}

#[tokio::test(start_paused = true)]
async fn feedback_follows_its_sketch() {
    let n = 6;
    let rules = (0..n).map(|i| MockRule::new(format!("TAG{i};"), MockOutcome::Output(tagged_payload(i)))).collect();
    let broker = broker_with(rules, 3);
    let mut turns: Vec<String> = (0..n).map(|i| format!("step {i} <sketch>\nTAG{i};\n</sketch>")).collect();
    turns.push("</think>\nfinal".into());
    let mut gen = ScriptedGenerator::new(turns);
    let rec = run_rollout(&Prompt::new("p", "Q\n"), &mut gen, &broker, &RolloutLimits::default(), &RolloutOptions::default())
        .await
        .unwrap();
    let feedback: Vec<_> = rec.trajectory.segments.iter().filter(|s| s.kind == SegmentKind::ReplFeedback).collect();
    assert_eq!(feedback.len(), n);
    for (i, seg) in feedback.iter().enumerate() {
        assert_eq!(seg.text, tagged_payload(i));
        // the generator saw payload i right before producing turn i + 1
        assert!(gen.contexts[i + 1].ends_with(&format!("<REPL>\n{}\n</REPL>\n", tagged_payload(i))));
    }
    assert_eq!(rec.sketch_verdicts, vec![VerdictStatus::Success; n]);
}

#[tokio::test(start_paused = true)]
async fn twenty_five_rounds() {
    let broker = broker_with(Vec::new(), 2);
    let mut turns: Vec<String> = (0..25).map(|i| format!("round {i} <sketch>lemma l{i} := MOCK_FAIL</sketch>")).collect();
    turns.push("got it </think>theorem t : True := trivial".into());
    let mut gen = ScriptedGenerator::new(turns);
    let rec = run_rollout(&Prompt::new("p", ""), &mut gen, &broker, &RolloutLimits::default(), &RolloutOptions::default())
        .await
        .unwrap();
    assert_eq!(rec.trajectory.repl_rounds(), 25);
    assert_eq!(rec.reward(), 1);
    assert_eq!(rec.final_verdict, Some(VerdictStatus::Success));
    assert_eq!(rec.sketch_verdicts, vec![VerdictStatus::Failed; 25]);
}

#[tokio::test(start_paused = true)]
async fn timeout_and_crash_are_visible_in_context() {
    let broker = broker_with(Vec::new(), 1);
    let mut gen = ScriptedGenerator::new(vec![
        "<sketch>MOCK_SLEEP:100</sketch>".into(),
        "<sketch>MOCK_CRASH</sketch>".into(),
        "</think>ok".into(),
    ]);
    let limits = RolloutLimits { sketch_timeout: Duration::from_secs(1), ..Default::default() };
    let opts = RolloutOptions::default();
    let rec = run_rollout(&Prompt::new("p", ""), &mut gen, &broker, &limits, &opts).await.unwrap();
    assert_eq!(rec.sketch_verdicts, vec![VerdictStatus::Timeout, VerdictStatus::Crash]);
    assert!(gen.contexts[1].ends_with("<REPL>\n{\"error\":\"timeout\"}\n</REPL>\n"));
    assert!(gen.contexts[2].ends_with(&format!("<REPL>\n{}\n</REPL>\n", opts.crash_feedback)));
    assert_eq!(rec.reward(), 1);
}

#[tokio::test(start_paused = true)]
async fn intermediate_verdicts_never_score() {
    let broker = broker_with(Vec::new(), 1);
    let mut gen = ScriptedGenerator::new(vec!["<sketch>fine</sketch>".into(), "</think>MOCK_FAIL".into()]);
    let rec = run_rollout(&Prompt::new("p", ""), &mut gen, &broker, &RolloutLimits::default(), &RolloutOptions::default())
        .await
        .unwrap();
    assert_eq!(rec.sketch_verdicts, vec![VerdictStatus::Success]);
    assert_eq!(rec.reward(), 0);
    assert_eq!(rec.trajectory.stop_reason, StopReason::FinalAnswer);
}

/// Ignores the budget and always emits `burst` one-token words.
struct Greedy {
    burst: usize,
}

#[async_trait]
impl Generator for Greedy {
    async fn next(&mut self, _context: &str, _budget: usize) -> Result<Generation, GeneratorError> {
        let chunks = (0..self.burst).map(|i| Chunk::new(format!("w{i} "), 1)).collect();
        Ok(Generation { chunks, stop: StopSignal::BudgetExhausted })
    }
}

#[tokio::test(start_paused = true)]
async fn token_total_bounded_by_budget_plus_last_emission() {
    let broker = broker_with(Vec::new(), 1);
    for (max, burst) in [(10, 7), (100, 33), (1, 5)] {
        let mut gen = Greedy { burst };
        let limits = RolloutLimits { max_total_tokens: max, ..Default::default() };
        let rec = run_rollout(&Prompt::new("p", ""), &mut gen, &broker, &limits, &RolloutOptions::default()).await.unwrap();
        assert!(rec.trajectory.total_tokens() <= max + burst);
        assert_eq!(rec.trajectory.stop_reason, StopReason::LengthLimit);
        assert_eq!(rec.reward(), 0);
    }
    for max in [5, 20, 64, 200, 1000] {
        let mut gen = SimulatedGenerator::new(1.0, 4, 9);
        let limits = RolloutLimits { max_total_tokens: max, ..Default::default() };
        let rec = run_rollout(&Prompt::new("p", ""), &mut gen, &broker, &limits, &RolloutOptions::default()).await.unwrap();
        assert!(rec.trajectory.total_tokens() <= max, "{} > {max}", rec.trajectory.total_tokens());
        rec.trajectory.validate().unwrap();
        assert_eq!(build_loss_mask(&rec.trajectory).len(), rec.trajectory.total_tokens());
    }
}

#[tokio::test(start_paused = true)]
async fn concurrent_matches_sequential() {
    let broker = broker_with(Vec::new(), 8);
    let limits = RolloutLimits::default();
    let opts = RolloutOptions::default();
    let prompt = Prompt::new("p", "Q");
    let g = 48;
    let make = |i: usize| SimulatedGenerator::new(0.5, i % 4, stream_seed(5, 0, i as u64));
    let concurrent = run_group(&prompt, make, &broker, &limits, &opts, g).await;
    let mut sequential = Vec::new();
    for i in 0..g {
        let mut gen = make(i);
        sequential.push(run_rollout(&prompt, &mut gen, &broker, &limits, &opts).await.unwrap());
    }
    assert_eq!(concurrent.rewards, sequential.iter().map(|r| r.reward()).collect::<Vec<_>>());
    for (a, b) in concurrent.records.iter().zip(&sequential) {
        assert_eq!(a.trajectory, b.trajectory);
    }
    let expected: Vec<u8> = (0..g).map(|i| u8::from(make(i).solved)).collect();
    assert_eq!(concurrent.rewards, expected);
}

#[tokio::test(start_paused = true)]
async fn broker_down_is_an_error_and_group_slot_scores_zero() {
    let broker = broker_with(Vec::new(), 1);
    broker.shutdown().await;
    let mut gen = ScriptedGenerator::new(vec!["<sketch>x</sketch>".into()]);
    let err = run_rollout(&Prompt::new("p", ""), &mut gen, &broker, &RolloutLimits::default(), &RolloutOptions::default())
        .await
        .unwrap_err();
    assert!(matches!(err, RolloutError::Broker(_)));
    let group = run_group(
        &Prompt::new("p", ""),
        |_| ScriptedGenerator::new(vec!["</think>x".into()]),
        &broker,
        &RolloutLimits::default(),
        &RolloutOptions::default(),
        3,
    )
    .await;
    assert_eq!(group.rewards, vec![0, 0, 0]);
    assert!(group.records.iter().all(|r| r.error.is_some()));
}

#[test]
fn record_json_is_flat() {
    let rec = sketchloop::rollout::RolloutRecord::failed("p", "boom");
    let v: serde_json::Value = serde_json::from_str(&rec.to_json_line()).unwrap();
    assert_eq!(v["prompt_id"], "p");
    assert_eq!(v["error"], "boom");
    assert!(v["segments"].is_array());
}
