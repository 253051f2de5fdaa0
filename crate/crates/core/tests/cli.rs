use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_sketchloop");
const TRANSCRIPT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/appendix_transcript.txt");

fn cmd() -> Command {
    let mut c = Command::new(BIN);
    for (k, _) in std::env::vars() {
        if k.starts_with("HARNESS_") || ["BROKER_LISTEN", "WORKER_COUNT", "RECYCLE_THRESHOLD", "DEFAULT_TIMEOUT_S", "REPL_CMD", "REPL_CWD"].contains(&k.as_str()) {
            c.env_remove(k);
        }
    }
    c
}

fn run(c: &mut Command) -> Output {
    c.output().unwrap()
}

fn simulated_fixtures(dir: &Path, n: usize) -> std::path::PathBuf {
    let path = dir.join("fixtures.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for i in 0..n {
        writeln!(f, r#"{{"prompt_id":"sim{i}","solve_rate":0.6,"failed_rounds":{}}}"#, i % 3).unwrap();
    }
    path
}

#[test]
fn rollout_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let fx = simulated_fixtures(dir.path(), 10);
    let go = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = run(cmd().args(["rollout", "--fixtures"]).arg(&fx).args(["--trials", "4", "--group-size", "2", "--seed", seed, "--out"]).arg(&out));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = go("7", "a.jsonl");
    let b = go("7", "b.jsonl");
    let c = go("8", "c.jsonl");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let lines: Vec<&str> = std::str::from_utf8(&a).unwrap().lines().collect();
    assert_eq!(lines.len(), 40);
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["reward"] == 0 || v["reward"] == 1);
        assert!(v["sketch_verdicts"].is_array());
    }
}

#[test]
fn appendix_rollout_report() {
    let o = run(cmd().args(["rollout", "--transcript", TRANSCRIPT, "--trials", "2"]));
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 2);
    let report = String::from_utf8(o.stderr).unwrap();
    assert!(report.contains("pass@1: 1.0000"), "{report}");
    assert!(report.contains("trajectories: 2"));
}

#[test]
fn report_reads_rollout_output() {
    let dir = tempfile::tempdir().unwrap();
    let fx = simulated_fixtures(dir.path(), 3);
    let out = dir.path().join("r.jsonl");
    assert!(run(cmd().args(["rollout", "--fixtures"]).arg(&fx).args(["--trials", "5", "--out"]).arg(&out)).status.success());
    let o = run(cmd().arg("report").arg(&out).arg("--json"));
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["problems"], 3);
    assert_eq!(v["trials_per_problem"], 5);
    assert_eq!(v["length_scaling"].as_array().unwrap().len(), 5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.lean");
    std::fs::write(&good, "theorem t : True := trivial\n").unwrap();
    let bad = dir.path().join("bad.lean");
    std::fs::write(&bad, "theorem t : False := by\n  MOCK_FAIL\n").unwrap();

    let o = run(cmd().arg("check").arg(&good));
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("status: success"));

    let o = run(cmd().arg("check").arg(&bad));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("2:2: error:"));

    assert_eq!(run(cmd().args(["--workers", "0", "check"]).arg(&good)).status.code(), Some(2));
    assert_eq!(run(cmd().args(["--backend", "repl", "check"]).arg(&good)).status.code(), Some(2));
    assert_eq!(run(cmd().args(["--no-such-flag"])).status.code(), Some(2));
    assert_eq!(run(cmd().args(["check", "/nonexistent/file"])).status.code(), Some(2));
    assert_eq!(run(cmd().args(["rollout"])).status.code(), Some(2));
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "colour = blue\n").unwrap();
    assert_eq!(run(cmd().arg("--config").arg(&conf).arg("check").arg(&good)).status.code(), Some(2));

    // occupied port
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    assert_eq!(run(cmd().args(["serve", "--listen", &addr])).status.code(), Some(3));
}

#[test]
fn repl_backend_runs_the_stub() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.lean");
    std::fs::write(&f, "theorem t : True := by\n  sorry\n").unwrap();
    let o = run(cmd().args(["--backend", "repl", "--repl-cmd", &format!("{BIN} stub-repl"), "check"]).arg(&f));
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("status: incomplete"), "{out}");
    assert!(out.contains("2:2: sorry:"), "{out}");
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let fx = simulated_fixtures(dir.path(), 1);
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# trials from file\ntrials = 3\nseed = 1\n").unwrap();
    let lines = |c: &mut Command| {
        let o = run(c.arg("rollout").arg("--fixtures").arg(&fx).arg("--config").arg(&conf));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap().lines().count()
    };
    assert_eq!(lines(&mut cmd()), 3);
    assert_eq!(lines(cmd().env("HARNESS_TRIALS", "2")), 2);
    assert_eq!(lines(cmd().env("HARNESS_TRIALS", "2").args(["--trials", "5"])), 5);
    let o = run(cmd().env("HARNESS_WORKERS", "0").arg("check").arg(&conf));
    assert_eq!(o.status.code(), Some(2));
    let o = run(cmd().env("WORKER_COUNT", "0").arg("check").arg(&conf));
    assert_eq!(o.status.code(), Some(2));
}

#[cfg(unix)]
#[tokio::test]
async fn serve_drains_on_sigterm() {
    use sketchloop::wire::Client;

    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("t.jsonl");
    let t = sketchloop::protocol::trajectory_from_transcript(
        "appendix",
        &std::fs::read_to_string(TRANSCRIPT).unwrap(),
        sketchloop::protocol::whitespace_tokens,
    )
    .unwrap();
    std::fs::write(&store, t.to_json_line() + "\n").unwrap();

    let mut child = cmd()
        .args(["serve", "--listen", "127.0.0.1:0", "--workers", "2", "--trajectories"])
        .arg(&store)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("banner").to_string();

    let mut c = Client::connect(&addr).await.unwrap();
    let (ts, masks) = c.fetch("appendix").await.unwrap();
    assert_eq!(ts[0].to_json_line(), t.to_json_line());
    assert_eq!(masks[0], sketchloop::protocol::build_loss_mask(&t).to_bitstring());
    c.submit("slow", "MOCK_SLEEP:1", Some(10.0)).await.unwrap();
    let waiter = tokio::spawn(async move { c.await_result("slow", 30.0).await.unwrap().0 });
    tokio::time::sleep(std::time::Duration::from_millis(100)).await;

    let killed = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    assert_eq!(waiter.await.unwrap(), "success");
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    let mut rest = String::new();
    std::io::Read::read_to_string(&mut stdout, &mut rest).unwrap();
    assert!(rest.contains("shutdown complete"));
}
