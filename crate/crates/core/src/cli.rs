//! Command-line driver behind the `sketchloop` binary.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::backend::{mock_response, MockBackend, MockOutcome, MockRule, SubprocessBackend};
use crate::broker::{BackendFactory, Broker};
use crate::config::{BackendKind, ConfigFile, RunConfig};
use crate::curation::{select_rlsft, Curator, FilterMode, SelectionPolicy};
use crate::metrics::{EvalReport, EvalRun};
use crate::protocol::Trajectory;
use crate::replay::ReplayScript;
use crate::rollout::{run_group, stream_seed, Generator, Prompt, RolloutOptions, RolloutRecord, SimulatedGenerator};
use crate::verdict::VerdictStatus;
use crate::wire::{serve, TrajectoryStore};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFRA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sketchloop", version, about = "Sketch-and-verify rollout harness with a proof-checker broker")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat key=value config file; flags and environment override it.
    #[arg(long, global = true, env = "HARNESS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Verifier backend: mock or repl.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Per-check timeout in seconds.
    #[arg(long, global = true)]
    pub timeout_s: Option<f64>,
    #[arg(long, global = true)]
    pub max_tokens: Option<usize>,
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Comma-separated generation budgets for the length-scaling table.
    #[arg(long, global = true)]
    pub budgets: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub listen: Option<String>,
    #[arg(long, global = true)]
    pub repl_cmd: Option<String>,
    #[arg(long, global = true)]
    pub repl_cwd: Option<PathBuf>,
    /// JSONL file of extra mock rules, tried before the built-in markers.
    #[arg(long, global = true)]
    pub mock_rules: Option<PathBuf>,
}

impl CommonArgs {
    fn flag_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("backend", self.backend.clone());
        put("workers", self.workers.map(|v| v.to_string()));
        put("timeout_s", self.timeout_s.map(|v| v.to_string()));
        put("max_tokens", self.max_tokens.map(|v| v.to_string()));
        put("group_size", self.group_size.map(|v| v.to_string()));
        put("trials", self.trials.map(|v| v.to_string()));
        put("budgets", self.budgets.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("listen", self.listen.clone());
        put("repl_cmd", self.repl_cmd.clone());
        put("repl_cwd", self.repl_cwd.as_ref().map(|p| p.display().to_string()));
        m
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the broker over the line-delimited JSON protocol.
    Serve {
        /// Trajectory JSONL made available to `fetch` requests.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Seconds open connections get to finish after shutdown begins.
        #[arg(long, default_value_t = 5.0)]
        shutdown_grace_s: f64,
    },
    /// Run scripted rollouts and print a metrics report.
    Rollout {
        /// Recorded transcript(s) to replay; the file stem is the prompt id.
        #[arg(long)]
        transcript: Vec<PathBuf>,
        /// JSONL of scripted or simulated prompts.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Verify one file and exit 0 iff it checks.
    Check { file: PathBuf },
    /// Summarize a trajectory JSONL file.
    Report {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Line-protocol REPL emulator driven by the mock rules.
    #[command(hide = true)]
    StubRepl,
}

pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    run(cli)
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("sketchloop: {msg}");
    code
}

pub fn run(cli: Cli) -> i32 {
    let file = match &cli.common.config {
        Some(path) => match std::fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| {
            ConfigFile::parse(&t).map_err(|e| e.to_string())
        }) {
            Ok(f) => Some(f),
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
        },
        None => None,
    };
    let cfg = match RunConfig::resolve(&cli.common.flag_map(), |k| std::env::var(k).ok(), file.as_ref()) {
        Ok(cfg) => cfg,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let rules = match &cli.common.mock_rules {
        Some(path) => match load_rules(path) {
            Ok(r) => r,
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
        },
        None => Vec::new(),
    };

    if let Command::StubRepl = cli.command {
        return stub_repl(&rules);
    }

    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => return fail(EXIT_INFRA, format!("runtime: {e}")),
    };
    rt.block_on(async move {
        match cli.command {
            Command::Serve { trajectories, shutdown_grace_s } => {
                cmd_serve(&cfg, rules, trajectories.as_deref(), shutdown_grace_s).await
            }
            Command::Rollout { transcript, fixtures } => cmd_rollout(&cfg, rules, &transcript, fixtures.as_deref()).await,
            Command::Check { file } => cmd_check(&cfg, rules, &file).await,
            Command::Report { input, json } => cmd_report(&cfg, &input, json),
            Command::StubRepl => unreachable!("handled above"),
        }
    })
}

fn load_rules(path: &Path) -> Result<Vec<MockRule>, String> {
    let f = std::fs::File::open(path).map_err(|e| e.to_string())?;
    let mut rules = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        rules.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(rules)
}

pub fn backend_factory(cfg: &RunConfig, rules: Vec<MockRule>) -> BackendFactory {
    match (cfg.backend, cfg.repl.clone()) {
        (BackendKind::Repl, Some(repl)) => Arc::new(move |_| Box::new(SubprocessBackend::new(repl.clone()))),
        _ => {
            let rules = Arc::new(rules);
            Arc::new(move |_| Box::new(MockBackend::shared(rules.clone())))
        }
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = term.recv() => {}
                    _ = tokio::signal::ctrl_c() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

async fn cmd_serve(cfg: &RunConfig, rules: Vec<MockRule>, trajectories: Option<&Path>, grace_s: f64) -> i32 {
    let store = Arc::new(TrajectoryStore::new());
    if let Some(path) = trajectories {
        let loaded = std::fs::File::open(path).and_then(|f| store.load_jsonl(BufReader::new(f)));
        match loaded {
            Ok(n) => tracing::info!(n, "loaded trajectories"),
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
        }
    }
    let Ok(grace) = Duration::try_from_secs_f64(grace_s) else {
        return fail(EXIT_CONFIG, "shutdown grace must be a non-negative number");
    };
    let listener = match tokio::net::TcpListener::bind(&cfg.listen).await {
        Ok(l) => l,
        Err(e) => return fail(EXIT_INFRA, format!("bind {}: {e}", cfg.listen)),
    };
    let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_else(|_| cfg.listen.clone());
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
    let broker = Broker::start(cfg.broker.clone(), backend_factory(cfg, rules));
    match serve(listener, broker, store, shutdown_signal(), grace).await {
        Ok(()) => {
            println!("shutdown complete");
            EXIT_OK
        }
        Err(e) => fail(EXIT_INFRA, e),
    }
}

/// One line of a `--fixtures` file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum FixtureSpec {
    Scripted {
        prompt_id: String,
        turns: Vec<String>,
        #[serde(default)]
        rules: Vec<MockRule>,
    },
    Simulated {
        prompt_id: String,
        solve_rate: f64,
        #[serde(default)]
        failed_rounds: usize,
    },
}

impl FixtureSpec {
    fn prompt_id(&self) -> &str {
        match self {
            FixtureSpec::Scripted { prompt_id, .. } | FixtureSpec::Simulated { prompt_id, .. } => prompt_id,
        }
    }
}

pub fn load_fixtures(path: &Path) -> Result<Vec<FixtureSpec>, String> {
    let f = std::fs::File::open(path).map_err(|e| e.to_string())?;
    let mut specs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: FixtureSpec = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if let FixtureSpec::Simulated { solve_rate, .. } = &spec {
            if !(0.0..=1.0).contains(solve_rate) {
                return Err(format!("line {}: solve_rate must lie in [0, 1]", i + 1));
            }
        }
        specs.push(spec);
    }
    Ok(specs)
}

fn generator_for(spec: &FixtureSpec, seed: u64) -> Box<dyn Generator> {
    match spec {
        FixtureSpec::Scripted { turns, .. } => Box::new(crate::rollout::ScriptedGenerator::new(turns.clone())),
        FixtureSpec::Simulated { solve_rate, failed_rounds, .. } => {
            Box::new(SimulatedGenerator::new(*solve_rate, *failed_rounds, seed))
        }
    }
}

#[async_trait::async_trait]
impl Generator for Box<dyn Generator> {
    async fn next(&mut self, context: &str, budget: usize) -> Result<crate::rollout::Generation, crate::rollout::GeneratorError> {
        (**self).next(context, budget).await
    }

    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }
}

/// Runs `trials` rollouts per fixture in groups of `group_size`. Records are
/// ordered by fixture, then trial.
pub async fn run_suite(
    cfg: &RunConfig,
    specs: &[FixtureSpec],
    broker: &Broker,
    curator: &Curator,
) -> Vec<RolloutRecord> {
    let opts = RolloutOptions::default();
    let per_prompt = specs.iter().enumerate().map(|(pi, spec)| {
        let opts = &opts;
        async move {
            let prompt = Prompt::new(spec.prompt_id(), "");
            let mut records = Vec::with_capacity(cfg.trials);
            let mut start = 0;
            while start < cfg.trials {
                let g = cfg.group_size.min(cfg.trials - start);
                let group = run_group(
                    &prompt,
                    |i| generator_for(spec, stream_seed(cfg.seed, pi as u64, (start + i) as u64)),
                    broker,
                    &cfg.limits,
                    opts,
                    g,
                )
                .await;
                curator.record_group(&group.prompt_id, &group.rewards);
                records.extend(group.records);
                start += g;
            }
            records
        }
    });
    futures::future::join_all(per_prompt).await.into_iter().flatten().collect()
}

async fn cmd_rollout(cfg: &RunConfig, mut rules: Vec<MockRule>, transcripts: &[PathBuf], fixtures: Option<&Path>) -> i32 {
    let mut specs = Vec::new();
    for path in transcripts {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
        };
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "transcript".into());
        match ReplayScript::from_transcript(&id, &text) {
            Ok(script) => specs.push(FixtureSpec::Scripted { prompt_id: id, turns: script.turns, rules: script.rules }),
            Err(e) => return fail(EXIT_CONFIG, format!("bad fixture {}: {e}", path.display())),
        }
    }
    if let Some(path) = fixtures {
        match load_fixtures(path) {
            Ok(more) => specs.extend(more),
            Err(e) => return fail(EXIT_CONFIG, format!("bad fixture {}: {e}", path.display())),
        }
    }
    if specs.is_empty() {
        return fail(EXIT_CONFIG, "nothing to run: pass --transcript or --fixtures");
    }
    for spec in &specs {
        if let FixtureSpec::Scripted { rules: r, .. } = spec {
            rules.extend(r.iter().cloned());
        }
    }
    rules.sort_by_key(|r| std::cmp::Reverse(r.trigger.len()));

    let broker = Broker::start(cfg.broker.clone(), backend_factory(cfg, rules));
    let curator = Curator::new(FilterMode::Continuous);
    let records = run_suite(cfg, &specs, &broker, &curator).await;
    broker.shutdown().await;

    let mut jsonl = String::new();
    for rec in &records {
        jsonl.push_str(&rec.to_json_line());
        jsonl.push('\n');
    }
    let trajectories: Vec<Trajectory> = records.iter().map(|r| r.trajectory.clone()).collect();
    let run = match EvalRun::from_trajectories(&trajectories, cfg.trials) {
        Ok(run) => run,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let report = EvalReport::build(&run, &trajectories, &cfg.budgets);
    let snapshot = curator.snapshot();
    let selected = select_rlsft(&trajectories, &snapshot, &SelectionPolicy::default()).len();
    let mut text = report.to_text();
    text.push_str(&format!(
        "\ntrajectories: {}\neligible prompts: {}\nrl-sft selections: {selected}\n",
        records.len(),
        curator.finalize().len()
    ));

    match &cfg.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &jsonl) {
                return fail(EXIT_INFRA, format!("{}: {e}", path.display()));
            }
            print!("{text}");
        }
        None => {
            print!("{jsonl}");
            eprint!("{text}");
        }
    }
    let infra_failures = records.iter().filter(|r| r.error.is_some()).count();
    if infra_failures > 0 {
        return fail(EXIT_INFRA, format!("{infra_failures} rollout(s) failed on infrastructure errors"));
    }
    EXIT_OK
}

async fn cmd_check(cfg: &RunConfig, rules: Vec<MockRule>, file: &Path) -> i32 {
    let code = match std::fs::read_to_string(file) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", file.display())),
    };
    let mut broker_cfg = cfg.broker.clone();
    broker_cfg.worker_count = 1;
    let broker = Broker::start(broker_cfg, backend_factory(cfg, rules));
    let result = broker.verify("check", &code, Some(cfg.limits.sketch_timeout)).await;
    broker.shutdown().await;
    let res = match result {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INFRA, e),
    };
    let v = &res.verdict;
    println!("status: {}", v.status);
    for m in &v.messages {
        println!("{}:{}: {}: {}", m.pos.line, m.pos.column, m.severity.as_str(), m.data);
    }
    for s in &v.sorries {
        println!("{}:{}: sorry: {}", s.pos.line, s.pos.column, s.goal);
    }
    if v.status == VerdictStatus::Crash {
        println!("raw: {}", v.raw);
    }
    if v.status == VerdictStatus::Success {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    }
}

fn cmd_report(cfg: &RunConfig, input: &Path, json: bool) -> i32 {
    let mut trajectories = Vec::new();
    let loaded = std::fs::File::open(input).and_then(|f| {
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            trajectories.push(t);
        }
        Ok(())
    });
    if let Err(e) = loaded {
        return fail(EXIT_CONFIG, format!("{}: {e}", input.display()));
    }
    let k = infer_trials(&trajectories).unwrap_or(cfg.trials);
    let run = match EvalRun::from_trajectories(&trajectories, k) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let report = EvalReport::build(&run, &trajectories, &cfg.budgets);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_text());
    }
    EXIT_OK
}

fn infer_trials(trajectories: &[Trajectory]) -> Option<usize> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in trajectories {
        *counts.entry(&t.prompt_id).or_default() += 1;
    }
    let first = *counts.values().next()?;
    counts.values().all(|&c| c == first).then_some(first)
}

/// Speaks the REPL framing on stdin/stdout: a one-line JSON request followed
/// by a blank line in, a JSON response followed by a blank line out.
fn stub_repl(rules: &[MockRule]) -> i32 {
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    let mut request = String::new();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { return EXIT_INFRA };
        if !line.trim().is_empty() {
            request.push_str(&line);
            continue;
        }
        if request.is_empty() {
            continue;
        }
        let code = serde_json::from_str::<serde_json::Value>(&request)
            .ok()
            .and_then(|v| v.get("cmd").and_then(|c| c.as_str()).map(str::to_string));
        request.clear();
        let raw = match code {
            None => r#"{"message": "could not parse request"}"#.to_string(),
            Some(code) => match mock_response(rules, &code) {
                MockOutcome::Output(raw) => raw,
                MockOutcome::Delay(d) => {
                    std::thread::sleep(d);
                    "{}".to_string()
                }
                MockOutcome::Crash => std::process::exit(101),
            },
        };
        // Real REPLs pretty-print; keep that so clients must read to the blank line.
        let body = serde_json::from_str::<serde_json::Value>(&raw)
            .ok()
            .and_then(|v| serde_json::to_string_pretty(&v).ok())
            .unwrap_or(raw);
        if writeln!(stdout, "{body}\n").and_then(|_| stdout.flush()).is_err() {
            return EXIT_INFRA;
        }
    }
    EXIT_OK
}
