//! Producer-broker-consumer verification service.
//!
//! Producers [`Broker::submit`] sketch jobs into a bounded FIFO queue and get
//! their job id back immediately. A pool of workers, each owning one
//! [`VerifierBackend`] exclusively, pulls jobs in order, enforces the per-job
//! timeout, classifies the output and publishes a [`JobResult`] on the job's
//! completion handle. Workers are recycled (backend reset) after a service
//! threshold, after a stale heartbeat, or after a crash.
//!
//! All timing goes through `tokio::time`, so tests can run the whole broker on
//! a paused virtual clock.

use std::collections::{HashMap, VecDeque};
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::FutureExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::backend::{BackendError, VerifierBackend};
use crate::verdict::{classify_outcome, empty_input_verdict, CheckOutcome, VerdictStatus, VerifierVerdict};

pub type JobId = String;

pub type BackendFactory = Arc<dyn Fn(usize) -> Box<dyn VerifierBackend> + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct BrokerConfig {
    pub worker_count: usize,
    pub queue_capacity: usize,
    pub default_timeout: Duration,
    pub grace: Duration,
    pub recycle: RecyclePolicy,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            worker_count: 8,
            queue_capacity: 10_000,
            default_timeout: Duration::from_secs(60),
            grace: Duration::from_secs(2),
            recycle: RecyclePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecyclePolicy {
    pub recycle_threshold: u64,
    pub heartbeat_timeout: Duration,
}

impl Default for RecyclePolicy {
    fn default() -> Self {
        Self { recycle_threshold: 200, heartbeat_timeout: Duration::from_secs(10) }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("queue is full")]
    QueueFull,
    #[error("broker is shut down")]
    BrokerDown,
    #[error("deadline exceeded while waiting for job {0}")]
    DeadlineExceeded(JobId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("invalid job: {0}")]
    InvalidJob(String),
}

impl BrokerError {
    /// Stable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            BrokerError::QueueFull => "queue_full",
            BrokerError::BrokerDown => "broker_down",
            BrokerError::DeadlineExceeded(_) => "deadline_exceeded",
            BrokerError::UnknownJob(_) => "unknown_job",
            BrokerError::InvalidJob(_) => "invalid_job",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SketchJob {
    pub job_id: JobId,
    pub prompt_id: String,
    pub code: String,
    pub timeout: Duration,
    pub submitted_at: Instant,
}

impl SketchJob {
    pub fn new(job_id: impl Into<JobId>, prompt_id: impl Into<String>, code: impl Into<String>, timeout: Duration) -> Self {
        Self {
            job_id: job_id.into(),
            prompt_id: prompt_id.into(),
            code: code.into(),
            timeout,
            submitted_at: Instant::now(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub job_id: JobId,
    pub verdict: VerifierVerdict,
    pub worker_id: usize,
    pub queue_wait: Duration,
    pub exec_time: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerStatus {
    Idle,
    Busy,
    Recycling,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerState {
    pub worker_id: usize,
    pub jobs_served: u64,
    pub status: WorkerStatus,
    pub last_heartbeat: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecycleDecision {
    Keep,
    Recycle,
}

/// Evaluated after each job resolves, so an in-flight job is always drained
/// before its worker is recycled.
pub fn recycle_policy_tick(worker: &WorkerState, now: Instant, policy: &RecyclePolicy) -> RecycleDecision {
    let stale = now.saturating_duration_since(worker.last_heartbeat) > policy.heartbeat_timeout;
    if worker.jobs_served >= policy.recycle_threshold || stale {
        RecycleDecision::Recycle
    } else {
        RecycleDecision::Keep
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BrokerStats {
    pub queue_depth: usize,
    pub in_flight: usize,
    pub submitted: u64,
    pub completed: u64,
    pub timeouts: u64,
    pub crashes: u64,
    pub recycles: u64,
    pub workers_idle: usize,
    pub workers_busy: usize,
    pub workers_recycling: usize,
    pub workers_dead: usize,
    pub throughput_per_s: f64,
    pub timeout_rate: f64,
}

#[derive(Default)]
struct Counters {
    submitted: u64,
    completed: u64,
    timeouts: u64,
    crashes: u64,
    recycles: u64,
}

struct State {
    queue: VecDeque<SketchJob>,
    results: HashMap<JobId, watch::Sender<Option<Arc<JobResult>>>>,
    workers: Vec<WorkerState>,
    in_flight: usize,
    counters: Counters,
    accepting: bool,
}

struct Shared {
    state: Mutex<State>,
    work: Notify,
    config: BrokerConfig,
    factory: BackendFactory,
    started: Instant,
    next_id: AtomicU64,
}

impl Shared {
    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Cheaply cloneable handle to a running broker.
#[derive(Clone)]
pub struct Broker {
    shared: Arc<Shared>,
    handles: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker").field("config", &self.shared.config).finish_non_exhaustive()
    }
}

impl Broker {
    /// Spawns the worker pool on the current tokio runtime.
    pub fn start(config: BrokerConfig, factory: BackendFactory) -> Self {
        let now = Instant::now();
        let workers = (0..config.worker_count)
            .map(|worker_id| WorkerState {
                worker_id,
                jobs_served: 0,
                status: WorkerStatus::Idle,
                last_heartbeat: now,
            })
            .collect();
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                queue: VecDeque::new(),
                results: HashMap::new(),
                workers,
                in_flight: 0,
                counters: Counters::default(),
                accepting: true,
            }),
            work: Notify::new(),
            config,
            factory,
            started: now,
            next_id: AtomicU64::new(1),
        });
        let handles = (0..shared.config.worker_count)
            .map(|id| tokio::spawn(worker_loop(shared.clone(), id)))
            .collect();
        Self { shared, handles: Arc::new(Mutex::new(handles)) }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.shared.config
    }

    /// Allocates a job id unique within this broker.
    pub fn next_job_id(&self) -> JobId {
        format!("job-{}", self.shared.next_id.fetch_add(1, Ordering::Relaxed))
    }

    /// Enqueues a job without waiting for it to run. Re-submitting a known
    /// job id is accepted and does not execute the job again.
    pub fn submit(&self, job: SketchJob) -> Result<JobId, BrokerError> {
        if job.timeout.is_zero() {
            return Err(BrokerError::InvalidJob("timeout must be positive".into()));
        }
        if job.job_id.is_empty() {
            return Err(BrokerError::InvalidJob("empty job id".into()));
        }
        let mut st = self.shared.lock();
        if !st.accepting {
            return Err(BrokerError::BrokerDown);
        }
        if st.results.contains_key(&job.job_id) {
            return Ok(job.job_id);
        }
        if st.queue.len() >= self.shared.config.queue_capacity {
            return Err(BrokerError::QueueFull);
        }
        let id = job.job_id.clone();
        let (tx, _rx) = watch::channel(None);
        st.results.insert(id.clone(), tx);
        st.queue.push_back(job);
        st.counters.submitted += 1;
        drop(st);
        self.shared.work.notify_one();
        Ok(id)
    }

    /// Convenience wrapper that allocates the id and applies the default
    /// timeout when none is given.
    pub fn submit_code(&self, prompt_id: &str, code: &str, timeout: Option<Duration>) -> Result<JobId, BrokerError> {
        let timeout = timeout.unwrap_or(self.shared.config.default_timeout);
        self.submit(SketchJob::new(self.next_job_id(), prompt_id, code, timeout))
    }

    /// Waits up to `deadline` for the job's result. A job that misses the
    /// deadline keeps running and can be awaited again.
    pub async fn await_result(&self, job_id: &str, deadline: Duration) -> Result<JobResult, BrokerError> {
        let mut rx = {
            let st = self.shared.lock();
            st.results
                .get(job_id)
                .ok_or_else(|| BrokerError::UnknownJob(job_id.to_string()))?
                .subscribe()
        };
        let wait = async {
            loop {
                if let Some(res) = rx.borrow_and_update().as_ref() {
                    return Some(JobResult::clone(res));
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        };
        match tokio::time::timeout(deadline, wait).await {
            Ok(Some(res)) => Ok(res),
            Ok(None) => Err(BrokerError::BrokerDown),
            Err(_) => Err(BrokerError::DeadlineExceeded(job_id.to_string())),
        }
    }

    pub fn try_result(&self, job_id: &str) -> Option<JobResult> {
        let st = self.shared.lock();
        st.results.get(job_id).and_then(|tx| tx.borrow().as_deref().cloned())
    }

    /// Submits and waits for the result with no deadline beyond the job's own
    /// timeout plus grace.
    pub async fn verify(&self, prompt_id: &str, code: &str, timeout: Option<Duration>) -> Result<JobResult, BrokerError> {
        let id = self.submit_code(prompt_id, code, timeout)?;
        self.await_result(&id, Duration::MAX).await
    }

    pub fn stats(&self) -> BrokerStats {
        let st = self.shared.lock();
        let by = |s: WorkerStatus| st.workers.iter().filter(|w| w.status == s).count();
        let elapsed = Instant::now().saturating_duration_since(self.shared.started).as_secs_f64();
        let c = &st.counters;
        BrokerStats {
            queue_depth: st.queue.len(),
            in_flight: st.in_flight,
            submitted: c.submitted,
            completed: c.completed,
            timeouts: c.timeouts,
            crashes: c.crashes,
            recycles: c.recycles,
            workers_idle: by(WorkerStatus::Idle),
            workers_busy: by(WorkerStatus::Busy),
            workers_recycling: by(WorkerStatus::Recycling),
            workers_dead: by(WorkerStatus::Dead),
            throughput_per_s: if elapsed > 0.0 { c.completed as f64 / elapsed } else { 0.0 },
            timeout_rate: if c.completed > 0 { c.timeouts as f64 / c.completed as f64 } else { 0.0 },
        }
    }

    pub fn workers(&self) -> Vec<WorkerState> {
        self.shared.lock().workers.clone()
    }

    pub fn is_accepting(&self) -> bool {
        self.shared.lock().accepting
    }

    /// Stops accepting jobs, lets workers drain the queue and in-flight work,
    /// and waits for them to exit.
    pub async fn shutdown(&self) {
        self.shared.lock().accepting = false;
        self.shared.work.notify_waiters();
        let handles = std::mem::take(&mut *self.handles.lock().unwrap_or_else(|p| p.into_inner()));
        for h in handles {
            let _ = h.await;
        }
    }
}

async fn worker_loop(shared: Arc<Shared>, worker_id: usize) {
    let mut backend = (shared.factory)(worker_id);
    loop {
        let notified = shared.work.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        let next = {
            let mut st = shared.lock();
            match st.queue.pop_front() {
                Some(job) => {
                    st.in_flight += 1;
                    let w = &mut st.workers[worker_id];
                    w.status = WorkerStatus::Busy;
                    w.last_heartbeat = Instant::now();
                    Some(Some(job))
                }
                None if !st.accepting => Some(None),
                None => {
                    let w = &mut st.workers[worker_id];
                    w.status = WorkerStatus::Idle;
                    w.last_heartbeat = Instant::now();
                    None
                }
            }
        };
        let job = match next {
            Some(job) => job,
            None => {
                notified.await;
                continue;
            }
        };
        let Some(job) = job else { break };
        // More work may be queued than workers awake.
        shared.work.notify_one();
        backend = run_job(&shared, worker_id, backend, job).await;
    }
}

async fn run_job(
    shared: &Shared,
    worker_id: usize,
    mut backend: Box<dyn VerifierBackend>,
    job: SketchJob,
) -> Box<dyn VerifierBackend> {
    let started = Instant::now();
    let queue_wait = started.saturating_duration_since(job.submitted_at);
    let grace = shared.config.grace;
    let mut responded = false;
    let mut poisoned = false;

    let verdict = if job.code.trim().is_empty() {
        responded = true;
        empty_input_verdict()
    } else {
        let guarded = tokio::time::timeout(job.timeout.saturating_add(grace), backend.check(&job.code, job.timeout));
        let outcome = match AssertUnwindSafe(guarded).catch_unwind().await {
            Ok(Ok(Ok(raw))) => {
                responded = true;
                CheckOutcome::Output(raw)
            }
            Ok(Ok(Err(BackendError::TimedOut(_)))) | Ok(Err(_)) => CheckOutcome::TimedOut,
            Ok(Ok(Err(BackendError::Crashed(reason)))) => CheckOutcome::Crashed(reason),
            Err(_) => {
                poisoned = true;
                CheckOutcome::Crashed("backend panicked".into())
            }
        };
        classify_outcome(&outcome, started.elapsed())
    };
    let exec_time = started.elapsed();
    let status = verdict.status;
    let result = Arc::new(JobResult { job_id: job.job_id.clone(), verdict, worker_id, queue_wait, exec_time });

    let decision = {
        let mut st = shared.lock();
        st.in_flight -= 1;
        st.counters.completed += 1;
        match status {
            VerdictStatus::Timeout => st.counters.timeouts += 1,
            VerdictStatus::Crash => st.counters.crashes += 1,
            _ => {}
        }
        if let Some(tx) = st.results.get(&job.job_id) {
            tx.send_replace(Some(result));
        }
        let w = &mut st.workers[worker_id];
        w.jobs_served += 1;
        if responded {
            w.last_heartbeat = Instant::now();
        }
        let mut decision = recycle_policy_tick(w, Instant::now(), &shared.config.recycle);
        if matches!(status, VerdictStatus::Crash | VerdictStatus::Timeout) {
            decision = RecycleDecision::Recycle;
        }
        if decision == RecycleDecision::Recycle {
            w.status = WorkerStatus::Recycling;
            st.counters.recycles += 1;
        }
        decision
    };

    if decision == RecycleDecision::Recycle {
        if poisoned {
            backend = (shared.factory)(worker_id);
        } else if backend.reset().await.is_err() {
            shared.lock().workers[worker_id].status = WorkerStatus::Dead;
            tracing::warn!(worker_id, "backend reset failed; replacing worker backend");
            backend = (shared.factory)(worker_id);
        }
        let mut st = shared.lock();
        let w = &mut st.workers[worker_id];
        w.jobs_served = 0;
        w.last_heartbeat = Instant::now();
        w.status = WorkerStatus::Idle;
    }
    backend
}
