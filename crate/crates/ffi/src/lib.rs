//! C ABI for the sketchloop harness.
//!
//! Handles are opaque pointers created by `*_new` and released by the
//! matching `*_free`. Fallible calls return an [`SlStatus`]; the message of the
//! last failure on the calling thread is available from [`sl_last_error`].
//! Strings returned through `char **` out-parameters are owned by the caller
//! and must be released with [`sl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;
use std::time::Duration;

use sketchloop::backend::MockBackend;
use sketchloop::broker::{Broker, BrokerConfig, BrokerError, SketchJob};
use sketchloop::grpo::{self, GroupBatch, RatioInput};
use sketchloop::protocol::{self, ParseEvent, StreamParser, Trajectory};
use sketchloop::verdict::{classify_outcome, CheckOutcome, VerdictStatus};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ProtocolError = 4,
    QueueFull = 5,
    BrokerDown = 6,
    DeadlineExceeded = 7,
    UnknownJob = 8,
    OutOfRange = 9,
    Panic = 10,
    Runtime = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlVerdict {
    Success = 0,
    Failed = 1,
    Incomplete = 2,
    Timeout = 3,
    Crash = 4,
}

impl From<VerdictStatus> for SlVerdict {
    fn from(s: VerdictStatus) -> Self {
        match s {
            VerdictStatus::Success => SlVerdict::Success,
            VerdictStatus::Failed => SlVerdict::Failed,
            VerdictStatus::Incomplete => SlVerdict::Incomplete,
            VerdictStatus::Timeout => SlVerdict::Timeout,
            VerdictStatus::Crash => SlVerdict::Crash,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlEventKind {
    ReasoningText = 0,
    SketchComplete = 1,
    ThinkEnd = 2,
    PlainText = 3,
    Feedback = 4,
    SketchTruncated = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult<T> = Result<T, (SlStatus, String)>;

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> SlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside sketchloop");
            SlStatus::Panic
        }
    }
}

fn null_err(what: &str) -> (SlStatus, String) {
    (SlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null_err(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (SlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null_err("output pointer"));
    }
    let c = CString::new(s).map_err(|_| (SlStatus::InvalidArgument, "result contains a NUL byte".to_string()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn write_val<T>(out: *mut T, v: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null_err("output pointer"));
    }
    *out = v;
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- delimiter protocol ----

pub struct SlParser {
    parser: StreamParser,
    events: Vec<ParseEvent>,
}

#[no_mangle]
pub extern "C" fn sl_parser_new() -> *mut SlParser {
    Box::into_raw(Box::new(SlParser { parser: StreamParser::new(), events: Vec::new() }))
}

/// # Safety
/// `p` must be NULL or a handle from [`sl_parser_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_parser_free(p: *mut SlParser) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Feeds raw bytes; chunks may split delimiters and UTF-8 sequences. Events
/// accumulate inside the handle.
///
/// # Safety
/// `p` must be a live parser handle and `data` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn sl_parser_feed(p: *mut SlParser, data: *const u8, len: usize) -> SlStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null_err("parser"))?;
        if data.is_null() && len > 0 {
            return Err(null_err("data"));
        }
        let bytes = if len == 0 { &[][..] } else { std::slice::from_raw_parts(data, len) };
        let ev = p.parser.feed_bytes(bytes).map_err(|e| (SlStatus::ProtocolError, e.to_string()))?;
        p.events.extend(ev);
        Ok(())
    })
}

/// Flushes buffered text at end of stream.
///
/// # Safety
/// `p` must be a live parser handle.
#[no_mangle]
pub unsafe extern "C" fn sl_parser_finish(p: *mut SlParser) -> SlStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null_err("parser"))?;
        let ev = p.parser.finish().map_err(|e| (SlStatus::ProtocolError, e.to_string()))?;
        p.events.extend(ev);
        Ok(())
    })
}

/// # Safety
/// `p` must be NULL or a live parser handle.
#[no_mangle]
pub unsafe extern "C" fn sl_parser_event_count(p: *const SlParser) -> usize {
    p.as_ref().map_or(0, |p| p.events.len())
}

/// Reads event `index`. `text_out` receives the event text (empty for
/// `ThinkEnd`) and must be freed with [`sl_string_free`].
///
/// # Safety
/// `p` must be a live parser handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_parser_event(
    p: *const SlParser,
    index: usize,
    kind_out: *mut SlEventKind,
    text_out: *mut *mut c_char,
) -> SlStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null_err("parser"))?;
        let ev = p
            .events
            .get(index)
            .ok_or_else(|| (SlStatus::OutOfRange, format!("event {index} of {}", p.events.len())))?;
        let (kind, text) = match ev {
            ParseEvent::ReasoningText(t) => (SlEventKind::ReasoningText, t.as_str()),
            ParseEvent::SketchComplete(t) => (SlEventKind::SketchComplete, t.as_str()),
            ParseEvent::ThinkEnd => (SlEventKind::ThinkEnd, ""),
            ParseEvent::PlainText(t) => (SlEventKind::PlainText, t.as_str()),
            ParseEvent::Feedback(t) => (SlEventKind::Feedback, t.as_str()),
            ParseEvent::SketchTruncated(t) => (SlEventKind::SketchTruncated, t.as_str()),
        };
        write_string(text_out, text)?;
        write_val(kind_out, kind)
    })
}

/// # Safety
/// `payload` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_inject_feedback(payload: *const c_char, out: *mut *mut c_char) -> SlStatus {
    guard(|| write_string(out, &protocol::inject_feedback(read_str(payload, "payload")?)))
}

/// Fails with `SL_STATUS_PROTOCOL_ERROR` when the text has no `</think>`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_extract_final_answer(text: *const c_char, out: *mut *mut c_char) -> SlStatus {
    guard(|| {
        let answer = protocol::extract_final_answer(read_str(text, "text")?)
            .map_err(|e| (SlStatus::ProtocolError, e.to_string()))?;
        write_string(out, &answer)
    })
}

/// Loss mask of a trajectory given as one JSON object, rendered as a string
/// of `1` (trained) and `0` (feedback) characters.
///
/// # Safety
/// `trajectory_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_loss_mask(trajectory_json: *const c_char, out: *mut *mut c_char) -> SlStatus {
    guard(|| {
        let t: Trajectory = serde_json::from_str(read_str(trajectory_json, "trajectory")?)
            .map_err(|e| (SlStatus::InvalidArgument, e.to_string()))?;
        t.validate().map_err(|e| (SlStatus::InvalidArgument, e))?;
        write_string(out, &protocol::build_loss_mask(&t).to_bitstring())
    })
}

// ---- verdicts ----

/// Classifies raw checker output. A nonzero `timed_out` yields Timeout
/// regardless of `raw`, which may then be NULL.
///
/// # Safety
/// `raw` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_classify(raw: *const c_char, timed_out: c_int, out: *mut SlVerdict) -> SlStatus {
    guard(|| {
        let outcome = if timed_out != 0 {
            CheckOutcome::TimedOut
        } else {
            CheckOutcome::Output(read_str(raw, "raw")?.to_string())
        };
        write_val(out, classify_outcome(&outcome, Duration::ZERO).status.into())
    })
}

#[no_mangle]
pub extern "C" fn sl_reward(verdict: SlVerdict) -> c_int {
    c_int::from(verdict == SlVerdict::Success)
}

// ---- group advantages and objective ----

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null_err(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn grpo_err(e: grpo::GrpoError) -> (SlStatus, String) {
    (SlStatus::InvalidArgument, e.to_string())
}

/// Writes `n` normalized advantages for binary `rewards` into `out`.
///
/// # Safety
/// `rewards` must hold `n` bytes and `out` room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_advantages(rewards: *const u8, n: usize, out: *mut f64) -> SlStatus {
    guard(|| {
        let r = slice(rewards, n, "rewards")?;
        let set = grpo::advantages(r).map_err(grpo_err)?;
        if out.is_null() {
            return Err(null_err("out"));
        }
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&set.advantages);
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_clipped_term(ratio: f64, advantage: f64, epsilon: f64, out: *mut f64) -> SlStatus {
    guard(|| {
        let input = RatioInput::new(ratio, advantage, epsilon).map_err(grpo_err)?;
        write_val(out, grpo::clipped_term(input))
    })
}

/// Objective over `n_groups` groups laid out back to back: group `g` owns the
/// next `group_sizes[g]` entries of `ratios` and `rewards`.
///
/// # Safety
/// `group_sizes` must hold `n_groups` entries; `ratios` and `rewards` must
/// each hold their sum; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_objective(
    ratios: *const f64,
    rewards: *const u8,
    group_sizes: *const usize,
    n_groups: usize,
    epsilon: f64,
    out: *mut f64,
) -> SlStatus {
    guard(|| {
        let sizes = slice(group_sizes, n_groups, "group_sizes")?;
        let total = sizes
            .iter()
            .try_fold(0usize, |acc, &s| acc.checked_add(s))
            .ok_or_else(|| (SlStatus::InvalidArgument, "group sizes overflow".to_string()))?;
        let ratios = slice(ratios, total, "ratios")?;
        let rewards = slice(rewards, total, "rewards")?;
        let mut groups = Vec::with_capacity(n_groups);
        let mut at = 0;
        for &s in sizes {
            let adv = grpo::advantages(&rewards[at..at + s]).map_err(grpo_err)?;
            groups.push(GroupBatch { ratios: ratios[at..at + s].to_vec(), advantages: adv });
            at += s;
        }
        write_val(out, grpo::objective(&groups, epsilon).map_err(grpo_err)?)
    })
}

// ---- broker ----

/// Broker backed by the deterministic mock checker, with its own runtime.
pub struct SlBroker {
    runtime: tokio::runtime::Runtime,
    broker: Broker,
}

fn broker_err(e: BrokerError) -> (SlStatus, String) {
    let status = match e {
        BrokerError::QueueFull => SlStatus::QueueFull,
        BrokerError::BrokerDown => SlStatus::BrokerDown,
        BrokerError::DeadlineExceeded(_) => SlStatus::DeadlineExceeded,
        BrokerError::UnknownJob(_) => SlStatus::UnknownJob,
        BrokerError::InvalidJob(_) => SlStatus::InvalidArgument,
    };
    (status, e.to_string())
}

fn secs(v: f64, what: &str) -> FfiResult<Duration> {
    if !(v.is_finite() && v >= 0.0) {
        return Err((SlStatus::InvalidArgument, format!("{what} must be a non-negative finite number")));
    }
    Duration::try_from_secs_f64(v).map_err(|e| (SlStatus::InvalidArgument, format!("{what}: {e}")))
}

/// Starts a mock-backed broker. Returns NULL on failure (see [`sl_last_error`]).
#[no_mangle]
pub extern "C" fn sl_broker_new_mock(workers: usize, queue_capacity: usize) -> *mut SlBroker {
    let mut handle = ptr::null_mut();
    let status = guard(|| {
        if workers == 0 || queue_capacity == 0 {
            return Err((SlStatus::InvalidArgument, "workers and queue capacity must be positive".into()));
        }
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_time()
            .build()
            .map_err(|e| (SlStatus::Runtime, e.to_string()))?;
        let cfg = BrokerConfig { worker_count: workers, queue_capacity, ..Default::default() };
        let broker = {
            let _enter = runtime.enter();
            Broker::start(cfg, Arc::new(|_| Box::new(MockBackend::default())))
        };
        handle = Box::into_raw(Box::new(SlBroker { runtime, broker }));
        Ok(())
    });
    if status == SlStatus::Ok {
        handle
    } else {
        ptr::null_mut()
    }
}

/// Drains queued work, stops the workers and releases the handle.
///
/// # Safety
/// `b` must be NULL or a handle from [`sl_broker_new_mock`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_broker_free(b: *mut SlBroker) {
    if b.is_null() {
        return;
    }
    let b = Box::from_raw(b);
    let _ = catch_unwind(AssertUnwindSafe(|| {
        b.runtime.block_on(b.broker.shutdown());
    }));
}

/// Queues a job. Re-submitting a known `job_id` is accepted without running
/// it again. A `timeout_s` of 0 selects the default timeout.
///
/// # Safety
/// `b` must be a live broker handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sl_broker_submit(
    b: *mut SlBroker,
    job_id: *const c_char,
    code: *const c_char,
    timeout_s: f64,
) -> SlStatus {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null_err("broker"))?;
        let id = read_str(job_id, "job_id")?;
        let code = read_str(code, "code")?;
        let timeout = match secs(timeout_s, "timeout_s")? {
            d if d.is_zero() => b.broker.config().default_timeout,
            d => d,
        };
        b.broker.submit(SketchJob::new(id, "", code, timeout)).map(|_| ()).map_err(broker_err)
    })
}

/// Waits up to `deadline_s` for a job. On success writes the verdict and the
/// raw checker output (free with [`sl_string_free`]).
///
/// # Safety
/// `b` must be a live broker handle; `job_id` NUL-terminated; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn sl_broker_await(
    b: *mut SlBroker,
    job_id: *const c_char,
    deadline_s: f64,
    verdict_out: *mut SlVerdict,
    raw_out: *mut *mut c_char,
) -> SlStatus {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null_err("broker"))?;
        let id = read_str(job_id, "job_id")?;
        let deadline = secs(deadline_s, "deadline_s")?;
        let res = b.runtime.block_on(b.broker.await_result(id, deadline)).map_err(broker_err)?;
        write_string(raw_out, &res.verdict.raw)?;
        write_val(verdict_out, res.verdict.status.into())
    })
}
