//! Newline-delimited JSON protocol for using the broker remotely, plus the
//! server loop, a small client, and the trajectory store served to trainers.
//!
//! Every message is one UTF-8 JSON object on its own line, tagged by `type`.
//! Requests on one connection are answered in order.

use std::collections::HashMap;
use std::future::Future;
use std::io::BufRead;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::task::JoinSet;

use crate::broker::{Broker, BrokerError, BrokerStats, JobResult, SketchJob};
use crate::protocol::{build_loss_mask, Trajectory};

/// Longest accepted request line, newline included.
pub const MAX_LINE_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Submit {
        job_id: String,
        code: String,
        /// Falls back to the broker's default timeout when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_s: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt_id: Option<String>,
    },
    Await {
        job_id: String,
        deadline_s: f64,
    },
    /// Stored trajectories for a prompt together with their loss masks.
    Fetch {
        prompt_id: String,
    },
    Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Accepted {
        job_id: String,
    },
    Result {
        job_id: String,
        status: String,
        raw: String,
        exec_time_s: f64,
    },
    Trajectories {
        prompt_id: String,
        trajectories: Vec<Trajectory>,
        /// One `1`/`0` string per trajectory, aligned with its tokens.
        masks: Vec<String>,
    },
    Stats {
        #[serde(flatten)]
        stats: BrokerStats,
    },
    Error {
        code: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
}

impl Response {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Response::Error { code: code.to_string(), message: Some(message.into()) }
    }

    fn from_broker_error(e: &BrokerError) -> Self {
        Response::error(e.code(), e.to_string())
    }

    pub fn from_result(r: &JobResult) -> Self {
        Response::Result {
            job_id: r.job_id.clone(),
            status: r.verdict.status.as_str().to_string(),
            raw: r.verdict.raw.clone(),
            exec_time_s: r.exec_time.as_secs_f64(),
        }
    }
}

fn seconds(value: f64, what: &str, allow_zero: bool) -> Result<Duration, Response> {
    let ok = value.is_finite() && (value > 0.0 || (allow_zero && value == 0.0));
    if !ok {
        return Err(Response::error("bad_request", format!("{what} must be a {} finite number", if allow_zero { "non-negative" } else { "positive" })));
    }
    Duration::try_from_secs_f64(value).map_err(|e| Response::error("bad_request", format!("{what}: {e}")))
}

/// In-memory trajectory store keyed by prompt id.
#[derive(Debug, Default)]
pub struct TrajectoryStore {
    by_prompt: RwLock<HashMap<String, Vec<Trajectory>>>,
}

impl TrajectoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, trajectory: Trajectory) {
        let mut map = self.by_prompt.write().unwrap_or_else(|p| p.into_inner());
        map.entry(trajectory.prompt_id.clone()).or_default().push(trajectory);
    }

    pub fn get(&self, prompt_id: &str) -> Option<Vec<Trajectory>> {
        self.by_prompt.read().unwrap_or_else(|p| p.into_inner()).get(prompt_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.by_prompt.read().unwrap_or_else(|p| p.into_inner()).values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads trajectory JSONL. Rollout records (trajectories with extra
    /// verdict fields) are accepted too.
    pub fn load_jsonl(&self, input: impl BufRead) -> std::io::Result<usize> {
        let mut n = 0;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", lineno + 1))
            })?;
            t.validate().map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", lineno + 1))
            })?;
            self.insert(t);
            n += 1;
        }
        Ok(n)
    }
}

/// Answers one request.
pub async fn handle_request(req: Request, broker: &Broker, store: &TrajectoryStore) -> Response {
    match req {
        Request::Submit { job_id, code, timeout_s, prompt_id } => {
            let timeout = match timeout_s.map(|t| seconds(t, "timeout_s", false)).transpose() {
                Ok(t) => t.unwrap_or(broker.config().default_timeout),
                Err(resp) => return resp,
            };
            let job = SketchJob::new(job_id, prompt_id.unwrap_or_default(), code, timeout);
            match broker.submit(job) {
                Ok(job_id) => Response::Accepted { job_id },
                Err(e) => Response::from_broker_error(&e),
            }
        }
        Request::Await { job_id, deadline_s } => {
            let deadline = match seconds(deadline_s, "deadline_s", true) {
                Ok(d) => d,
                Err(resp) => return resp,
            };
            match broker.await_result(&job_id, deadline).await {
                Ok(r) => Response::from_result(&r),
                Err(e) => Response::from_broker_error(&e),
            }
        }
        Request::Fetch { prompt_id } => match store.get(&prompt_id) {
            Some(trajectories) => {
                let masks = trajectories.iter().map(|t| build_loss_mask(t).to_bitstring()).collect();
                Response::Trajectories { prompt_id, trajectories, masks }
            }
            None => Response::error("not_found", format!("no trajectories for prompt {prompt_id}")),
        },
        Request::Stats => Response::Stats { stats: broker.stats() },
    }
}

/// Reads one line of at most [`MAX_LINE_BYTES`]. `Ok(None)` on clean EOF.
async fn read_line_limited<R: AsyncRead + Unpin>(reader: &mut BufReader<R>) -> std::io::Result<Option<String>> {
    let mut buf = Vec::new();
    let n = (&mut *reader).take(MAX_LINE_BYTES as u64).read_until(b'\n', &mut buf).await?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') && n >= MAX_LINE_BYTES {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "request line too long"));
    }
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "request is not UTF-8"))
}

async fn write_message<W: AsyncWrite + Unpin, T: Serialize>(writer: &mut W, msg: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(msg).map_err(std::io::Error::other)?;
    line.push(b'\n');
    writer.write_all(&line).await?;
    writer.flush().await
}

/// Serves one connection until the peer closes it.
pub async fn serve_connection<S>(stream: S, broker: Broker, store: Arc<TrajectoryStore>) -> std::io::Result<()>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let (read, mut write) = tokio::io::split(stream);
    let mut reader = BufReader::new(read);
    loop {
        let line = match read_line_limited(&mut reader).await {
            Ok(Some(line)) => line,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                write_message(&mut write, &Response::error("bad_request", e.to_string())).await?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle_request(req, &broker, &store).await,
            Err(e) => Response::error("bad_request", e.to_string()),
        };
        write_message(&mut write, &resp).await?;
    }
}

/// Accepts connections until `shutdown` resolves, then drains the broker and
/// gives open connections up to `grace` to finish before dropping them.
pub async fn serve(
    listener: TcpListener,
    broker: Broker,
    store: Arc<TrajectoryStore>,
    shutdown: impl Future<Output = ()>,
    grace: Duration,
) -> std::io::Result<()> {
    let mut conns = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(pair) => pair,
                    Err(e) => {
                        tracing::warn!(error = %e, "accept failed");
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                let (broker, store) = (broker.clone(), store.clone());
                conns.spawn(async move {
                    if let Err(e) = serve_connection(stream, broker, store).await {
                        tracing::debug!(%peer, error = %e, "connection ended with error");
                    }
                });
            }
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
    drop(listener);
    tracing::info!("shutting down: draining broker");
    broker.shutdown().await;
    let drained = tokio::time::timeout(grace, async {
        while conns.join_next().await.is_some() {}
    })
    .await;
    if drained.is_err() {
        tracing::info!(open = conns.len(), "closing remaining connections");
        conns.shutdown().await;
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed response: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("connection closed by server")]
    Closed,
    #[error("server error {code}: {message}")]
    Server { code: String, message: String },
    #[error("unexpected response: {0:?}")]
    Unexpected(Box<Response>),
}

/// Blocking-style async client holding one connection.
#[derive(Debug)]
pub struct Client {
    reader: BufReader<tokio::net::tcp::OwnedReadHalf>,
    writer: tokio::net::tcp::OwnedWriteHalf,
}

impl Client {
    pub async fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (r, w) = stream.into_split();
        Ok(Self { reader: BufReader::new(r), writer: w })
    }

    pub async fn request(&mut self, req: &Request) -> Result<Response, ClientError> {
        write_message(&mut self.writer, req).await?;
        let mut line = String::new();
        if self.reader.read_line(&mut line).await? == 0 {
            return Err(ClientError::Closed);
        }
        Ok(serde_json::from_str(&line)?)
    }

    async fn expect(&mut self, req: &Request) -> Result<Response, ClientError> {
        match self.request(req).await? {
            Response::Error { code, message } => Err(ClientError::Server { code, message: message.unwrap_or_default() }),
            other => Ok(other),
        }
    }

    pub async fn submit(&mut self, job_id: &str, code: &str, timeout_s: Option<f64>) -> Result<String, ClientError> {
        let req = Request::Submit { job_id: job_id.into(), code: code.into(), timeout_s, prompt_id: None };
        match self.expect(&req).await? {
            Response::Accepted { job_id } => Ok(job_id),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    /// Returns `(status, raw, exec_time_s)`.
    pub async fn await_result(&mut self, job_id: &str, deadline_s: f64) -> Result<(String, String, f64), ClientError> {
        match self.expect(&Request::Await { job_id: job_id.into(), deadline_s }).await? {
            Response::Result { status, raw, exec_time_s, .. } => Ok((status, raw, exec_time_s)),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub async fn fetch(&mut self, prompt_id: &str) -> Result<(Vec<Trajectory>, Vec<String>), ClientError> {
        match self.expect(&Request::Fetch { prompt_id: prompt_id.into() }).await? {
            Response::Trajectories { trajectories, masks, .. } => Ok((trajectories, masks)),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub async fn stats(&mut self) -> Result<BrokerStats, ClientError> {
        match self.expect(&Request::Stats).await? {
            Response::Stats { stats } => Ok(stats),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }
}
