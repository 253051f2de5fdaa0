//! Run configuration resolved from flags, environment, a flat `key=value`
//! file, and built-in defaults, in that order of precedence.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::backend::ReplConfig;
use crate::broker::{BrokerConfig, RecyclePolicy};
use crate::metrics::{parse_budgets, DEFAULT_BUDGETS};
use crate::rollout::RolloutLimits;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
}

pub const KEYS: &[&str] = &[
    "backend",
    "workers",
    "timeout_s",
    "max_tokens",
    "max_interactions",
    "group_size",
    "trials",
    "budgets",
    "seed",
    "out",
    "listen",
    "queue_capacity",
    "recycle_threshold",
    "heartbeat_timeout_s",
    "grace_s",
    "repl_cmd",
    "repl_cwd",
];

/// Environment names honoured besides the `HARNESS_` prefixed ones.
fn legacy_env(key: &str) -> Option<&'static str> {
    Some(match key {
        "listen" => "BROKER_LISTEN",
        "workers" => "WORKER_COUNT",
        "recycle_threshold" => "RECYCLE_THRESHOLD",
        "timeout_s" => "DEFAULT_TIMEOUT_S",
        "repl_cmd" => "REPL_CMD",
        "repl_cwd" => "REPL_CWD",
        _ => return None,
    })
}

fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Parsed `key=value` file. `#` starts a comment line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            let key = normalize_key(k);
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendKind {
    #[default]
    Mock,
    Repl,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "repl" => Ok(Self::Repl),
            other => Err(format!("expected `mock` or `repl`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub broker: BrokerConfig,
    pub limits: RolloutLimits,
    pub group_size: usize,
    pub trials: usize,
    pub budgets: Vec<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub listen: String,
    pub repl: Option<ReplConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            broker: BrokerConfig::default(),
            limits: RolloutLimits::train(),
            group_size: 8,
            trials: 32,
            budgets: DEFAULT_BUDGETS.to_vec(),
            seed: 0,
            out: None,
            listen: "127.0.0.1:7878".into(),
            repl: None,
        }
    }
}

/// Looks up one key across the layers.
struct Layers<'a, E: Fn(&str) -> Option<String>> {
    flags: &'a BTreeMap<String, String>,
    env: E,
    file: Option<&'a ConfigFile>,
}

impl<E: Fn(&str) -> Option<String>> Layers<'_, E> {
    fn raw(&self, key: &str) -> Option<String> {
        if let Some(v) = self.flags.get(key) {
            return Some(v.clone());
        }
        if let Some(v) = (self.env)(&format!("HARNESS_{}", key.to_ascii_uppercase())) {
            return Some(v);
        }
        if let Some(v) = legacy_env(key).and_then(|name| (self.env)(name)) {
            return Some(v);
        }
        self.file.and_then(|f| f.get(key)).map(str::to_string)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.trim().parse::<T>().map_err(|e| ConfigError::Invalid { key: key.into(), message: e.to_string() })
            })
            .transpose()
    }

    fn secs(&self, key: &str) -> Result<Option<Duration>, ConfigError> {
        let Some(v) = self.parsed::<f64>(key)? else { return Ok(None) };
        if !(v.is_finite() && v > 0.0) {
            return Err(ConfigError::Invalid { key: key.into(), message: "must be a positive number of seconds".into() });
        }
        Duration::try_from_secs_f64(v)
            .map(Some)
            .map_err(|e| ConfigError::Invalid { key: key.into(), message: e.to_string() })
    }
}

fn positive(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        Err(ConfigError::Invalid { key: key.into(), message: "must be at least 1".into() })
    } else {
        Ok(v)
    }
}

impl RunConfig {
    /// `flags` holds only options given on the command line, keyed as in [`KEYS`].
    pub fn resolve(
        flags: &BTreeMap<String, String>,
        env: impl Fn(&str) -> Option<String>,
        file: Option<&ConfigFile>,
    ) -> Result<Self, ConfigError> {
        if let Some(k) = flags.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        let l = Layers { flags, env, file };
        let mut cfg = RunConfig::default();
        if let Some(b) = l.parsed::<BackendKind>("backend")? {
            cfg.backend = b;
        }
        if let Some(w) = l.parsed::<usize>("workers")? {
            cfg.broker.worker_count = positive("workers", w)?;
        }
        if let Some(q) = l.parsed::<usize>("queue_capacity")? {
            cfg.broker.queue_capacity = positive("queue_capacity", q)?;
        }
        if let Some(t) = l.secs("timeout_s")? {
            cfg.broker.default_timeout = t;
            cfg.limits.sketch_timeout = t;
        }
        if let Some(g) = l.secs("grace_s")? {
            cfg.broker.grace = g;
        }
        let mut recycle = RecyclePolicy::default();
        if let Some(r) = l.parsed::<u64>("recycle_threshold")? {
            recycle.recycle_threshold = r.max(1);
        }
        if let Some(h) = l.secs("heartbeat_timeout_s")? {
            recycle.heartbeat_timeout = h;
        }
        cfg.broker.recycle = recycle;
        if let Some(m) = l.parsed::<usize>("max_tokens")? {
            cfg.limits.max_total_tokens = positive("max_tokens", m)?;
        }
        if let Some(m) = l.parsed::<usize>("max_interactions")? {
            cfg.limits.max_interactions = Some(m);
        }
        if let Some(g) = l.parsed::<usize>("group_size")? {
            cfg.group_size = positive("group_size", g)?;
        }
        if let Some(k) = l.parsed::<usize>("trials")? {
            cfg.trials = positive("trials", k)?;
        }
        if let Some(b) = l.raw("budgets") {
            cfg.budgets = parse_budgets(&b).map_err(|message| ConfigError::Invalid { key: "budgets".into(), message })?;
        }
        if let Some(s) = l.parsed::<u64>("seed")? {
            cfg.seed = s;
        }
        cfg.out = l.raw("out").map(PathBuf::from);
        if let Some(addr) = l.raw("listen") {
            cfg.listen = addr;
        }
        if let Some(cmd) = l.raw("repl_cmd") {
            let cwd = l.raw("repl_cwd").map(PathBuf::from);
            cfg.repl = Some(ReplConfig::from_command_line(&cmd, cwd).ok_or_else(|| ConfigError::Invalid {
                key: "repl_cmd".into(),
                message: "empty command".into(),
            })?);
        }
        if cfg.backend == BackendKind::Repl && cfg.repl.is_none() {
            return Err(ConfigError::Invalid { key: "repl_cmd".into(), message: "required with --backend repl".into() });
        }
        Ok(cfg)
    }
}
