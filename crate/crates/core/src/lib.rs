pub mod backend;
pub mod broker;
pub mod cli;
pub mod config;
pub mod curation;
pub mod grpo;
pub mod metrics;
pub mod protocol;
pub mod replay;
pub mod rollout;
pub mod verdict;
pub mod wire;
