//! Files, processes and the command line around `cellgrow-core`.
//!
//! - [`config`]: TOML run configs with path-qualified errors.
//! - [`history`]: the per-species CSV log and reports built from it.
//! - [`checkpoint`]: versioned JSON snapshots that resume bit-for-bit.
//! - [`bridge`]: evaluation by external worker processes over line-delimited JSON.
//! - [`evaluators`]: turns a config's evaluator section into an evaluator.
//! - [`cli`]: the `cellgrow` command.

pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod evaluators;
pub mod history;
