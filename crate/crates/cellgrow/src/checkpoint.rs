//! Versioned JSON checkpoints of a run.

use std::fs;
use std::io;
use std::path::Path;

use cellgrow_core::adaptation::AdaptationState;
use cellgrow_core::engine::{EngineState, GenerationRecord, Outcome};
use cellgrow_core::genome::{Genotype, IdSource};
use cellgrow_core::speciation::SpeciesSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{emit_config, parse_config, ConfigError, RunConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Every random draw of generation `k` comes from streams keyed by
/// `(seed, k)`, so these two numbers are the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub generation: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub generation: u32,
    pub rng_state: RngState,
    pub population: Vec<Genotype>,
    pub species: SpeciesSet,
    pub adaptation: AdaptationState,
    pub ids: IdSource,
    pub history: Vec<GenerationRecord>,
    pub outcome: Option<Outcome>,
    /// SHA-256 of `config`.
    pub config_digest: String,
    /// The run configuration as TOML.
    pub config: String,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read checkpoint: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint config digest mismatch")]
    Digest,
    #[error("checkpoint config is invalid: {0}")]
    Config(#[from] ConfigError),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn checkpoint(config: &RunConfig, state: &EngineState) -> Checkpoint {
    let text = emit_config(config);
    Checkpoint {
        version: CHECKPOINT_VERSION,
        generation: state.generation,
        rng_state: RngState { seed: config.engine.seed, generation: state.generation },
        population: state.population.clone(),
        species: state.species.clone(),
        adaptation: state.adaptation,
        ids: state.ids,
        history: state.history.clone(),
        outcome: state.outcome.clone(),
        config_digest: digest(&text),
        config: text,
    }
}

/// Parses and checks a checkpoint document.
pub fn restore(text: &str) -> Result<(RunConfig, EngineState), CheckpointError> {
    let version = serde_json::from_str::<serde_json::Value>(text)?
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Inconsistent("missing version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(CheckpointError::Version { found: version as u32 });
    }
    let cp: Checkpoint = serde_json::from_str(text)?;
    if digest(&cp.config) != cp.config_digest {
        return Err(CheckpointError::Digest);
    }
    let config = parse_config(&cp.config)?;
    if cp.rng_state.seed != config.engine.seed || cp.rng_state.generation != cp.generation {
        return Err(CheckpointError::Inconsistent("rng_state does not match the run".into()));
    }
    let state = EngineState {
        generation: cp.generation,
        population: cp.population,
        species: cp.species,
        adaptation: cp.adaptation,
        ids: cp.ids,
        history: cp.history,
        outcome: cp.outcome,
    };
    Ok((config, state))
}

/// Writes through a temporary file so a crash never leaves a torn document.
pub fn save(path: &Path, cp: &Checkpoint) -> io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec(cp).map_err(io::Error::other)?)?;
    fs::rename(&tmp, path)
}

pub fn load(path: &Path) -> Result<(RunConfig, EngineState), CheckpointError> {
    restore(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cellgrow_core::engine::Engine;

    const DOC: &str = r#"
[dnn]
dnn_type = "cnn"
[evolution]
individual_init = 4
[training]
[training.evaluator]
kind = "subset_sum"
[run]
seed = 7
"#;

    #[test]
    fn fresh_state_round_trips() {
        let config = parse_config(DOC).unwrap();
        let engine = Engine::new(config.space.clone(), config.engine.clone()).unwrap();
        let cp = checkpoint(&config, engine.state());
        assert_eq!(cp.generation, 0);
        assert_eq!(cp.population.len(), 4);
        let text = serde_json::to_string(&cp).unwrap();
        let (c2, s2) = restore(&text).unwrap();
        assert_eq!(c2, config);
        assert_eq!(&s2, engine.state());
    }

    #[test]
    fn truncated_and_tampered_documents_fail() {
        let config = parse_config(DOC).unwrap();
        let engine = Engine::new(config.space.clone(), config.engine.clone()).unwrap();
        let text = serde_json::to_string(&checkpoint(&config, engine.state())).unwrap();
        assert!(restore(&text[..text.len() / 2]).is_err());
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(restore(&bumped), Err(CheckpointError::Version { found: 9 })));
        let tampered = text.replacen("individual_init = 4", "individual_init = 5", 1);
        assert!(matches!(restore(&tampered), Err(CheckpointError::Digest)));
    }
}
