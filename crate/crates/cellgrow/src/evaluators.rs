//! Builds the evaluator named by a run configuration.

use std::time::Duration;

use cellgrow_core::fitness::{
    Evaluator, SubsetSumEvaluator, SubsetSumProblem, TargetArchitecture, TargetMatchEvaluator,
};
use cellgrow_core::genome::StateSchema;

use crate::bridge::{WorkerCommand, WorkerPool};
use crate::config::{ConfigError, EvaluatorSpec, RunConfig};

/// Environment variable that overrides the configured worker count.
pub const WORKERS_ENV: &str = "CELLGROW_WORKERS";

pub type BoxedEvaluator = Box<dyn Evaluator + Send + Sync>;

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }
}

/// Worker count: `CELLGROW_WORKERS` if set and positive, else the config
/// value, else 1.
pub fn pool_size(configured: Option<u32>, env: Option<&str>) -> Result<usize, ConfigError> {
    match env {
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(invalid("/training/evaluator/pool_size", format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        None => Ok(configured.unwrap_or(1) as usize),
    }
}

pub fn build_evaluator(config: &RunConfig) -> Result<BoxedEvaluator, ConfigError> {
    match &config.evaluator {
        EvaluatorSpec::SubsetSum { target } => {
            let schema = StateSchema::for_space(&config.space).map_err(|e| invalid("/training/evaluator", e.to_string()))?;
            let mut problem = SubsetSumProblem::all_ones(schema);
            if let Some(t) = target {
                problem.target = t.chars().map(|c| c == '1').collect();
            }
            Ok(Box::new(SubsetSumEvaluator::new(problem)))
        }
        EvaluatorSpec::TargetMatch { counts, attrs } => Ok(Box::new(TargetMatchEvaluator {
            target: TargetArchitecture { counts: counts.clone(), attrs: attrs.clone() },
        })),
        EvaluatorSpec::Worker { command, timeout_secs, pool_size: configured, env } => {
            let input_shape = config
                .input_shape
                .clone()
                .ok_or_else(|| invalid("/dnn/input_shape", "required for worker evaluation of a custom space"))?;
            let mut cmd = WorkerCommand::new(command, Duration::from_secs_f64(*timeout_secs));
            cmd.env = env.clone();
            let size = pool_size(*configured, std::env::var(WORKERS_ENV).ok().as_deref())?;
            Ok(Box::new(WorkerPool::new(cmd, size, input_shape)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_config() {
        assert_eq!(pool_size(Some(3), None).unwrap(), 3);
        assert_eq!(pool_size(None, None).unwrap(), 1);
        assert_eq!(pool_size(Some(3), Some("5")).unwrap(), 5);
        assert!(pool_size(Some(3), Some("0")).is_err());
        assert!(pool_size(Some(3), Some("many")).is_err());
    }
}
