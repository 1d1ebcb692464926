//! Constructive neuroevolution over a type-free space of cells and organs.
//!
//! Architectures are grown from a minimal genotype (one cell per organ) by
//! cell-centered mutation and organ-centered crossover. Populations are
//! clustered into species by cell-count distance, the depth and width of the
//! search (mutation rounds per generation, offspring per individual) adapt to
//! fitness stagnation, and fitness is estimated in two phases: a short
//! incomplete budget for everyone sampled, and a long complete budget only for
//! candidates that clear a threshold.
//!
//! The crate is `no_std` (it needs `alloc`). Evaluation is pluggable through
//! [`fitness::Evaluator`]; file formats, process workers and the command line
//! live in the companion `cellgrow` crate.
//!
//! ```
//! use cellgrow_core::engine::{run, EngineConfig, RunStatus};
//! use cellgrow_core::fitness::{subset_sum_space, SubsetSumEvaluator, SubsetSumProblem};
//! use cellgrow_core::genome::StateSchema;
//!
//! // Every cell type has 16 states; with 2 cells per type the target is a
//! // 16-bit all-ones string.
//! let space = subset_sum_space(2);
//! let schema = StateSchema::for_space(&space).unwrap();
//! let evaluator = SubsetSumEvaluator::new(SubsetSumProblem::all_ones(schema));
//! let mut config = EngineConfig::table_defaults(&space);
//! config.tau_k = 5000;
//! config.estimation.tau_f = 15.5;
//! config.estimation.tau_fc = 15.5;
//! let result = run(&space, &config, &evaluator).unwrap();
//! assert_eq!(result.status, RunStatus::Satisfied);
//! assert_eq!(result.best.complete().unwrap().value(), 16.0);
//! ```

#![no_std]

extern crate alloc;

pub mod adaptation;
pub mod engine;
pub mod fitness;
pub mod genome;
pub mod rng;
pub mod search_space;
pub mod speciation;
pub mod variation;

pub use adaptation::{AdaptationConfig, AdaptationState};
pub use engine::{Engine, EngineConfig, EngineError, EstimationConfig, RunResult, RunStatus};
pub use fitness::{Evaluator, EvaluationError, EvaluationJob, Phase};
pub use genome::{CellGene, Fitness, FitnessRecord, Genotype, Phenotype, StateSchema};
pub use search_space::{builtin_space, BuiltinSpace, SearchSpace, Violation};
pub use speciation::{SpeciationConfig, SpeciesSet};
pub use variation::VariationConfig;
