//! Run-config documents (TOML).
//!
//! Key names follow the evolution tables of the reference configurations in
//! snake_case: `individual_init`, `npi_limit`, `organ_prob`,
//! `add_cell_prob`, `conv` under `attr_prob`, `species_num_limit`,
//! `train_rate`, `incomplete_train_epochs` and so on. Probabilities may be
//! given as percentages or fractions; see [`parse_config`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cellgrow_core::adaptation::AdaptationConfig;
use cellgrow_core::engine::{EngineConfig, EstimationConfig};
use cellgrow_core::fitness::{TargetAttrs, TargetCount};
use cellgrow_core::search_space::{builtin_space, AffiliatedKind, BuiltinSpace, SearchSpace};
use cellgrow_core::speciation::{Coefficient, SpeciationConfig};
use cellgrow_core::variation::VariationConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: missing required section")]
    MissingSection { path: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    /// JSON-pointer style location of the problem.
    pub fn path(&self) -> &str {
        match self {
            ConfigError::Io { .. } => "",
            ConfigError::Parse { path, .. } | ConfigError::MissingSection { path } | ConfigError::Invalid { path, .. } => {
                path
            }
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }
}

/// How genotypes are scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    /// Bit-string oracle over the space's natural state encoding.
    SubsetSum {
        /// Target bit string of `0`/`1` characters; all ones when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
    },
    /// Distance to a fixed architecture.
    TargetMatch {
        counts: Vec<TargetCount>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        attrs: Vec<TargetAttrs>,
    },
    /// External worker processes speaking line-delimited JSON.
    Worker {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        /// Worker processes; `CELLGROW_WORKERS` overrides it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pool_size: Option<u32>,
        /// Extra environment passed to every worker.
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        env: BTreeMap<String, String>,
    },
}

fn default_timeout() -> f64 {
    600.0
}

/// Per-cell-type edits applied on top of a built-in space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affiliated: Option<Vec<AffiliatedKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_affiliated: Option<Vec<AffiliatedKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ceiling: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnnSection {
    /// Built-in space name: `cnn`, `gan` or `lstm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dnn_type: Option<String>,
    /// Expected organ names, checked against the space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ_types: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cell_types: BTreeMap<String, CellOverride>,
    /// A complete space; replaces the built-in one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SearchSpace>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub individual_init: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub individual_limit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub npi_init: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub npi_step: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub npi_limit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpg_init: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpg_step: Option<u32>,
    /// One weight per evolved organ, in space order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ_prob: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub add_cell_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modify_cell_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossover_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attr_prob: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attr_growth_factor: BTreeMap<String, Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species_num_limit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species_distance_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_distance_coefficient: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distance_coefficients: Vec<Coefficient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incomplete_train_epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete_train_epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incomplete_fitness_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete_fitness_threshold: Option<f64>,
    pub evaluator: EvaluatorSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_limit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// The document as written on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dnn: Option<DnnSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolution: Option<EvolutionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
}

/// A parsed and validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Built-in space the configuration started from, if any.
    pub dnn_type: Option<String>,
    pub space: SearchSpace,
    pub input_shape: Option<Vec<u32>>,
    pub engine: EngineConfig,
    pub evaluator: EvaluatorSpec,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text)
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        "/".to_string()
    } else {
        format!("/{}", s.replace('.', "/"))
    }
}

/// Parses a TOML document.
///
/// Percent handling: `add_cell_prob`, `modify_cell_prob` and
/// `crossover_prob` are divided by their sum unless they already sum to 1.
/// `train_rate` above 1 is read as a percentage. `organ_prob` and
/// `attr_prob` are relative weights and kept as written.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let doc: ConfigDocument = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: pointer(e.path()),
        message: e.inner().message().to_string(),
    })?;
    from_document(doc)
}

fn section<T>(value: Option<T>, path: &str) -> Result<T, ConfigError> {
    value.ok_or_else(|| ConfigError::MissingSection { path: path.to_string() })
}

/// Normalizes three operator probabilities to fractions.
fn operator_split(p: [f64; 3]) -> Result<[f64; 3], ConfigError> {
    let names = ["add_cell_prob", "modify_cell_prob", "crossover_prob"];
    for (v, name) in p.iter().zip(names) {
        if !(v.is_finite() && *v >= 0.0) {
            return Err(invalid(&format!("/evolution/{name}"), "must be a non-negative number"));
        }
    }
    let sum: f64 = p.iter().sum();
    if sum <= 0.0 {
        return Err(invalid("/evolution/add_cell_prob", "operator probabilities sum to zero"));
    }
    if (sum - 1.0).abs() < 1e-9 {
        Ok(p)
    } else {
        Ok(p.map(|v| v / sum))
    }
}

fn apply_cell_override(space: &mut SearchSpace, name: &str, o: &CellOverride) -> Result<(), ConfigError> {
    let path = format!("/dnn/cell_types/{name}");
    let cell = space
        .cells
        .iter_mut()
        .find(|c| c.name == name)
        .ok_or_else(|| invalid(&path, "no such cell type in the space"))?;
    let n = cell.attrs.len();
    let check_len = |v: &Vec<u32>, key: &str| {
        if v.len() == n {
            Ok(())
        } else {
            Err(invalid(&format!("{path}/{key}"), format!("expected {n} values, got {}", v.len())))
        }
    };
    if let Some(v) = &o.min {
        check_len(v, "min")?;
        for (a, m) in cell.attrs.iter_mut().zip(v) {
            a.min = *m;
        }
    }
    if let Some(v) = &o.max {
        check_len(v, "max")?;
        for (a, m) in cell.attrs.iter_mut().zip(v) {
            a.max = *m;
        }
    }
    if let Some(v) = &o.initial {
        check_len(v, "initial")?;
        cell.initial_attrs = v.clone();
    }
    if let Some(v) = &o.allowed_affiliated {
        cell.allowed_affiliated = v.clone();
    }
    if let Some(v) = &o.affiliated {
        cell.initial_affiliated = v.clone();
    }
    if let Some(c) = o.ceiling {
        space.ceilings.insert(name.to_string(), c);
    }
    Ok(())
}

fn from_document(doc: ConfigDocument) -> Result<RunConfig, ConfigError> {
    let dnn = section(doc.dnn, "/dnn")?;
    let evo = section(doc.evolution, "/evolution")?;
    let training = section(doc.training, "/training")?;
    let run = doc.run.unwrap_or_default();

    let builtin = match &dnn.dnn_type {
        Some(name) => Some(
            BuiltinSpace::from_name(name)
                .ok_or_else(|| invalid("/dnn/dnn_type", format!("unknown space {name:?} (expected cnn, gan or lstm)")))?,
        ),
        None => None,
    };
    let mut space = match (&dnn.space, builtin) {
        (Some(space), _) => space.clone(),
        (None, Some(kind)) => builtin_space(kind),
        (None, None) => return Err(invalid("/dnn", "either dnn_type or space is required")),
    };
    for (name, o) in &dnn.cell_types {
        apply_cell_override(&mut space, name, o)?;
    }
    if let Some(organs) = &dnn.organ_types {
        let actual: Vec<&str> = space.evolved_organs().map(|o| o.name.as_str()).collect();
        let all: Vec<&str> = space.organs.iter().map(|o| o.name.as_str()).collect();
        if organs.iter().map(String::as_str).ne(actual.iter().copied()) && organs.iter().map(String::as_str).ne(all.iter().copied()) {
            return Err(invalid("/dnn/organ_types", format!("space has organs {all:?}")));
        }
    }
    for (name, growth) in &evo.attr_growth_factor {
        let path = format!("/evolution/attr_growth_factor/{name}");
        let cell = space.cells.iter_mut().find(|c| &c.name == name).ok_or_else(|| invalid(&path, "no such cell type"))?;
        if growth.len() != cell.attrs.len() {
            return Err(invalid(&path, format!("expected {} values, got {}", cell.attrs.len(), growth.len())));
        }
        if growth.contains(&0) {
            return Err(invalid(&path, "growth factors must be at least 1"));
        }
        for (a, g) in cell.attrs.iter_mut().zip(growth) {
            a.growth = *g;
        }
    }
    if let Some(weights) = &evo.organ_prob {
        let evolved: Vec<usize> = (0..space.organs.len()).filter(|&i| !space.organs[i].is_mirrored()).collect();
        if weights.len() != evolved.len() {
            return Err(invalid(
                "/evolution/organ_prob",
                format!("expected one weight per evolved organ ({}), got {}", evolved.len(), weights.len()),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("/evolution/organ_prob", "weights must be non-negative"));
        }
        for (i, w) in evolved.into_iter().zip(weights) {
            space.organs[i].weight = *w;
        }
    }
    if let Err(v) = space.validate() {
        let first = &v[0];
        return Err(invalid(&format!("/dnn/space/{}", first.path.replace('.', "/")), first.message.clone()));
    }

    let mut engine = EngineConfig::table_defaults(&space);
    let d = engine.clone();
    engine.individual_init = evo.individual_init.unwrap_or(d.individual_init);
    engine.tau_q = evo.individual_limit.unwrap_or(d.tau_q);
    engine.adaptation = AdaptationConfig {
        lambda_t: evo.tpg_init.unwrap_or(d.adaptation.lambda_t),
        xi_t: evo.tpg_step.unwrap_or(d.adaptation.xi_t),
        lambda_n: evo.npi_init.unwrap_or(d.adaptation.lambda_n),
        xi_n: evo.npi_step.unwrap_or(d.adaptation.xi_n),
        tau_n: evo.npi_limit.unwrap_or(d.adaptation.tau_n),
    };
    let [p_add, p_modify, p_cross] = operator_split([
        evo.add_cell_prob.unwrap_or(d.variation.p_add),
        evo.modify_cell_prob.unwrap_or(d.variation.p_modify),
        evo.crossover_prob.unwrap_or(d.variation.p_cross),
    ])?;
    let attr_weights = if evo.attr_prob.is_empty() { d.variation.attr_weights.clone() } else { evo.attr_prob.clone() };
    engine.variation = VariationConfig { organ_weights: BTreeMap::new(), p_add, p_modify, p_cross, attr_weights };
    if let Some(problem) = engine.variation.check(&space).into_iter().next() {
        return Err(invalid("/evolution", problem));
    }
    engine.speciation = SpeciationConfig {
        coefficients: evo.distance_coefficients.clone(),
        default_coefficient: evo.default_distance_coefficient.unwrap_or(d.speciation.default_coefficient),
        tau_d: evo.species_distance_threshold.unwrap_or(d.speciation.tau_d),
        species_limit: evo.species_num_limit.unwrap_or(d.speciation.species_limit),
    };
    let train_rate = training.train_rate.unwrap_or(d.estimation.train_rate);
    let train_rate = if train_rate > 1.0 { train_rate / 100.0 } else { train_rate };
    engine.estimation = EstimationConfig {
        t_i: training.incomplete_train_epochs.unwrap_or(d.estimation.t_i),
        t_c: training.complete_train_epochs.unwrap_or(d.estimation.t_c),
        tau_f: training.incomplete_fitness_threshold.unwrap_or(d.estimation.tau_f),
        tau_fc: training.complete_fitness_threshold.unwrap_or(d.estimation.tau_fc),
        train_rate,
    };
    engine.seed = run.seed.unwrap_or(0);
    engine.tau_k = run.generation_limit.unwrap_or(d.tau_k);
    check_ranges(&engine)?;
    if let Some(problem) = engine.check(&space).into_iter().next() {
        return Err(invalid("/", problem));
    }
    check_evaluator(&training.evaluator, &space)?;

    let input_shape = dnn.input_shape.clone().or_else(|| builtin.map(BuiltinSpace::default_input_shape));
    Ok(RunConfig { dnn_type: dnn.dnn_type, space, input_shape, engine, evaluator: training.evaluator, out: run.out })
}

fn check_ranges(e: &EngineConfig) -> Result<(), ConfigError> {
    if e.individual_init < 1 || e.individual_init > e.tau_q {
        return Err(invalid("/evolution/individual_init", "must be between 1 and individual_limit"));
    }
    let a = &e.adaptation;
    for (v, key) in [
        (a.lambda_t, "tpg_init"),
        (a.xi_t, "tpg_step"),
        (a.lambda_n, "npi_init"),
        (a.xi_n, "npi_step"),
        (a.tau_n, "npi_limit"),
    ] {
        if v < 1 {
            return Err(invalid(&format!("/evolution/{key}"), "must be at least 1"));
        }
    }
    let s = &e.speciation;
    if s.species_limit < 1 || s.species_limit > e.tau_q {
        return Err(invalid("/evolution/species_num_limit", "must be between 1 and individual_limit"));
    }
    if !(s.tau_d > 0.0) {
        return Err(invalid("/evolution/species_distance_threshold", "must be positive"));
    }
    let t = &e.estimation;
    if !(t.train_rate > 0.0 && t.train_rate <= 1.0) {
        return Err(invalid("/training/train_rate", "must be in (0, 100] percent"));
    }
    if t.t_i < 1 || t.t_i >= t.t_c {
        return Err(invalid("/training/incomplete_train_epochs", "must be at least 1 and below complete_train_epochs"));
    }
    if e.tau_k < 1 {
        return Err(invalid("/run/generation_limit", "must be at least 1"));
    }
    Ok(())
}

fn check_evaluator(spec: &EvaluatorSpec, space: &SearchSpace) -> Result<(), ConfigError> {
    match spec {
        EvaluatorSpec::SubsetSum { target } => {
            let schema = cellgrow_core::genome::StateSchema::for_space(space)
                .map_err(|e| invalid("/training/evaluator", e.to_string()))?;
            if let Some(t) = target {
                if t.len() != schema.total_bits() || t.chars().any(|c| c != '0' && c != '1') {
                    return Err(invalid(
                        "/training/evaluator/target",
                        format!("expected {} characters of 0/1", schema.total_bits()),
                    ));
                }
            }
        }
        EvaluatorSpec::TargetMatch { counts, attrs } => {
            for (i, c) in counts.iter().enumerate() {
                if space.organ(&c.organ).is_none() || space.cell(&c.cell).is_none() {
                    return Err(invalid(&format!("/training/evaluator/counts/{i}"), "unknown organ or cell type"));
                }
            }
            for (i, a) in attrs.iter().enumerate() {
                let ok = space.cell(&a.cell).is_some_and(|c| c.attrs.len() == a.attrs.len());
                if !ok || space.organ(&a.organ).is_none() {
                    return Err(invalid(&format!("/training/evaluator/attrs/{i}"), "unknown cell type or wrong length"));
                }
            }
        }
        EvaluatorSpec::Worker { command, timeout_secs, pool_size, .. } => {
            if command.is_empty() {
                return Err(invalid("/training/evaluator/command", "must not be empty"));
            }
            if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                return Err(invalid("/training/evaluator/timeout_secs", "must be positive"));
            }
            if *pool_size == Some(0) {
                return Err(invalid("/training/evaluator/pool_size", "must be at least 1"));
            }
        }
    }
    Ok(())
}

/// Canonical document for a configuration: the space is written out in
/// full, so parsing the result gives back the same configuration.
pub fn to_document(config: &RunConfig) -> ConfigDocument {
    let e = &config.engine;
    let mut space = config.space.clone();
    for (organ, w) in &e.variation.organ_weights {
        if let Some(o) = space.organs.iter_mut().find(|o| &o.name == organ) {
            o.weight = *w;
        }
    }
    ConfigDocument {
        dnn: Some(DnnSection {
            dnn_type: config.dnn_type.clone(),
            organ_types: None,
            input_shape: config.input_shape.clone(),
            cell_types: BTreeMap::new(),
            space: Some(space),
        }),
        evolution: Some(EvolutionSection {
            individual_init: Some(e.individual_init),
            individual_limit: Some(e.tau_q),
            npi_init: Some(e.adaptation.lambda_n),
            npi_step: Some(e.adaptation.xi_n),
            npi_limit: Some(e.adaptation.tau_n),
            tpg_init: Some(e.adaptation.lambda_t),
            tpg_step: Some(e.adaptation.xi_t),
            organ_prob: None,
            add_cell_prob: Some(e.variation.p_add),
            modify_cell_prob: Some(e.variation.p_modify),
            crossover_prob: Some(e.variation.p_cross),
            attr_prob: e.variation.attr_weights.clone(),
            attr_growth_factor: BTreeMap::new(),
            species_num_limit: Some(e.speciation.species_limit),
            species_distance_threshold: Some(e.speciation.tau_d),
            default_distance_coefficient: Some(e.speciation.default_coefficient),
            distance_coefficients: e.speciation.coefficients.clone(),
        }),
        training: Some(TrainingSection {
            train_rate: Some(e.estimation.train_rate),
            incomplete_train_epochs: Some(e.estimation.t_i),
            complete_train_epochs: Some(e.estimation.t_c),
            incomplete_fitness_threshold: Some(e.estimation.tau_f),
            complete_fitness_threshold: Some(e.estimation.tau_fc),
            evaluator: config.evaluator.clone(),
        }),
        run: Some(RunSection { seed: Some(e.seed), generation_limit: Some(e.tau_k), out: config.out.clone() }),
    }
}

/// Serializes a configuration as TOML.
pub fn emit_config(config: &RunConfig) -> String {
    toml::to_string(&to_document(config)).expect("config documents always serialize")
}
