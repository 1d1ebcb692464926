//! The generation loop: duplication, variation rounds, speciation,
//! two-phase estimation, adaptation and per-species quota selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{AdaptationConfig, AdaptationState};
use crate::fitness::{EvaluationJob, Evaluator, Phase};
use crate::genome::{minimal_genotype, Fitness, FitnessRecord, Genotype, IdSource};
use crate::rng::{derive, substream, Purpose};
use crate::search_space::{SearchSpace, Violation};
use crate::speciation::{speciate, Assignment, SpeciationConfig, SpeciesSet};
use crate::variation::{vary_round, RoundReport, VariationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Incomplete-phase budget.
    pub t_i: u32,
    /// Complete-phase budget.
    pub t_c: u32,
    /// Incomplete fitness above this is promoted to a complete evaluation.
    pub tau_f: f64,
    /// Complete fitness above this ends the run.
    pub tau_fc: f64,
    /// Fraction of each species sampled per generation.
    pub train_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub individual_init: u32,
    /// Population ceiling after selection.
    pub tau_q: u32,
    /// Generation limit.
    pub tau_k: u32,
    pub variation: VariationConfig,
    pub speciation: SpeciationConfig,
    pub adaptation: AdaptationConfig,
    pub estimation: EstimationConfig,
    pub seed: u64,
}

impl EngineConfig {
    /// The reference CNN configuration: population 20 (ceiling 50), T and N
    /// start at 1 with step 1 and N ceiling 10, operator split
    /// 25 / 50 / 25 %, species limit 10, distance threshold 1.0, half of
    /// each species estimated with budgets 10 / 250.
    ///
    /// Organ weights come from the space. A cell type named `conv` with four
    /// attributes and an affiliated slot gets attribute weights
    /// `[40, 15, 15, 15, 15] %`; other types are uniform.
    pub fn table_defaults(space: &SearchSpace) -> EngineConfig {
        let mut variation = VariationConfig::default();
        if let Some(conv) = space.cell("conv") {
            if conv.attrs.len() == 4 && !conv.allowed_affiliated.is_empty() {
                variation.attr_weights.insert("conv".into(), alloc::vec![0.4, 0.15, 0.15, 0.15, 0.15]);
            }
        }
        EngineConfig {
            individual_init: 20,
            tau_q: 50,
            tau_k: 50,
            variation,
            speciation: SpeciationConfig { species_limit: 10, tau_d: 1.0, ..Default::default() },
            adaptation: AdaptationConfig { lambda_t: 1, xi_t: 1, lambda_n: 1, xi_n: 1, tau_n: 10 },
            estimation: EstimationConfig { t_i: 10, t_c: 250, tau_f: 0.65, tau_fc: 0.9, train_rate: 0.5 },
            seed: 0,
        }
    }

    /// Every problem with this configuration relative to `space`.
    pub fn check(&self, space: &SearchSpace) -> Vec<String> {
        let mut out = self.variation.check(space);
        if self.individual_init < 1 || self.individual_init > self.tau_q {
            out.push(format!("individual_init must be in [1, tau_q = {}]", self.tau_q));
        }
        if self.tau_k < 1 {
            out.push("tau_k must be at least 1".into());
        }
        if !self.speciation.is_valid() {
            out.push("speciation: tau_d > 0, species_limit >= 1 and coefficients >= 0 required".into());
        }
        if self.speciation.species_limit > self.tau_q {
            out.push("species_limit must not exceed tau_q".into());
        }
        if !self.adaptation.is_valid() {
            out.push("adaptation parameters must all be at least 1".into());
        }
        let e = &self.estimation;
        if e.t_i < 1 || e.t_i >= e.t_c {
            out.push("budgets must satisfy 1 <= t_i < t_c".into());
        }
        if !(e.train_rate > 0.0 && e.train_rate <= 1.0) {
            out.push("train_rate must be in (0, 1]".into());
        }
        if e.tau_f.is_nan() || e.tau_fc.is_nan() {
            out.push("thresholds must not be NaN".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid search space: {}", first(.0))]
    InvalidSpace(Vec<Violation>),
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("inconsistent engine state: {0}")]
    InvalidState(String),
    #[error("the run has already finished")]
    Finished,
}

fn first(v: &[Violation]) -> String {
    v.first().map(|v| format!("{v}")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Satisfied,
    GenerationLimit,
}

/// Per-species summary for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesRow {
    pub species_id: u64,
    pub size: u32,
    pub best_incomplete: Option<Fitness>,
    pub best_complete: Option<Fitness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u32,
    /// T and N used in this generation.
    pub tpg: u32,
    pub npi: u32,
    pub parents: u32,
    pub offspring: u32,
    /// Best incomplete fitness over parents and offspring.
    pub best_incomplete: Fitness,
    pub best_complete: Option<Fitness>,
    pub evaluations: u32,
    /// Offspring whose fitness is still inherited after estimation.
    pub inherited: u32,
    pub species: Vec<SpeciesRow>,
}

/// One evaluator call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub genotype_id: u64,
    pub phase: Phase,
    pub fitness: Fitness,
    /// The evaluator returned an error (fitness is the failure sentinel).
    pub failed: bool,
}

/// Everything observable about one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub record: GenerationRecord,
    pub evaluations: Vec<EvaluationRecord>,
    pub assignments: Vec<Assignment>,
    pub variation: Vec<RoundReport>,
    /// Ids retained by selection (empty when the run ended this generation).
    pub selected: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: RunStatus,
    pub best: Genotype,
}

/// Complete resumable state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    /// Generations completed so far.
    pub generation: u32,
    pub population: Vec<Genotype>,
    pub species: SpeciesSet,
    pub adaptation: AdaptationState,
    pub ids: IdSource,
    pub history: Vec<GenerationRecord>,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub status: RunStatus,
    pub best: Genotype,
    pub generations: u32,
    pub history: Vec<GenerationRecord>,
}

/// Selected counts per species.
///
/// When the sizes fit under `tau_q` they are returned unchanged. Otherwise
/// each species gets `floor(q_i * tau_q / sum)`, the remainder goes one by
/// one to the largest fractional parts (ties to the earlier species), and
/// every species keeps at least one member, taken from the currently
/// largest count.
pub fn quota(sizes: &[u32], tau_q: u32) -> Vec<u32> {
    let total: u64 = sizes.iter().map(|&q| u64::from(q)).sum();
    if total <= u64::from(tau_q) {
        return sizes.to_vec();
    }
    let tau = u64::from(tau_q);
    let mut counts: Vec<u64> = sizes.iter().map(|&q| u64::from(q) * tau / total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| core::cmp::Reverse(u64::from(sizes[i]) * tau % total));
    let assigned: u64 = counts.iter().sum();
    for &i in order.iter().take((tau - assigned) as usize) {
        counts[i] += 1;
    }
    for i in 0..counts.len() {
        if counts[i] == 0 && sizes[i] > 0 {
            let donor = (0..counts.len()).filter(|&j| counts[j] > 1).max_by_key(|&j| (counts[j], core::cmp::Reverse(j)));
            if let Some(j) = donor {
                counts[j] -= 1;
            }
            counts[i] = 1;
        }
    }
    counts.into_iter().map(|c| c as u32).collect()
}

/// Best first: ranking fitness descending, then lower id.
fn by_rank(a: &Genotype, b: &Genotype) -> core::cmp::Ordering {
    b.rank().cmp(&a.rank()).then(a.id.cmp(&b.id))
}

/// Top `count` member ids of each species by ranking fitness.
pub fn select(species: &SpeciesSet, counts: &[u32], population: &BTreeMap<u64, &Genotype>) -> Vec<Vec<u64>> {
    species
        .species
        .iter()
        .zip(counts)
        .map(|(s, &count)| {
            let mut members: Vec<&Genotype> = s.members.iter().filter_map(|id| population.get(id).copied()).collect();
            members.sort_by(|a, b| by_rank(a, b));
            members.into_iter().take(count as usize).map(|g| g.id).collect()
        })
        .collect()
}

/// Seed passed to the evaluator for one genotype and phase.
pub fn evaluation_seed(seed: u64, genotype_id: u64, phase: Phase) -> u64 {
    derive(seed, &[Purpose::EvaluationSeed as u64, genotype_id, phase as u64])
}

fn max_by_fitness<'a, I: Iterator<Item = (&'a Genotype, Fitness)>>(it: I) -> Option<(&'a Genotype, Fitness)> {
    it.fold(None, |best: Option<(&Genotype, Fitness)>, (g, f)| match best {
        Some((bg, bf)) if bf > f || (bf == f && bg.id < g.id) => Some((bg, bf)),
        _ => Some((g, f)),
    })
}

pub struct Engine {
    space: SearchSpace,
    config: EngineConfig,
    state: EngineState,
}

impl Engine {
    /// Validates the inputs and builds generation 0: `individual_init`
    /// minimal genotypes with ids `1..=individual_init`.
    pub fn new(space: SearchSpace, config: EngineConfig) -> Result<Engine, EngineError> {
        Self::check(&space, &config)?;
        let population = (1..=u64::from(config.individual_init))
            .map(|id| minimal_genotype(&space, id).map_err(|_| EngineError::InvalidSpace(Vec::new())))
            .collect::<Result<Vec<_>, _>>()?;
        let state = EngineState {
            generation: 0,
            population,
            species: SpeciesSet::default(),
            adaptation: config.adaptation.initial_state(),
            ids: IdSource::starting_at(u64::from(config.individual_init) + 1),
            history: Vec::new(),
            outcome: None,
        };
        Ok(Engine { space, config, state })
    }

    /// Continues from a saved state.
    pub fn resume(space: SearchSpace, config: EngineConfig, state: EngineState) -> Result<Engine, EngineError> {
        Self::check(&space, &config)?;
        if state.history.len() != state.generation as usize {
            return Err(EngineError::InvalidState(format!(
                "{} history records for generation {}",
                state.history.len(),
                state.generation
            )));
        }
        for g in &state.population {
            if let Err(v) = crate::genome::validate(g, &space) {
                return Err(EngineError::InvalidState(format!("genotype {}: {}", g.id, first(&v))));
            }
            if g.id >= state.ids.peek() {
                return Err(EngineError::InvalidState(format!("genotype id {} not below the id counter", g.id)));
            }
        }
        if state.population.is_empty() && state.outcome.is_none() {
            return Err(EngineError::InvalidState("empty population".into()));
        }
        Ok(Engine { space, config, state })
    }

    fn check(space: &SearchSpace, config: &EngineConfig) -> Result<(), EngineError> {
        space.validate().map_err(EngineError::InvalidSpace)?;
        let problems = config.check(space);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EngineError::InvalidConfig(problems))
        }
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn into_state(self) -> EngineState {
        self.state
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.state.outcome.is_some()
    }

    pub fn result(&self) -> Option<RunResult> {
        self.state.outcome.as_ref().map(|o| RunResult {
            status: o.status,
            best: o.best.clone(),
            generations: self.state.generation,
            history: self.state.history.clone(),
        })
    }

    /// Runs one generation.
    pub fn step<E: Evaluator + ?Sized>(&mut self, evaluator: &E) -> Result<GenerationReport, EngineError> {
        if self.is_finished() {
            return Err(EngineError::Finished);
        }
        let k = self.state.generation;
        let seed = self.config.seed;
        let (tpg, npi) = (self.state.adaptation.tpg, self.state.adaptation.npi);

        let mut offspring = Vec::with_capacity(self.state.population.len() * npi as usize);
        for parent in &self.state.population {
            for _ in 0..npi {
                offspring.push(Genotype {
                    id: self.state.ids.next_id(),
                    strands: parent.strands.clone(),
                    birth_generation: k + 1,
                    fitness: parent.fitness.as_ref().map(FitnessRecord::inherit),
                });
            }
        }
        let offspring_count = offspring.len() as u32;

        let mut rng = substream(seed, Purpose::Variation, u64::from(k));
        let variation = (0..tpg)
            .map(|_| vary_round(&mut offspring, &self.space, &self.config.variation, &mut rng, &mut self.state.ids))
            .collect();

        let parents = self.state.population.len() as u32;
        let mut combined = core::mem::take(&mut self.state.population);
        combined.extend(offspring);
        combined.sort_by_key(|g| g.id);
        let (species, assignments) = speciate(&combined, &self.state.species, &self.config.speciation);

        let evaluations = self.estimate(&mut combined, &species, evaluator, k);

        let index: BTreeMap<u64, &Genotype> = combined.iter().map(|g| (g.id, g)).collect();
        let rows: Vec<SpeciesRow> = species
            .species
            .iter()
            .map(|s| {
                let members = s.members.iter().filter_map(|id| index.get(id));
                SpeciesRow {
                    species_id: s.id,
                    size: s.members.len() as u32,
                    best_incomplete: members.clone().filter_map(|g| g.incomplete()).max(),
                    best_complete: members.filter_map(|g| g.complete()).max(),
                }
            })
            .collect();
        let elite = max_by_fitness(combined.iter().filter_map(|g| g.incomplete().map(|f| (g, f))));
        let best_incomplete = elite.map_or(Fitness::FAILED, |(_, f)| f);
        let champion = max_by_fitness(combined.iter().filter_map(|g| g.complete().map(|f| (g, f))));
        let record = GenerationRecord {
            generation: k,
            tpg,
            npi,
            parents,
            offspring: offspring_count,
            best_incomplete,
            best_complete: champion.map(|(_, f)| f),
            evaluations: evaluations.len() as u32,
            inherited: combined.iter().filter(|g| g.fitness.as_ref().is_some_and(|r| r.inherited)).count() as u32,
            species: rows,
        };
        self.state.history.push(record.clone());
        self.state.generation = k + 1;

        if let Some((best, f)) = champion {
            if f.value() > self.config.estimation.tau_fc {
                self.state.outcome = Some(Outcome { status: RunStatus::Satisfied, best: best.clone() });
                self.state.population = combined;
                self.state.species = species;
                return Ok(GenerationReport { record, evaluations, assignments, variation, selected: Vec::new() });
            }
        }

        self.state.adaptation = self.state.adaptation.step(best_incomplete, &self.config.adaptation);

        let sizes: Vec<u32> = species.species.iter().map(|s| s.members.len() as u32).collect();
        let counts = quota(&sizes, self.config.tau_q);
        let mut kept = select(&species, &counts, &index);
        if let Some((elite, _)) = elite {
            if let Some(pos) = species.species.iter().position(|s| s.members.contains(&elite.id)) {
                if !kept[pos].contains(&elite.id) {
                    kept[pos].pop();
                    kept[pos].insert(0, elite.id);
                }
            }
        }
        let mut species = species;
        for (s, ids) in species.species.iter_mut().zip(&kept) {
            s.members = ids.clone();
            if let Some(best) = ids.first().and_then(|id| index.get(id)) {
                s.representative = (*best).clone();
            }
        }
        species.species.retain(|s| !s.members.is_empty());
        let mut selected: Vec<u64> = kept.into_iter().flatten().collect();
        selected.sort_unstable();
        let mut by_id: BTreeMap<u64, Genotype> = combined.into_iter().map(|g| (g.id, g)).collect();
        self.state.population = selected.iter().filter_map(|id| by_id.remove(id)).collect();
        self.state.species = species;

        if self.state.generation >= self.config.tau_k {
            let best = self.state.population.iter().min_by(|a, b| by_rank(a, b)).cloned();
            if let Some(best) = best {
                self.state.outcome = Some(Outcome { status: RunStatus::GenerationLimit, best });
            }
        }
        Ok(GenerationReport { record, evaluations, assignments, variation, selected })
    }

    /// Two-phase estimation over the speciated population.
    fn estimate<E: Evaluator + ?Sized>(
        &self,
        population: &mut [Genotype],
        species: &SpeciesSet,
        evaluator: &E,
        k: u32,
    ) -> Vec<EvaluationRecord> {
        let est = &self.config.estimation;
        let position: BTreeMap<u64, usize> = population.iter().enumerate().map(|(i, g)| (g.id, i)).collect();
        let mut rng = substream(self.config.seed, Purpose::Sampling, u64::from(k));
        let mut to_evaluate = Vec::new();
        for s in &species.species {
            let quota = libm::ceil(est.train_rate * s.members.len() as f64) as usize;
            let (mut fresh, mut known): (Vec<u64>, Vec<u64>) =
                s.members.iter().partition(|id| population[position[id]].own_incomplete().is_none());
            fresh.shuffle(&mut rng);
            known.shuffle(&mut rng);
            for id in fresh.into_iter().chain(known).take(quota) {
                if population[position[&id]].own_incomplete().is_none() {
                    to_evaluate.push(id);
                }
            }
        }
        to_evaluate.sort_unstable();
        let mut log = self.run_phase(population, &position, &to_evaluate, Phase::Incomplete, evaluator, k);

        let promoted: Vec<u64> = population
            .iter()
            .filter(|g| g.complete().is_none() && g.own_incomplete().is_some_and(|f| f.value() > est.tau_f))
            .map(|g| g.id)
            .collect();
        log.extend(self.run_phase(population, &position, &promoted, Phase::Complete, evaluator, k));
        log
    }

    fn run_phase<E: Evaluator + ?Sized>(
        &self,
        population: &mut [Genotype],
        position: &BTreeMap<u64, usize>,
        ids: &[u64],
        phase: Phase,
        evaluator: &E,
        k: u32,
    ) -> Vec<EvaluationRecord> {
        if ids.is_empty() {
            return Vec::new();
        }
        let budget = match phase {
            Phase::Incomplete => self.config.estimation.t_i,
            Phase::Complete => self.config.estimation.t_c,
        };
        let results = {
            let jobs: Vec<EvaluationJob<'_>> = ids
                .iter()
                .map(|id| EvaluationJob {
                    genotype: &population[position[id]],
                    space: &self.space,
                    phase,
                    budget,
                    seed: evaluation_seed(self.config.seed, *id, phase),
                    generation: k,
                })
                .collect();
            evaluator.evaluate_batch(&jobs)
        };
        ids.iter()
            .zip(results)
            .map(|(&id, result)| {
                let (fitness, failed) = match result {
                    Ok(v) => (Fitness::new(v), false),
                    Err(_) => (Fitness::FAILED, true),
                };
                let g = &mut population[position[&id]];
                match phase {
                    Phase::Incomplete => {
                        g.fitness = Some(FitnessRecord {
                            incomplete: Some(fitness),
                            complete: None,
                            evaluated_generation: k,
                            inherited: false,
                        });
                    }
                    Phase::Complete => {
                        if let Some(r) = g.fitness.as_mut() {
                            r.complete = Some(fitness);
                        }
                    }
                }
                EvaluationRecord { genotype_id: id, phase, fitness, failed }
            })
            .collect()
    }

    /// Steps until the run finishes.
    pub fn run_to_end<E: Evaluator + ?Sized>(&mut self, evaluator: &E) -> Result<RunResult, EngineError> {
        while !self.is_finished() {
            self.step(evaluator)?;
        }
        Ok(self.result().expect("finished run has a result"))
    }
}

/// Runs a fresh engine to completion.
pub fn run<E: Evaluator + ?Sized>(space: &SearchSpace, config: &EngineConfig, evaluator: &E) -> Result<RunResult, EngineError> {
    Engine::new(space.clone(), config.clone())?.run_to_end(evaluator)
}
