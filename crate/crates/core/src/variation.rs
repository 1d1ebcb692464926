//! Add-cell and modify-cell mutation, organ-strand crossover, and the
//! per-round operator mix.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::genome::{relink, CellGene, Genotype, IdSource};
use crate::search_space::{AffiliatedKind, CellType, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationConfig {
    /// Per-organ selection weights; organs not listed use the space weight.
    #[serde(default)]
    pub organ_weights: BTreeMap<String, f64>,
    pub p_add: f64,
    pub p_modify: f64,
    pub p_cross: f64,
    /// Per cell type: one weight per core attribute, optionally followed by
    /// one weight for the affiliated-module slot. Types not listed pick
    /// uniformly over all slots.
    #[serde(default)]
    pub attr_weights: BTreeMap<String, Vec<f64>>,
}

impl Default for VariationConfig {
    fn default() -> Self {
        VariationConfig {
            organ_weights: BTreeMap::new(),
            p_add: 0.25,
            p_modify: 0.5,
            p_cross: 0.25,
            attr_weights: BTreeMap::new(),
        }
    }
}

impl VariationConfig {
    pub fn organ_weight(&self, space: &SearchSpace, organ: &str) -> f64 {
        self.organ_weights
            .get(organ)
            .copied()
            .or_else(|| space.organ(organ).map(|o| o.weight))
            .unwrap_or(0.0)
    }

    /// Slot weights for a cell type: core attributes, then (if present) the
    /// affiliated slot.
    pub fn slot_weights(&self, cell: &CellType) -> Vec<f64> {
        match self.attr_weights.get(&cell.name) {
            Some(w) => w.clone(),
            None => {
                let n = cell.attrs.len() + usize::from(!cell.allowed_affiliated.is_empty());
                alloc::vec![1.0; n]
            }
        }
    }

    /// Problems with the configuration relative to `space`.
    pub fn check(&self, space: &SearchSpace) -> Vec<String> {
        let mut out = Vec::new();
        let probs = [self.p_add, self.p_modify, self.p_cross];
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || libm::fabs(probs.iter().sum::<f64>() - 1.0) > 1e-9 {
            out.push(String::from("operator probabilities must be non-negative and sum to 1"));
        }
        for (organ, w) in &self.organ_weights {
            if space.organ(organ).is_none() {
                out.push(alloc::format!("organ weight for unknown organ {organ:?}"));
            }
            if !(w.is_finite() && *w >= 0.0) {
                out.push(alloc::format!("organ weight for {organ:?} must be non-negative"));
            }
        }
        if !space.evolved_organs().any(|o| self.organ_weight(space, &o.name) > 0.0) {
            out.push(String::from("no evolved organ has a positive weight"));
        }
        for (name, w) in &self.attr_weights {
            let Some(cell) = space.cell(name) else {
                out.push(alloc::format!("attribute weights for unknown cell type {name:?}"));
                continue;
            };
            let n = cell.attrs.len();
            if w.len() != n && !(w.len() == n + 1 && !cell.allowed_affiliated.is_empty()) {
                out.push(alloc::format!("{name}: expected {n} or {} attribute weights, got {}", n + 1, w.len()));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                out.push(alloc::format!("{name}: attribute weights must be non-negative with a positive sum"));
            }
        }
        out
    }
}

fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    WeightedIndex::new(weights).ok().map(|d| d.sample(rng))
}

/// Legal `(position, cell type)` insertions into one organ's strand.
pub fn legal_insertions<'s>(genotype: &Genotype, space: &'s SearchSpace, organ: &str) -> Vec<(usize, &'s CellType)> {
    let Some(o) = space.organ(organ).filter(|o| !o.is_mirrored()) else {
        return Vec::new();
    };
    let counts = genotype.type_counts();
    let strand = genotype.strand(organ);
    let mut out = Vec::new();
    for pos in 0..=strand.len() {
        for ty in o.allowed_cells.iter().filter_map(|n| space.cell(n)) {
            if counts.get(&ty.name).copied().unwrap_or(0) >= space.ceiling(&ty.name) {
                continue;
            }
            let before_ok = pos == 0 || space.rule.allows_cells(&strand[pos - 1].cell_type, &ty.name);
            let after_ok = pos == strand.len() || space.rule.allows_cells(&ty.name, &strand[pos].cell_type);
            if before_ok && after_ok {
                out.push((pos, ty));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AddOutcome {
    Added { organ: String, position: usize, key: u64 },
    /// No organ admits another cell.
    Saturated,
}

/// Inserts one new cell at its type's initial attributes.
///
/// The organ is drawn by weight among organs with a legal insertion, the
/// position uniformly among legal positions, and the type uniformly among
/// types legal at that position.
pub fn mutate_add_cell<R: Rng + ?Sized>(
    genotype: &mut Genotype,
    space: &SearchSpace,
    config: &VariationConfig,
    rng: &mut R,
) -> AddOutcome {
    let candidates: Vec<(&str, Vec<(usize, &CellType)>)> = space
        .evolved_organs()
        .filter(|o| config.organ_weight(space, &o.name) > 0.0)
        .map(|o| (o.name.as_str(), legal_insertions(genotype, space, &o.name)))
        .filter(|(_, ins)| !ins.is_empty())
        .collect();
    let weights: Vec<f64> = candidates.iter().map(|(o, _)| config.organ_weight(space, o)).collect();
    let Some(choice) = pick_weighted(&weights, rng) else {
        return AddOutcome::Saturated;
    };
    let (organ, insertions) = &candidates[choice];
    let positions: Vec<usize> = insertions.iter().map(|(p, _)| *p).collect::<BTreeSet<_>>().into_iter().collect();
    let position = positions[rng.random_range(0..positions.len())];
    let types: Vec<&CellType> = insertions.iter().filter(|(p, _)| *p == position).map(|(_, t)| *t).collect();
    let ty = types[rng.random_range(0..types.len())];
    let key = genotype.max_key() + 1;
    let organ = String::from(*organ);
    let strand = genotype.strands.entry(organ.clone()).or_default();
    strand.insert(position, CellGene::initial(key, ty));
    relink(strand);
    AddOutcome::Added { organ, position, key }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffiliatedEdit {
    Add(AffiliatedKind),
    Remove(AffiliatedKind),
    /// Replace a present kind with a missing allowed one, in place.
    Swap(AffiliatedKind, AffiliatedKind),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModifyChange {
    Attribute { index: usize, from: u32, to: u32 },
    Affiliated(AffiliatedEdit),
    /// The chosen slot admitted no change.
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifyOutcome {
    pub organ: String,
    pub key: u64,
    pub change: ModifyChange,
}

/// Moves `value` one growth step up or down, clamped to the domain.
pub fn step_attribute(cell: &CellType, index: usize, value: u32, up: bool) -> u32 {
    let spec = &cell.attrs[index];
    if up {
        value.saturating_add(spec.growth).min(spec.max)
    } else {
        value.saturating_sub(spec.growth).max(spec.min)
    }
}

/// Every legal affiliated edit for a cell, grouped by category
/// (add, remove, swap); empty categories are omitted.
pub fn affiliated_options(cell: &CellGene, ty: &CellType) -> Vec<Vec<AffiliatedEdit>> {
    let missing: Vec<AffiliatedKind> =
        ty.allowed_affiliated.iter().copied().filter(|k| !cell.affiliated.contains(k)).collect();
    let adds: Vec<_> = missing.iter().map(|&k| AffiliatedEdit::Add(k)).collect();
    let removes: Vec<_> = cell.affiliated.iter().map(|&k| AffiliatedEdit::Remove(k)).collect();
    let swaps: Vec<_> = cell
        .affiliated
        .iter()
        .flat_map(|&p| missing.iter().map(move |&m| AffiliatedEdit::Swap(p, m)))
        .collect();
    [adds, removes, swaps].into_iter().filter(|v| !v.is_empty()).collect()
}

pub fn apply_affiliated_edit(cell: &mut CellGene, edit: AffiliatedEdit) {
    match edit {
        AffiliatedEdit::Add(k) => cell.affiliated.push(k),
        AffiliatedEdit::Remove(k) => cell.affiliated.retain(|x| *x != k),
        AffiliatedEdit::Swap(old, new) => {
            for x in cell.affiliated.iter_mut().filter(|x| **x == old) {
                *x = new;
            }
        }
    }
}

/// Changes one attribute of one cell; the cell count is unchanged.
pub fn mutate_modify_cell<R: Rng + ?Sized>(
    genotype: &mut Genotype,
    space: &SearchSpace,
    config: &VariationConfig,
    rng: &mut R,
) -> Option<ModifyOutcome> {
    let organs: Vec<&str> = space
        .evolved_organs()
        .map(|o| o.name.as_str())
        .filter(|o| !genotype.strand(o).is_empty())
        .collect();
    let weights: Vec<f64> = organs.iter().map(|o| config.organ_weight(space, o)).collect();
    let organ = organs[pick_weighted(&weights, rng)?];
    let strand = genotype.strands.get_mut(organ)?;
    let i = rng.random_range(0..strand.len());
    let cell = &mut strand[i];
    let ty = space.cell(&cell.cell_type)?;
    let slot = pick_weighted(&config.slot_weights(ty), rng)?;
    let change = if slot < ty.attrs.len() {
        let from = cell.attrs[slot];
        let to = step_attribute(ty, slot, from, rng.random_bool(0.5));
        cell.attrs[slot] = to;
        if from == to {
            ModifyChange::Unchanged
        } else {
            ModifyChange::Attribute { index: slot, from, to }
        }
    } else {
        let options = affiliated_options(cell, ty);
        match options.choose(rng).and_then(|c| c.choose(rng)) {
            Some(&edit) => {
                apply_affiliated_edit(cell, edit);
                ModifyChange::Affiliated(edit)
            }
            None => ModifyChange::Unchanged,
        }
    };
    Some(ModifyOutcome { organ: String::from(organ), key: cell.key, change })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossoverOutcome {
    pub organ: String,
    /// False when the swap would break a cell ceiling and the children are
    /// copies of the parents.
    pub swapped: bool,
}

/// Swaps one organ strand between two parents.
///
/// Children take fresh ids and the fitness record of the parent whose other
/// strands they keep, marked inherited. Incoming cell keys are renumbered
/// only when they clash with keys already in the child.
pub fn crossover<R: Rng + ?Sized>(
    a: &Genotype,
    b: &Genotype,
    space: &SearchSpace,
    config: &VariationConfig,
    rng: &mut R,
    ids: &mut IdSource,
) -> (Genotype, Genotype, CrossoverOutcome) {
    let organs: Vec<&str> = space.evolved_organs().map(|o| o.name.as_str()).collect();
    let weights: Vec<f64> = organs.iter().map(|o| config.organ_weight(space, o)).collect();
    let organ = match pick_weighted(&weights, rng) {
        Some(i) => organs[i],
        None => organs[rng.random_range(0..organs.len())],
    };
    let mut c = child_of(a, ids);
    let mut d = child_of(b, ids);
    let ok_c = transplant(&mut c, b.strand(organ), organ, space);
    let ok_d = transplant(&mut d, a.strand(organ), organ, space);
    let swapped = ok_c && ok_d;
    if !swapped {
        c.strands = a.strands.clone();
        d.strands = b.strands.clone();
    }
    (c, d, CrossoverOutcome { organ: String::from(organ), swapped })
}

fn child_of(parent: &Genotype, ids: &mut IdSource) -> Genotype {
    Genotype {
        id: ids.next_id(),
        strands: parent.strands.clone(),
        birth_generation: parent.birth_generation,
        fitness: parent.fitness.as_ref().map(|r| r.inherit()),
    }
}

fn transplant(child: &mut Genotype, incoming: &[CellGene], organ: &str, space: &SearchSpace) -> bool {
    child.strands.remove(organ);
    let taken: BTreeSet<u64> = child.strands.values().flatten().map(|c| c.key).collect();
    let mut strand = incoming.to_vec();
    if strand.iter().any(|c| taken.contains(&c.key)) {
        let mut next = child.max_key().max(strand.iter().map(|c| c.key).max().unwrap_or(0)) + 1;
        for cell in &mut strand {
            cell.key = next;
            next += 1;
        }
        relink(&mut strand);
    }
    child.strands.insert(String::from(organ), strand);
    child.type_counts().iter().all(|(t, n)| *n <= space.ceiling(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariationKind {
    Add,
    Modify,
    Cross,
}

/// Counts of what one round did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub added: u32,
    pub saturated: u32,
    pub modified: u32,
    pub crossed_pairs: u32,
    /// Crossover draws left unpaired and modified instead.
    pub fallbacks: u32,
}

pub fn draw_kind<R: Rng + ?Sized>(config: &VariationConfig, rng: &mut R) -> VariationKind {
    match pick_weighted(&[config.p_add, config.p_modify, config.p_cross], rng) {
        Some(0) => VariationKind::Add,
        Some(2) => VariationKind::Cross,
        _ => VariationKind::Modify,
    }
}

/// One variation round over the offspring pool.
///
/// Each member draws add, modify or crossover. Crossover draws are paired
/// uniformly without replacement; both children replace their parents in
/// place. An odd leftover is modified instead.
pub fn vary_round<R: Rng + ?Sized>(
    pool: &mut [Genotype],
    space: &SearchSpace,
    config: &VariationConfig,
    rng: &mut R,
    ids: &mut IdSource,
) -> RoundReport {
    let mut report = RoundReport::default();
    let kinds: Vec<VariationKind> = (0..pool.len()).map(|_| draw_kind(config, rng)).collect();
    let mut crossing = Vec::new();
    for (i, kind) in kinds.iter().enumerate() {
        match kind {
            VariationKind::Add => match mutate_add_cell(&mut pool[i], space, config, rng) {
                AddOutcome::Added { .. } => report.added += 1,
                AddOutcome::Saturated => report.saturated += 1,
            },
            VariationKind::Modify => {
                mutate_modify_cell(&mut pool[i], space, config, rng);
                report.modified += 1;
            }
            VariationKind::Cross => crossing.push(i),
        }
    }
    crossing.shuffle(rng);
    let mut pairs = crossing.chunks_exact(2);
    for pair in &mut pairs {
        let (i, j) = (pair[0], pair[1]);
        let (c, d, _) = crossover(&pool[i], &pool[j], space, config, rng, ids);
        pool[i] = c;
        pool[j] = d;
        report.crossed_pairs += 1;
    }
    for &i in pairs.remainder() {
        mutate_modify_cell(&mut pool[i], space, config, rng);
        report.fallbacks += 1;
    }
    report
}
