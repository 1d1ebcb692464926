//! Cell-count compatibility distance and species maintenance.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::genome::Genotype;

/// Weight for one `(organ, cell type)` count term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub organ: String,
    pub cell: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciationConfig {
    #[serde(default)]
    pub coefficients: Vec<Coefficient>,
    #[serde(default = "one")]
    pub default_coefficient: f64,
    pub tau_d: f64,
    pub species_limit: u32,
}

fn one() -> f64 {
    1.0
}

impl Default for SpeciationConfig {
    fn default() -> Self {
        SpeciationConfig { coefficients: Vec::new(), default_coefficient: 1.0, tau_d: 1.0, species_limit: 10 }
    }
}

impl SpeciationConfig {
    pub fn coefficient(&self, organ: &str, cell: &str) -> f64 {
        self.coefficients
            .iter()
            .find(|c| c.organ == organ && c.cell == cell)
            .map_or(self.default_coefficient, |c| c.value)
    }

    pub fn is_valid(&self) -> bool {
        self.tau_d > 0.0
            && self.species_limit >= 1
            && self.default_coefficient >= 0.0
            && self.coefficients.iter().all(|c| c.value >= 0.0 && c.value.is_finite())
    }
}

/// Weighted L1 distance between per-organ cell-count vectors.
pub fn distance(a: &Genotype, b: &Genotype, config: &SpeciationConfig) -> f64 {
    count_distance(&a.organ_counts(), &b.organ_counts(), config)
}

fn count_distance(
    a: &BTreeMap<(String, String), u32>,
    b: &BTreeMap<(String, String), u32>,
    config: &SpeciationConfig,
) -> f64 {
    let keys: BTreeSet<&(String, String)> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| {
            let x = a.get(k).copied().unwrap_or(0);
            let y = b.get(k).copied().unwrap_or(0);
            config.coefficient(&k.0, &k.1) * f64::from(x.abs_diff(y))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Species {
    pub id: u64,
    pub representative: Genotype,
    /// Genotype ids.
    pub members: Vec<u64>,
    /// Generations since founding.
    pub age: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSet {
    pub species: Vec<Species>,
    pub next_id: u64,
}

impl SpeciesSet {
    pub fn get(&self, id: u64) -> Option<&Species> {
        self.species.iter().find(|s| s.id == id)
    }

    pub fn species_of(&self, genotype_id: u64) -> Option<u64> {
        self.species.iter().find(|s| s.members.contains(&genotype_id)).map(|s| s.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentKind {
    /// Chosen as the refreshed representative of an existing species.
    Representative,
    /// Joined the nearest species within the threshold.
    Joined,
    /// Founded a new species.
    Founded,
    /// No species within the threshold and the limit was reached; joined the
    /// nearest species regardless.
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub genotype_id: u64,
    pub species_id: u64,
    /// Distance to the representative at assignment time.
    pub distance: f64,
    pub kind: AssignmentKind,
}

/// Re-clusters `genotypes` into species.
///
/// Existing species first pick, from the whole population, the genotype
/// nearest their old representative (strictly within `tau_d`) as the new
/// representative. Every other genotype then joins the species with the
/// nearest representative within `tau_d` (ties to the lower id), founds a new
/// species, or joins the globally nearest species once the limit is reached.
/// Species without members are dropped.
pub fn speciate(
    genotypes: &[Genotype],
    previous: &SpeciesSet,
    config: &SpeciationConfig,
) -> (SpeciesSet, Vec<Assignment>) {
    let counts: Vec<_> = genotypes.iter().map(Genotype::organ_counts).collect();
    let mut species: Vec<(Species, BTreeMap<(String, String), u32>)> = Vec::new();
    let mut log = Vec::new();
    let mut claimed = vec_of(false, genotypes.len());

    for old in &previous.species {
        let rep_counts = old.representative.organ_counts();
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in counts.iter().enumerate() {
            if claimed[i] {
                continue;
            }
            let d = count_distance(&rep_counts, c, config);
            if d < config.tau_d && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, d)) = best {
            claimed[i] = true;
            let g = &genotypes[i];
            species.push((
                Species { id: old.id, representative: g.clone(), members: vec_of(g.id, 1), age: old.age + 1 },
                counts[i].clone(),
            ));
            log.push(Assignment { genotype_id: g.id, species_id: old.id, distance: d, kind: AssignmentKind::Representative });
        }
    }

    let mut next_id = previous.next_id.max(previous.species.iter().map(|s| s.id + 1).max().unwrap_or(0));
    for (i, g) in genotypes.iter().enumerate() {
        if claimed[i] {
            continue;
        }
        let mut nearest: Option<(usize, f64)> = None;
        for (j, (s, rep)) in species.iter().enumerate() {
            let d = count_distance(rep, &counts[i], config);
            let better = match nearest {
                None => true,
                Some((k, bd)) => d < bd || (d == bd && s.id < species[k].0.id),
            };
            if better {
                nearest = Some((j, d));
            }
        }
        match nearest {
            Some((j, d)) if d < config.tau_d => {
                species[j].0.members.push(g.id);
                log.push(Assignment { genotype_id: g.id, species_id: species[j].0.id, distance: d, kind: AssignmentKind::Joined });
            }
            Some((j, d)) if species.len() as u32 >= config.species_limit => {
                species[j].0.members.push(g.id);
                log.push(Assignment { genotype_id: g.id, species_id: species[j].0.id, distance: d, kind: AssignmentKind::Overflow });
            }
            _ => {
                let id = next_id;
                next_id += 1;
                species.push((
                    Species { id, representative: g.clone(), members: vec_of(g.id, 1), age: 0 },
                    counts[i].clone(),
                ));
                log.push(Assignment { genotype_id: g.id, species_id: id, distance: 0.0, kind: AssignmentKind::Founded });
            }
        }
    }

    let species = species.into_iter().map(|(s, _)| s).filter(|s| !s.members.is_empty()).collect();
    (SpeciesSet { species, next_id }, log)
}

fn vec_of<T: Clone>(value: T, n: usize) -> Vec<T> {
    alloc::vec![value; n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{minimal_genotype, relink, CellGene};
    use crate::search_space::{builtin_space, BuiltinSpace};

    fn cnn_with(id: u64, conv: usize, linear: usize) -> Genotype {
        let space = builtin_space(BuiltinSpace::Cnn);
        let mut g = minimal_genotype(&space, id).unwrap();
        let mut key = 10;
        for (organ, ty, n) in [("feature", "conv", conv), ("classifier", "linear", linear)] {
            let strand = g.strands.get_mut(organ).unwrap();
            strand.clear();
            for _ in 0..n {
                key += 1;
                strand.push(CellGene::initial(key, space.cell(ty).unwrap()));
            }
            relink(strand);
        }
        g
    }

    #[test]
    fn distance_examples() {
        let cfg = SpeciationConfig::default();
        let a = cnn_with(1, 3, 1);
        let b = cnn_with(2, 5, 2);
        assert_eq!(distance(&a, &a, &cfg), 0.0);
        assert_eq!(distance(&a, &b, &cfg), 3.0);
        assert_eq!(distance(&b, &a, &cfg), 3.0);
        let weighted = SpeciationConfig {
            coefficients: alloc::vec![Coefficient { organ: "feature".into(), cell: "conv".into(), value: 0.5 }],
            ..cfg
        };
        assert_eq!(distance(&a, &b, &weighted), 2.0);
    }

    #[test]
    fn equal_population_forms_one_species() {
        let cfg = SpeciationConfig::default();
        let pop: Vec<_> = (1..=5).map(|i| cnn_with(i, 1, 1)).collect();
        let (set, log) = speciate(&pop, &SpeciesSet::default(), &cfg);
        assert_eq!(set.species.len(), 1);
        assert_eq!(set.species[0].members, [1, 2, 3, 4, 5]);
        assert_eq!(log[0].kind, AssignmentKind::Founded);
    }

    #[test]
    fn two_clusters() {
        let cfg = SpeciationConfig::default();
        let pop = [cnn_with(1, 1, 1), cnn_with(2, 1, 1), cnn_with(3, 3, 2), cnn_with(4, 3, 2)];
        let (set, _) = speciate(&pop, &SpeciesSet::default(), &cfg);
        let members: Vec<_> = set.species.iter().map(|s| s.members.clone()).collect();
        assert_eq!(members, [alloc::vec![1, 2], alloc::vec![3, 4]]);
    }

    #[test]
    fn unchanged_population_keeps_species() {
        let cfg = SpeciationConfig::default();
        let pop = [cnn_with(1, 1, 1), cnn_with(2, 4, 1), cnn_with(3, 1, 1)];
        let (first, _) = speciate(&pop, &SpeciesSet::default(), &cfg);
        let (second, log) = speciate(&pop, &first, &cfg);
        let view = |s: &SpeciesSet| s.species.iter().map(|s| (s.id, s.representative.id, s.members.clone())).collect::<Vec<_>>();
        assert_eq!(view(&first), view(&second));
        assert!(second.species.iter().all(|s| s.age == 1));
        assert_eq!(log.iter().filter(|a| a.kind == AssignmentKind::Representative).count(), 2);
    }

    #[test]
    fn overflow_joins_nearest() {
        let cfg = SpeciationConfig { species_limit: 1, ..Default::default() };
        let pop = [cnn_with(1, 1, 1), cnn_with(2, 5, 1)];
        let (set, log) = speciate(&pop, &SpeciesSet::default(), &cfg);
        assert_eq!(set.species.len(), 1);
        assert_eq!(log[1].kind, AssignmentKind::Overflow);
        assert_eq!(log[1].distance, 4.0);
    }

    #[test]
    fn vanished_species_are_dropped() {
        let cfg = SpeciationConfig::default();
        let (first, _) = speciate(&[cnn_with(1, 1, 1), cnn_with(2, 6, 1)], &SpeciesSet::default(), &cfg);
        let (second, _) = speciate(&[cnn_with(3, 1, 1)], &first, &cfg);
        assert_eq!(second.species.len(), 1);
        assert_eq!(second.species[0].id, first.species[0].id);
        assert_eq!(second.next_id, 2);
    }
}
