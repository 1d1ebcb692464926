//! The evaluator contract and two deterministic evaluators: the bit-string
//! subset-sum oracle and a target-architecture surrogate.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{encode_binary, DecodeError, EncodeError, Genotype, StateSchema};
use crate::search_space::SearchSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Short early-stop budget.
    Incomplete,
    /// Full budget, only for genotypes that cleared the incomplete threshold.
    Complete,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Incomplete => "incomplete",
            Phase::Complete => "complete",
        }
    }
}

/// One fitness request.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationJob<'a> {
    pub genotype: &'a Genotype,
    pub space: &'a SearchSpace,
    pub phase: Phase,
    pub budget: u32,
    pub seed: u64,
    pub generation: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvaluationError {
    #[error("decode failed: {0}")]
    Decode(#[from] DecodeError),
    #[error("encoding failed: {0}")]
    Encode(#[from] EncodeError),
    #[error("{0}")]
    Failed(String),
}

/// Scores genotypes; larger is better.
///
/// Any error, and any non-finite value, is recorded by the engine as the
/// worst possible fitness.
pub trait Evaluator {
    fn evaluate(&self, job: &EvaluationJob<'_>) -> Result<f64, EvaluationError>;

    /// Scores several jobs. Results are matched to jobs by position.
    /// Implementations may run jobs concurrently.
    fn evaluate_batch(&self, jobs: &[EvaluationJob<'_>]) -> Vec<Result<f64, EvaluationError>> {
        jobs.iter().map(|j| self.evaluate(j)).collect()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, job: &EvaluationJob<'_>) -> Result<f64, EvaluationError> {
        (**self).evaluate(job)
    }

    fn evaluate_batch(&self, jobs: &[EvaluationJob<'_>]) -> Vec<Result<f64, EvaluationError>> {
        (**self).evaluate_batch(jobs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSumProblem {
    pub schema: StateSchema,
    pub target: Vec<bool>,
}

impl SubsetSumProblem {
    pub fn all_ones(schema: StateSchema) -> Self {
        let target = alloc::vec![true; schema.total_bits()];
        SubsetSumProblem { schema, target }
    }

    pub fn total_bits(&self) -> usize {
        self.target.len()
    }
}

/// `Z - hamming(encode(genotype), target)`.
pub fn subset_sum_fitness(genotype: &Genotype, space: &SearchSpace, problem: &SubsetSumProblem) -> Result<f64, EncodeError> {
    let bits = encode_binary(genotype, space, &problem.schema)?;
    let distance = bits.iter().zip(&problem.target).filter(|(a, b)| a != b).count();
    Ok((problem.total_bits() - distance) as f64)
}

/// A CNN-shaped space in which every cell type has exactly 16 states (4 bits)
/// and both types share `ceiling`, so the natural schema has `Z = 8 * ceiling`.
///
/// conv: out_channels {8, 16}, kernel {1, 3}, stride fixed, padding {0, 1},
/// optional maxpool. linear: out_features {16, 32, 48, 64}, optional relu
/// and batchnorm. Initial cells encode the all-zero state.
pub fn subset_sum_space(ceiling: u32) -> SearchSpace {
    use crate::search_space::{AffiliatedKind, AttrSpec, BuiltinSpace};
    let mut space = crate::search_space::builtin_space(BuiltinSpace::Cnn);
    for cell in &mut space.cells {
        match cell.name.as_str() {
            "conv" => {
                cell.attrs = alloc::vec![
                    AttrSpec::new("out_channels", 8, 16, 8),
                    AttrSpec::new("kernel", 1, 3, 2),
                    AttrSpec::new("stride", 1, 1, 1),
                    AttrSpec::new("padding", 0, 1, 1),
                ];
                cell.allowed_affiliated = alloc::vec![AffiliatedKind::MaxPool];
                cell.initial_attrs = alloc::vec![8, 1, 1, 0];
            }
            _ => {
                cell.attrs = alloc::vec![AttrSpec::new("out_features", 16, 64, 16)];
                cell.allowed_affiliated = alloc::vec![AffiliatedKind::Relu, AffiliatedKind::BatchNorm];
                cell.initial_attrs = alloc::vec![16];
            }
        }
        cell.initial_affiliated.clear();
        space.ceilings.insert(cell.name.clone(), ceiling);
    }
    space
}

#[derive(Debug, Clone)]
pub struct SubsetSumEvaluator {
    pub problem: SubsetSumProblem,
}

impl SubsetSumEvaluator {
    pub fn new(problem: SubsetSumProblem) -> Self {
        SubsetSumEvaluator { problem }
    }
}

impl Evaluator for SubsetSumEvaluator {
    fn evaluate(&self, job: &EvaluationJob<'_>) -> Result<f64, EvaluationError> {
        Ok(subset_sum_fitness(job.genotype, job.space, &self.problem)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCount {
    pub organ: String,
    pub cell: String,
    pub count: u32,
}

/// Desired attribute vector for every cell of a type within an organ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetAttrs {
    pub organ: String,
    pub cell: String,
    pub attrs: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetArchitecture {
    pub counts: Vec<TargetCount>,
    #[serde(default)]
    pub attrs: Vec<TargetAttrs>,
}

/// `1 / (1 + count gap + attribute gap)`.
///
/// The count gap sums `|count - target|` over every `(organ, cell type)`
/// appearing in either the genotype or the target. The attribute gap sums,
/// over cells with an attribute target, the mean of `|value - target| /
/// (max - min)` across attributes with a non-trivial domain.
pub fn target_match_fitness(genotype: &Genotype, space: &SearchSpace, target: &TargetArchitecture) -> f64 {
    let counts = genotype.organ_counts();
    let target_count = |organ: &str, cell: &str| {
        target.counts.iter().find(|t| t.organ == organ && t.cell == cell).map_or(0, |t| t.count)
    };
    let mut gap = 0.0;
    for ((organ, cell), n) in &counts {
        gap += f64::from(n.abs_diff(target_count(organ, cell)));
    }
    for t in &target.counts {
        if !counts.contains_key(&(t.organ.clone(), t.cell.clone())) {
            gap += f64::from(t.count);
        }
    }
    for t in &target.attrs {
        let Some(ty) = space.cell(&t.cell) else { continue };
        for cell in genotype.strand(&t.organ).iter().filter(|c| c.cell_type == t.cell) {
            let mut sum = 0.0;
            let mut n = 0u32;
            for ((v, want), spec) in cell.attrs.iter().zip(&t.attrs).zip(&ty.attrs) {
                if spec.max > spec.min {
                    sum += f64::from(v.abs_diff(*want)) / f64::from(spec.max - spec.min);
                    n += 1;
                }
            }
            if n > 0 {
                gap += sum / f64::from(n);
            }
        }
    }
    1.0 / (1.0 + gap)
}

#[derive(Debug, Clone)]
pub struct TargetMatchEvaluator {
    pub target: TargetArchitecture,
}

impl Evaluator for TargetMatchEvaluator {
    fn evaluate(&self, job: &EvaluationJob<'_>) -> Result<f64, EvaluationError> {
        Ok(target_match_fitness(job.genotype, job.space, &self.target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{minimal_genotype, relink, CellGene, SlotSpec};
    use crate::search_space::{builtin_space, AttrSpec, BuiltinSpace};

    /// CNN space whose conv and linear cells have exactly 2^bits states.
    fn tiny_space() -> SearchSpace {
        let mut space = builtin_space(BuiltinSpace::Cnn);
        let conv = &mut space.cells[0];
        conv.attrs = alloc::vec![
            AttrSpec::new("out_channels", 8, 32, 8),
            AttrSpec::new("kernel", 1, 1, 1),
            AttrSpec::new("stride", 1, 1, 1),
            AttrSpec::new("padding", 0, 0, 1),
        ];
        conv.allowed_affiliated.clear();
        conv.initial_affiliated.clear();
        conv.initial_attrs = alloc::vec![8, 1, 1, 0];
        let lin = &mut space.cells[1];
        lin.attrs = alloc::vec![AttrSpec::new("out_features", 16, 64, 16)];
        lin.allowed_affiliated.clear();
        lin.initial_affiliated.clear();
        lin.initial_attrs = alloc::vec![16];
        space.ceilings.insert("conv".into(), 2);
        space.ceilings.insert("linear".into(), 1);
        space
    }

    #[test]
    fn fitness_examples() {
        let space = tiny_space();
        let schema = StateSchema::for_space(&space).unwrap();
        assert_eq!(schema.total_bits(), 6);
        let problem = SubsetSumProblem::all_ones(schema);
        let empty = Genotype { id: 1, strands: Default::default(), birth_generation: 0, fitness: None };
        assert_eq!(subset_sum_fitness(&empty, &space, &problem).unwrap(), 0.0);
        let mut g = minimal_genotype(&space, 1).unwrap();
        let strand = g.strands.get_mut("feature").unwrap();
        strand[0].attrs[0] = 32;
        strand.push(CellGene { attrs: alloc::vec![32, 1, 1, 0], ..strand[0].clone() });
        strand[1].key = 5;
        relink(strand);
        g.strands.get_mut("classifier").unwrap()[0].attrs[0] = 64;
        assert_eq!(subset_sum_fitness(&g, &space, &problem).unwrap(), 6.0);
    }

    #[test]
    fn half_ones_string() {
        let space = tiny_space();
        let schema = StateSchema {
            slots: alloc::vec![
                SlotSpec { cell_type: "conv".into(), capacity: 2, bits: 2 },
                SlotSpec { cell_type: "linear".into(), capacity: 2, bits: 2 },
            ],
        };
        let problem = SubsetSumProblem::all_ones(schema);
        let mut g = minimal_genotype(&space, 1).unwrap();
        g.strands.get_mut("feature").unwrap()[0].attrs[0] = 32;
        g.strands.remove("classifier");
        let feature = g.strands.get_mut("feature").unwrap();
        feature.push(CellGene { key: 7, attrs: alloc::vec![32, 1, 1, 0], ..feature[0].clone() });
        relink(feature);
        // 11 11 00 00
        assert_eq!(subset_sum_fitness(&g, &space, &problem).unwrap(), 4.0);
    }

    #[test]
    fn subset_sum_space_widths() {
        for (c, z) in [(2, 16), (4, 32), (8, 64)] {
            let space = subset_sum_space(c);
            assert_eq!(space.validate(), Ok(()));
            let schema = StateSchema::for_space(&space).unwrap();
            assert!(schema.slots.iter().all(|s| s.bits == 4));
            assert_eq!(schema.total_bits(), z);
            let g = minimal_genotype(&space, 1).unwrap();
            let problem = SubsetSumProblem::all_ones(schema);
            assert_eq!(subset_sum_fitness(&g, &space, &problem).unwrap(), 0.0);
        }
    }

    #[test]
    fn target_match_examples() {
        let space = builtin_space(BuiltinSpace::Cnn);
        let g = minimal_genotype(&space, 1).unwrap();
        let exact = TargetArchitecture {
            counts: alloc::vec![
                TargetCount { organ: "feature".into(), cell: "conv".into(), count: 1 },
                TargetCount { organ: "classifier".into(), cell: "linear".into(), count: 1 },
            ],
            attrs: alloc::vec![TargetAttrs { organ: "feature".into(), cell: "conv".into(), attrs: alloc::vec![16, 3, 1, 0] }],
        };
        assert_eq!(target_match_fitness(&g, &space, &exact), 1.0);
        let mut one_more = exact.clone();
        one_more.counts[0].count = 2;
        assert_eq!(target_match_fitness(&g, &space, &one_more), 0.5);
    }
}
