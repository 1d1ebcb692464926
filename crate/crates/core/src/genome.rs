//! Genotypes as per-organ gene strands, their validation against a space,
//! decoding into a module graph, and the fixed-width binary state encoding.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::search_space::{AffiliatedKind, CellType, CoreKind, Organ, SearchSpace, Violation};

/// Key used for "no in-cell" at a strand head and "no out-cell" at its tail.
pub const BOUNDARY: u64 = 0;

/// A scalar fitness, larger is better.
///
/// Failed evaluations carry [`Fitness::FAILED`], which orders below every
/// real value and serializes as the string `"failed"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fitness(f64);

impl Fitness {
    pub const FAILED: Fitness = Fitness(f64::NEG_INFINITY);

    /// Non-finite inputs collapse to [`Fitness::FAILED`].
    pub fn new(value: f64) -> Self {
        if value.is_finite() {
            Fitness(value)
        } else {
            Fitness::FAILED
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_failed(self) -> bool {
        !self.0.is_finite()
    }
}

impl Eq for Fitness {}

impl PartialOrd for Fitness {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fitness {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Fitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_failed() {
            f.write_str("failed")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Fitness {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.is_failed() {
            serializer.serialize_str("failed")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Fitness {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct FitnessVisitor;
        impl Visitor<'_> for FitnessVisitor {
            type Value = Fitness;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or \"failed\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Fitness, E> {
                Ok(Fitness::new(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Fitness, E> {
                Ok(Fitness::new(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Fitness, E> {
                Ok(Fitness::new(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Fitness, E> {
                if v == "failed" {
                    Ok(Fitness::FAILED)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        deserializer.deserialize_any(FitnessVisitor)
    }
}

/// Evaluation results attached to a genotype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub incomplete: Option<Fitness>,
    pub complete: Option<Fitness>,
    pub evaluated_generation: u32,
    /// Copied from the parent at duplication rather than measured on this
    /// genotype.
    #[serde(default)]
    pub inherited: bool,
}

impl FitnessRecord {
    /// Ranking key: complete fitness when present, else incomplete.
    pub fn rank(&self) -> Fitness {
        self.complete.or(self.incomplete).unwrap_or(Fitness::FAILED)
    }

    /// The record an offspring starts with.
    pub fn inherit(&self) -> FitnessRecord {
        FitnessRecord {
            incomplete: self.incomplete,
            complete: None,
            evaluated_generation: self.evaluated_generation,
            inherited: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGene {
    pub key: u64,
    #[serde(rename = "type")]
    pub cell_type: String,
    #[serde(rename = "in")]
    pub in_key: u64,
    #[serde(rename = "out")]
    pub out_key: u64,
    pub attrs: Vec<u32>,
    pub affiliated: Vec<AffiliatedKind>,
}

impl CellGene {
    pub fn initial(key: u64, cell: &CellType) -> Self {
        CellGene {
            key,
            cell_type: cell.name.clone(),
            in_key: BOUNDARY,
            out_key: BOUNDARY,
            attrs: cell.initial_attrs.clone(),
            affiliated: cell.initial_affiliated.clone(),
        }
    }

    fn same_structure(&self, other: &CellGene) -> bool {
        self.cell_type == other.cell_type && self.attrs == other.attrs && self.affiliated == other.affiliated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub id: u64,
    pub strands: BTreeMap<String, Vec<CellGene>>,
    #[serde(default)]
    pub birth_generation: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness: Option<FitnessRecord>,
}

impl Genotype {
    pub fn strand(&self, organ: &str) -> &[CellGene] {
        self.strands.get(organ).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn cell_count(&self) -> usize {
        self.strands.values().map(Vec::len).sum()
    }

    /// Cells per `(organ, cell type)`.
    pub fn organ_counts(&self) -> BTreeMap<(String, String), u32> {
        let mut counts = BTreeMap::new();
        for (organ, strand) in &self.strands {
            for cell in strand {
                *counts.entry((organ.clone(), cell.cell_type.clone())).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Cells per cell type across all strands.
    pub fn type_counts(&self) -> BTreeMap<String, u32> {
        let mut counts = BTreeMap::new();
        for cell in self.strands.values().flatten() {
            *counts.entry(cell.cell_type.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn max_key(&self) -> u64 {
        self.strands.values().flatten().map(|c| c.key).max().unwrap_or(BOUNDARY)
    }

    /// Equality of architecture, ignoring ids, cell keys and fitness.
    pub fn same_structure(&self, other: &Genotype) -> bool {
        self.strands.len() == other.strands.len()
            && self.strands.iter().zip(&other.strands).all(|((oa, a), (ob, b))| {
                oa == ob && a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_structure(y))
            })
    }

    pub fn own_incomplete(&self) -> Option<Fitness> {
        self.fitness.as_ref().filter(|r| !r.inherited).and_then(|r| r.incomplete)
    }

    pub fn incomplete(&self) -> Option<Fitness> {
        self.fitness.as_ref().and_then(|r| r.incomplete)
    }

    pub fn complete(&self) -> Option<Fitness> {
        self.fitness.as_ref().and_then(|r| r.complete)
    }

    pub fn rank(&self) -> Fitness {
        self.fitness.as_ref().map(FitnessRecord::rank).unwrap_or(Fitness::FAILED)
    }
}

/// Monotonic genotype id allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdSource {
    next: u64,
}

impl IdSource {
    pub fn starting_at(next: u64) -> Self {
        IdSource { next }
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

/// Rewrites in/out keys so the strand is a chain in stored order.
pub fn relink(strand: &mut [CellGene]) {
    let keys: Vec<u64> = strand.iter().map(|c| c.key).collect();
    for (i, cell) in strand.iter_mut().enumerate() {
        cell.in_key = if i == 0 { BOUNDARY } else { keys[i - 1] };
        cell.out_key = keys.get(i + 1).copied().unwrap_or(BOUNDARY);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenomeError {
    #[error("search space is invalid ({} violations)", .0.len())]
    InvalidSpace(Vec<Violation>),
}

/// One cell per evolved organ, using the organ's first allowed cell type at
/// its initial attributes.
pub fn minimal_genotype(space: &SearchSpace, id: u64) -> Result<Genotype, GenomeError> {
    space.validate().map_err(GenomeError::InvalidSpace)?;
    let mut strands = BTreeMap::new();
    let mut key = BOUNDARY;
    for organ in space.evolved_organs() {
        let cell = space.cell(&organ.allowed_cells[0]).expect("validated space");
        key += 1;
        strands.insert(organ.name.clone(), vec![CellGene::initial(key, cell)]);
    }
    Ok(Genotype { id, strands, birth_generation: 0, fitness: None })
}

/// Ok iff every genotype invariant holds against `space`.
pub fn validate(genotype: &Genotype, space: &SearchSpace) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let evolved: BTreeSet<&str> = space.evolved_organs().map(|o| o.name.as_str()).collect();
    for organ in &evolved {
        if !genotype.strands.contains_key(*organ) {
            out.push(Violation::new(format!("strands.{organ}"), "missing strand"));
        }
    }
    let mut keys = BTreeSet::new();
    for (organ_name, strand) in &genotype.strands {
        let path = format!("strands.{organ_name}");
        let Some(organ) = space.organ(organ_name).filter(|o| !o.is_mirrored()) else {
            out.push(Violation::new(path, "strand for an unknown or mirrored organ"));
            continue;
        };
        if strand.is_empty() {
            out.push(Violation::new(path.clone(), "empty strand"));
            continue;
        }
        for (i, cell) in strand.iter().enumerate() {
            let cpath = format!("{path}[{i}]");
            if cell.key == BOUNDARY {
                out.push(Violation::new(format!("{cpath}.key"), "key 0 is reserved"));
            } else if !keys.insert(cell.key) {
                out.push(Violation::new(format!("{cpath}.key"), format!("duplicate key {}", cell.key)));
            }
            validate_cell(cell, organ, space, &cpath, &mut out);
        }
        validate_chain(strand, &path, &mut out);
        for pair in strand.windows(2) {
            if !space.rule.allows_cells(&pair[0].cell_type, &pair[1].cell_type) {
                out.push(Violation::new(
                    path.clone(),
                    format!("relation ({}, {}) not allowed", pair[0].cell_type, pair[1].cell_type),
                ));
            }
        }
    }
    for (cell_type, count) in genotype.type_counts() {
        let ceiling = space.ceiling(&cell_type);
        if count > ceiling {
            out.push(Violation::new(
                format!("cells.{cell_type}"),
                format!("ceiling exceeded: {count} > {ceiling}"),
            ));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn validate_cell(cell: &CellGene, organ: &Organ, space: &SearchSpace, path: &str, out: &mut Vec<Violation>) {
    if !organ.allowed_cells.contains(&cell.cell_type) {
        out.push(Violation::new(
            format!("{path}.type"),
            format!("{} not allowed in organ {}", cell.cell_type, organ.name),
        ));
    }
    let Some(ty) = space.cell(&cell.cell_type) else {
        out.push(Violation::new(format!("{path}.type"), "undeclared cell type"));
        return;
    };
    if cell.attrs.len() != ty.attrs.len() {
        out.push(Violation::new(format!("{path}.attrs"), "attribute count mismatch"));
    } else {
        for (j, (v, spec)) in cell.attrs.iter().zip(&ty.attrs).enumerate() {
            if !spec.contains(*v) {
                out.push(Violation::new(
                    format!("{path}.attrs[{j}]"),
                    format!("{v} outside [{}, {}]", spec.min, spec.max),
                ));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for kind in &cell.affiliated {
        if !ty.allowed_affiliated.contains(kind) || !seen.insert(*kind) {
            out.push(Violation::new(
                format!("{path}.affiliated"),
                format!("{} not allowed or repeated", kind.as_str()),
            ));
        }
    }
}

fn validate_chain(strand: &[CellGene], path: &str, out: &mut Vec<Violation>) {
    let index: BTreeMap<u64, usize> = strand.iter().enumerate().map(|(i, c)| (c.key, i)).collect();
    let heads: Vec<usize> = (0..strand.len()).filter(|&i| strand[i].in_key == BOUNDARY).collect();
    let head = match heads.as_slice() {
        [] => {
            out.push(Violation::new(path, "cycle: no cell without an in-cell"));
            return;
        }
        [h] => *h,
        _ => {
            out.push(Violation::new(path, "multiple source cells"));
            return;
        }
    };
    let mut visited = vec![false; strand.len()];
    let mut order = Vec::with_capacity(strand.len());
    let mut current = head;
    loop {
        if visited[current] {
            out.push(Violation::new(path, "cycle in cell links"));
            return;
        }
        visited[current] = true;
        order.push(current);
        let next = strand[current].out_key;
        if next == BOUNDARY {
            break;
        }
        match index.get(&next) {
            Some(&n) => {
                if strand[n].in_key != strand[current].key {
                    out.push(Violation::new(path, format!("inconsistent link into cell {next}")));
                    return;
                }
                current = n;
            }
            None => {
                out.push(Violation::new(path, format!("dangling out-link to {next}")));
                return;
            }
        }
    }
    if order.len() != strand.len() {
        out.push(Violation::new(path, "disconnected cells (more than one chain)"));
    } else if order.iter().enumerate().any(|(i, &j)| i != j) {
        out.push(Violation::new(path, "stored order differs from link order"));
    }
}

/// Module kinds appearing in a phenotype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Conv,
    Linear,
    ConvTranspose,
    ConvLstm,
    BatchNorm,
    Relu,
    LeakyRelu,
    MaxPool,
    GroupNorm,
}

impl From<CoreKind> for ModuleKind {
    fn from(k: CoreKind) -> Self {
        match k {
            CoreKind::Conv => ModuleKind::Conv,
            CoreKind::Linear => ModuleKind::Linear,
            CoreKind::ConvTranspose => ModuleKind::ConvTranspose,
            CoreKind::ConvLstm => ModuleKind::ConvLstm,
        }
    }
}

impl From<AffiliatedKind> for ModuleKind {
    fn from(k: AffiliatedKind) -> Self {
        match k {
            AffiliatedKind::BatchNorm => ModuleKind::BatchNorm,
            AffiliatedKind::Relu => ModuleKind::Relu,
            AffiliatedKind::LeakyRelu => ModuleKind::LeakyRelu,
            AffiliatedKind::MaxPool => ModuleKind::MaxPool,
            AffiliatedKind::GroupNorm => ModuleKind::GroupNorm,
        }
    }
}

/// One module of a decoded architecture.
///
/// `attrs` are fully resolved:
/// conv / convtranspose `[in_c, out_c, kernel, stride, padding]`,
/// linear `[in, out]`, convlstm `[in_c, hidden_c, kernel]`,
/// batchnorm / groupnorm `[channels]`, maxpool `[kernel, stride]`,
/// activations `[]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub kind: ModuleKind,
    pub attrs: Vec<u32>,
    pub cell: u64,
    pub organ: String,
    /// Output tensor shape of this module.
    #[serde(default)]
    pub shape: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derived {
    pub cell_counts: BTreeMap<String, u32>,
    pub layer_count: u32,
    pub parameter_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phenotype {
    pub nodes: Vec<Node>,
    pub edges: Vec<[usize; 2]>,
    pub input_shape: Vec<u32>,
    #[serde(default)]
    pub derived: Derived,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("genotype is invalid: {}", .0.first().map(|v| format!("{v}")).unwrap_or_default())]
    Invalid(Vec<Violation>),
    #[error("unsupported input shape {0:?}")]
    InputShape(Vec<u32>),
    #[error("spatial underflow at cell {cell} in organ {organ}: {module} output would be < 1")]
    Underflow { cell: u64, organ: String, module: &'static str },
    #[error("cell {cell} in organ {organ}: {module} needs a spatial input")]
    NotSpatial { cell: u64, organ: String, module: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Flat(u32),
    Spatial { c: u32, h: u32, w: u32 },
}

impl Shape {
    fn channels(self) -> u32 {
        match self {
            Shape::Flat(f) => f,
            Shape::Spatial { c, .. } => c,
        }
    }

    fn spatial(self) -> (u32, u32, u32) {
        match self {
            Shape::Flat(f) => (f, 1, 1),
            Shape::Spatial { c, h, w } => (c, h, w),
        }
    }

    fn to_vec(self, time: Option<u32>) -> Vec<u32> {
        let mut v = match self {
            Shape::Flat(f) => vec![f],
            Shape::Spatial { c, h, w } => vec![c, h, w],
        };
        v.extend(time);
        v
    }
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when it would drop below 1.
fn conv_out(n: u32, kernel: u32, stride: u32, padding: u32) -> Option<u32> {
    let padded = n + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `(n - 1) * s - 2p + k`, or `None` when it would drop below 1.
fn conv_transpose_out(n: u32, kernel: u32, stride: u32, padding: u32) -> Option<u32> {
    let grown = (n - 1) * stride + kernel;
    grown.checked_sub(2 * padding).filter(|&v| v >= 1)
}

/// Decoder strand derived from an encoder strand: reversed, with conv and
/// convtranspose swapped and everything else copied. Cells keep the key of
/// the encoder cell they mirror.
pub fn mirror_strand(source: &[CellGene], target: &Organ, space: &SearchSpace) -> Vec<CellGene> {
    let mut strand: Vec<CellGene> = source
        .iter()
        .rev()
        .filter_map(|cell| {
            let src_type = space.cell(&cell.cell_type)?;
            let ty = space.mirror_cell_type(target, src_type)?;
            Some(CellGene {
                key: cell.key,
                cell_type: ty.name.clone(),
                in_key: BOUNDARY,
                out_key: BOUNDARY,
                attrs: cell.attrs.clone(),
                affiliated: cell.affiliated.iter().copied().filter(|k| ty.allowed_affiliated.contains(k)).collect(),
            })
        })
        .collect();
    relink(&mut strand);
    strand
}

/// Expands a genotype into its module graph.
///
/// Organs are chained in space order; inside a cell the core module comes
/// first, followed by its affiliated modules in stored order.
pub fn decode(genotype: &Genotype, space: &SearchSpace, input_shape: &[u32]) -> Result<Phenotype, DecodeError> {
    validate(genotype, space).map_err(DecodeError::Invalid)?;
    let (mut shape, time) = match *input_shape {
        [f] if f >= 1 => (Shape::Flat(f), None),
        [c, h, w] if c >= 1 && h >= 1 && w >= 1 => (Shape::Spatial { c, h, w }, None),
        [c, h, w, t] if c >= 1 && h >= 1 && w >= 1 && t >= 1 => (Shape::Spatial { c, h, w }, Some(t)),
        _ => return Err(DecodeError::InputShape(input_shape.to_vec())),
    };

    let mut nodes: Vec<Node> = Vec::new();
    let mut cell_counts = BTreeMap::new();
    for organ in &space.organs {
        let mirrored;
        let strand: &[CellGene] = match &organ.mirror_of {
            Some(source) => {
                mirrored = mirror_strand(genotype.strand(source), organ, space);
                &mirrored
            }
            None => genotype.strand(&organ.name),
        };
        for cell in strand {
            let ty = space.cell(&cell.cell_type).expect("validated genotype");
            *cell_counts.entry(cell.cell_type.clone()).or_insert(0) += 1;
            let mut push = |kind: ModuleKind, attrs: Vec<u32>, shape: Shape| {
                nodes.push(Node { kind, attrs, cell: cell.key, organ: organ.name.clone(), shape: shape.to_vec(time) });
            };
            let underflow = |module| DecodeError::Underflow { cell: cell.key, organ: organ.name.clone(), module };
            shape = match ty.core {
                CoreKind::Conv | CoreKind::ConvTranspose => {
                    let [out_c, k, s, p] = [cell.attrs[0], cell.attrs[1], cell.attrs[2], cell.attrs[3]];
                    let (c, h, w) = shape.spatial();
                    let (nh, nw) = if ty.core == CoreKind::Conv {
                        (conv_out(h, k, s, p), conv_out(w, k, s, p))
                    } else {
                        (conv_transpose_out(h, k, s, p), conv_transpose_out(w, k, s, p))
                    };
                    let (Some(h), Some(w)) = (nh, nw) else {
                        return Err(underflow(ty.core.as_str()));
                    };
                    let next = Shape::Spatial { c: out_c, h, w };
                    push(ty.core.into(), vec![c, out_c, k, s, p], next);
                    next
                }
                CoreKind::Linear => {
                    let (c, h, w) = shape.spatial();
                    let next = Shape::Flat(cell.attrs[0]);
                    push(ModuleKind::Linear, vec![c * h * w, cell.attrs[0]], next);
                    next
                }
                CoreKind::ConvLstm => {
                    let k = cell.attrs[0];
                    let (c, h, w) = shape.spatial();
                    let pad = k / 2;
                    let (Some(h), Some(w)) = (conv_out(h, k, 1, pad), conv_out(w, k, 1, pad)) else {
                        return Err(underflow("convlstm"));
                    };
                    let next = Shape::Spatial { c, h, w };
                    push(ModuleKind::ConvLstm, vec![c, c, k], next);
                    next
                }
            };
            for &aff in &cell.affiliated {
                shape = match aff {
                    AffiliatedKind::MaxPool => {
                        let Shape::Spatial { c, h, w } = shape else {
                            return Err(DecodeError::NotSpatial {
                                cell: cell.key,
                                organ: organ.name.clone(),
                                module: "maxpool",
                            });
                        };
                        if h < 2 || w < 2 {
                            return Err(underflow("maxpool"));
                        }
                        let next = Shape::Spatial { c, h: h / 2, w: w / 2 };
                        push(ModuleKind::MaxPool, vec![2, 2], next);
                        next
                    }
                    AffiliatedKind::BatchNorm | AffiliatedKind::GroupNorm => {
                        push(aff.into(), vec![shape.channels()], shape);
                        shape
                    }
                    AffiliatedKind::Relu | AffiliatedKind::LeakyRelu => {
                        push(aff.into(), vec![], shape);
                        shape
                    }
                };
            }
        }
    }
    let edges = (1..nodes.len()).map(|i| [i - 1, i]).collect();
    let mut phenotype = Phenotype { nodes, edges, input_shape: input_shape.to_vec(), derived: Derived::default() };
    phenotype.derived = Derived {
        cell_counts,
        layer_count: phenotype.nodes.len() as u32,
        parameter_count: parameter_count(&phenotype),
    };
    Ok(phenotype)
}

/// Trainable parameters of a single module.
pub fn node_parameters(node: &Node) -> u64 {
    let a = |i: usize| u64::from(node.attrs.get(i).copied().unwrap_or(0));
    match node.kind {
        ModuleKind::Conv | ModuleKind::ConvTranspose => a(1) * (a(0) * a(2) * a(2) + 1),
        ModuleKind::Linear => a(1) * (a(0) + 1),
        ModuleKind::ConvLstm => 4 * a(1) * ((a(0) + a(1)) * a(2) * a(2) + 1),
        ModuleKind::BatchNorm | ModuleKind::GroupNorm => 2 * a(0),
        ModuleKind::Relu | ModuleKind::LeakyRelu | ModuleKind::MaxPool => 0,
    }
}

pub fn parameter_count(phenotype: &Phenotype) -> u64 {
    phenotype.nodes.iter().map(node_parameters).sum()
}

/// Slots reserved for one cell type in the binary encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub cell_type: String,
    /// `c_e`: maximum number of cells of this type.
    pub capacity: u32,
    /// `l_e`: bits per cell.
    pub bits: u32,
}

/// Layout of the fixed-width binary encoding, in cell-catalog order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSchema {
    pub slots: Vec<SlotSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("cell {key}: attribute {attr} = {value} outside its domain")]
    AttrOutOfDomain { key: u64, attr: usize, value: u32 },
    #[error("cell type {0:?} has no slots in the schema")]
    UnknownCellType(String),
    #[error("{count} cells of type {cell_type:?} exceed the schema capacity {capacity}")]
    CapacityExceeded { cell_type: String, count: u32, capacity: u32 },
    #[error("cell {key}: state {state} does not fit in {bits} bits")]
    StateTooWide { key: u64, state: u64, bits: u32 },
    #[error("schema is empty or has a zero-width slot")]
    DegenerateSchema,
}

fn bit_width(levels: u64) -> u32 {
    if levels <= 1 {
        0
    } else {
        64 - (levels - 1).leading_zeros()
    }
}

/// Bits needed to encode every state of a cell type: one field per core
/// attribute (wide enough for its lattice levels) and one presence bit per
/// allowed affiliated kind.
pub fn natural_bits(cell: &CellType) -> u32 {
    cell.attrs.iter().map(|a| bit_width(a.levels())).sum::<u32>() + cell.allowed_affiliated.len() as u32
}

/// State index of one cell.
///
/// Attribute fields are packed little-endian (attribute 0 in the lowest
/// bits); each field holds the attribute's lattice level
/// `(value - min) / growth`. Affiliated presence bits follow, in the order of
/// `allowed_affiliated`.
pub fn cell_state_index(cell: &CellGene, ty: &CellType) -> Result<u64, EncodeError> {
    let mut index = 0u64;
    let mut offset = 0u32;
    for (j, spec) in ty.attrs.iter().enumerate() {
        let value = cell.attrs.get(j).copied().unwrap_or(0);
        if !spec.contains(value) {
            return Err(EncodeError::AttrOutOfDomain { key: cell.key, attr: j, value });
        }
        let level = u64::from((value - spec.min) / spec.growth.max(1));
        index |= level << offset;
        offset += bit_width(spec.levels());
    }
    for kind in &ty.allowed_affiliated {
        if cell.affiliated.contains(kind) {
            index |= 1 << offset;
        }
        offset += 1;
    }
    Ok(index)
}

impl StateSchema {
    /// Natural schema of a space: capacity = cell ceiling, width = the bits
    /// needed for the type's full state set.
    pub fn for_space(space: &SearchSpace) -> Result<StateSchema, EncodeError> {
        let schema = StateSchema {
            slots: space
                .cells
                .iter()
                .map(|c| SlotSpec { cell_type: c.name.clone(), capacity: space.ceiling(&c.name), bits: natural_bits(c) })
                .collect(),
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn check(&self) -> Result<(), EncodeError> {
        if self.total_bits() == 0 || self.slots.iter().any(|s| s.bits == 0 || s.bits > 64) {
            return Err(EncodeError::DegenerateSchema);
        }
        Ok(())
    }

    /// `Z = sum(c_e * l_e)`.
    pub fn total_bits(&self) -> usize {
        self.slots.iter().map(|s| s.capacity as usize * s.bits as usize).sum()
    }
}

/// Fixed-width bit string of a genotype.
///
/// Per cell type (schema order) there are `capacity` slots of `bits` bits.
/// Cells fill their type's slots in strand order (organs in space order);
/// unused slots stay zero. Each slot holds the cell's state index written
/// most-significant bit first.
pub fn encode_binary(genotype: &Genotype, space: &SearchSpace, schema: &StateSchema) -> Result<Vec<bool>, EncodeError> {
    schema.check()?;
    let mut per_type: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for organ in space.evolved_organs() {
        for cell in genotype.strand(&organ.name) {
            let ty = space.cell(&cell.cell_type).ok_or_else(|| EncodeError::UnknownCellType(cell.cell_type.clone()))?;
            per_type.entry(ty.name.as_str()).or_default().push(cell_state_index(cell, ty)?);
            let _ = cell.key;
        }
    }
    for (ty, states) in &per_type {
        let slot = schema
            .slots
            .iter()
            .find(|s| s.cell_type == *ty)
            .ok_or_else(|| EncodeError::UnknownCellType(ty.to_string()))?;
        if states.len() as u32 > slot.capacity {
            return Err(EncodeError::CapacityExceeded {
                cell_type: ty.to_string(),
                count: states.len() as u32,
                capacity: slot.capacity,
            });
        }
    }
    let mut bits = Vec::with_capacity(schema.total_bits());
    for slot in &schema.slots {
        let states = per_type.get(slot.cell_type.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        for i in 0..slot.capacity as usize {
            let state = states.get(i).copied().unwrap_or(0);
            if slot.bits < 64 && state >> slot.bits != 0 {
                return Err(EncodeError::StateTooWide { key: 0, state, bits: slot.bits });
            }
            bits.extend((0..slot.bits).rev().map(|b| (state >> b) & 1 == 1));
        }
    }
    Ok(bits)
}

/// Renders a bit string as `0`/`1` characters.
pub fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{builtin_space, BuiltinSpace};

    fn cnn() -> SearchSpace {
        builtin_space(BuiltinSpace::Cnn)
    }

    fn push_cell(g: &mut Genotype, organ: &str, cell: CellGene) {
        let strand = g.strands.get_mut(organ).unwrap();
        strand.push(cell);
        relink(strand);
    }

    fn conv(key: u64, attrs: [u32; 4], affiliated: &[AffiliatedKind]) -> CellGene {
        CellGene {
            key,
            cell_type: "conv".into(),
            in_key: 0,
            out_key: 0,
            attrs: attrs.to_vec(),
            affiliated: affiliated.to_vec(),
        }
    }

    #[test]
    fn minimal_cnn_has_one_conv_and_one_linear() {
        let g = minimal_genotype(&cnn(), 1).unwrap();
        assert_eq!(g.strand("feature").len(), 1);
        assert_eq!(g.strand("classifier").len(), 1);
        let c = &g.strand("feature")[0];
        assert_eq!(c.attrs, vec![16, 3, 1, 0]);
        assert_eq!(
            c.affiliated,
            vec![AffiliatedKind::BatchNorm, AffiliatedKind::Relu, AffiliatedKind::MaxPool]
        );
        assert_eq!(validate(&g, &cnn()), Ok(()));
    }

    #[test]
    fn minimal_gan() {
        let space = builtin_space(BuiltinSpace::Gan);
        let g = minimal_genotype(&space, 1).unwrap();
        assert_eq!(g.strand("generator")[0].cell_type, "convtranspose");
        assert_eq!(g.strand("generator")[0].attrs, vec![32, 2, 1, 0]);
        assert_eq!(g.strand("discriminator")[0].cell_type, "conv");
    }

    #[test]
    fn minimal_is_deterministic_up_to_id() {
        let a = minimal_genotype(&cnn(), 1).unwrap();
        let b = minimal_genotype(&cnn(), 2).unwrap();
        assert_eq!(a.strands, b.strands);
        assert_ne!(a.id, b.id);
    }

    #[test]
    fn minimal_rejects_invalid_space() {
        let mut s = cnn();
        s.rule.degree = 0;
        assert!(matches!(minimal_genotype(&s, 1), Err(GenomeError::InvalidSpace(_))));
    }

    #[test]
    fn cycle_detected() {
        let space = cnn();
        let mut g = minimal_genotype(&space, 1).unwrap();
        push_cell(&mut g, "feature", conv(3, [16, 3, 1, 0], &[]));
        let strand = g.strands.get_mut("feature").unwrap();
        strand[0].in_key = 3;
        strand[1].out_key = 1;
        let v = validate(&g, &space).unwrap_err();
        assert!(v.iter().any(|v| v.message.contains("cycle")), "{v:?}");
    }

    #[test]
    fn ceiling_detected() {
        let mut space = cnn();
        space.ceilings.insert("conv".into(), 2);
        let mut g = minimal_genotype(&space, 1).unwrap();
        push_cell(&mut g, "feature", conv(3, [16, 3, 1, 0], &[]));
        push_cell(&mut g, "feature", conv(4, [16, 3, 1, 0], &[]));
        let v = validate(&g, &space).unwrap_err();
        assert!(v.iter().any(|v| v.message.contains("ceiling")), "{v:?}");
    }

    #[test]
    fn wrong_organ_and_relation() {
        let space = cnn();
        let mut g = minimal_genotype(&space, 1).unwrap();
        let lin = g.strand("classifier")[0].clone();
        let mut moved = lin.clone();
        moved.key = 9;
        push_cell(&mut g, "feature", moved);
        let v = validate(&g, &space).unwrap_err();
        assert!(v.iter().any(|v| v.message.contains("not allowed in organ")));
        assert!(v.iter().any(|v| v.message.contains("relation")));
    }

    #[test]
    fn duplicate_keys_detected() {
        let space = cnn();
        let mut g = minimal_genotype(&space, 1).unwrap();
        g.strands.get_mut("classifier").unwrap()[0].key = 1;
        assert!(validate(&g, &space).is_err());
    }

    #[test]
    fn lenet_decodes_to_five_cells_in_two_organs() {
        let space = cnn();
        let mut g = minimal_genotype(&space, 1).unwrap();
        push_cell(&mut g, "feature", conv(3, [16, 3, 1, 0], &[AffiliatedKind::Relu, AffiliatedKind::MaxPool]));
        for key in [4, 5] {
            let mut l = g.strand("classifier")[0].clone();
            l.key = key;
            push_cell(&mut g, "classifier", l);
        }
        let p = decode(&g, &space, &[3, 32, 32]).unwrap();
        assert_eq!(p.derived.cell_counts.get("conv"), Some(&2));
        assert_eq!(p.derived.cell_counts.get("linear"), Some(&3));
        let organs: BTreeSet<_> = p.nodes.iter().map(|n| n.organ.as_str()).collect();
        assert_eq!(organs.len(), 2);
        // feature: 30 -> pool 15 -> conv 13 -> pool 6, flattened 16*6*6
        let first_linear = p.nodes.iter().find(|n| n.kind == ModuleKind::Linear).unwrap();
        assert_eq!(first_linear.attrs, vec![16 * 6 * 6, 32]);
    }

    #[test]
    fn minimal_cnn_spatial_dims() {
        let space = cnn();
        let g = minimal_genotype(&space, 1).unwrap();
        let p = decode(&g, &space, &[3, 32, 32]).unwrap();
        let pool = p.nodes.iter().find(|n| n.kind == ModuleKind::MaxPool).unwrap();
        assert_eq!(pool.shape, vec![16, 15, 15]);
        assert_eq!(p.nodes[0].attrs, vec![3, 16, 3, 1, 0]);
        assert_eq!(p.derived.layer_count, 6);
        assert_eq!(p.edges.len(), 5);
    }

    #[test]
    fn deep_stride_two_stack_underflows() {
        let space = cnn();
        let mut g = minimal_genotype(&space, 1).unwrap();
        let strand = g.strands.get_mut("feature").unwrap();
        strand[0] = conv(1, [16, 3, 2, 0], &[]);
        for key in 3..8 {
            strand.push(conv(key, [16, 3, 2, 0], &[]));
        }
        relink(strand);
        let err = decode(&g, &space, &[3, 32, 32]).unwrap_err();
        // 32 -> 15 -> 7 -> 3 -> 1 -> underflow at the fifth conv (key 6)
        assert_eq!(err, DecodeError::Underflow { cell: 6, organ: "feature".into(), module: "conv" });
    }

    #[test]
    fn builtin_minimal_genotypes_decode() {
        for kind in BuiltinSpace::ALL {
            let space = builtin_space(kind);
            let g = minimal_genotype(&space, 1).unwrap();
            let p = decode(&g, &space, &kind.default_input_shape()).unwrap();
            assert!(!p.nodes.is_empty());
        }
    }

    #[test]
    fn lstm_decoder_is_mirrored_encoder() {
        let space = builtin_space(BuiltinSpace::Lstm);
        let mut g = minimal_genotype(&space, 1).unwrap();
        let lstm = CellGene::initial(2, space.cell("convlstm").unwrap());
        push_cell(&mut g, "encoder", lstm);
        let p = decode(&g, &space, &[1, 64, 64, 10]).unwrap();
        let decoder: Vec<_> = p
            .nodes
            .iter()
            .filter(|n| n.organ == "decoder")
            .filter(|n| matches!(n.kind, ModuleKind::Conv | ModuleKind::ConvTranspose | ModuleKind::ConvLstm))
            .map(|n| (n.kind, n.cell))
            .collect();
        assert_eq!(decoder, vec![(ModuleKind::ConvLstm, 2), (ModuleKind::ConvTranspose, 1)]);
        // conv 3x3 shrinks 64 -> 62, the mirrored transpose restores 64
        assert_eq!(p.nodes.last().unwrap().shape, vec![16, 64, 64, 10]);
        assert_eq!(p.derived.cell_counts.get("convtranspose"), Some(&1));
    }

    #[test]
    fn parameter_counts() {
        let node = |kind, attrs: &[u32]| Node { kind, attrs: attrs.to_vec(), cell: 1, organ: "f".into(), shape: vec![] };
        let conv = Phenotype { nodes: vec![node(ModuleKind::Conv, &[3, 16, 3, 1, 0])], ..Default::default() };
        assert_eq!(parameter_count(&conv), 448);
        let lin = Phenotype { nodes: vec![node(ModuleKind::Linear, &[10, 10])], ..Default::default() };
        assert_eq!(parameter_count(&lin), 110);
        assert_eq!(parameter_count(&Phenotype::default()), 0);
        assert_eq!(node_parameters(&node(ModuleKind::BatchNorm, &[16])), 32);
        assert_eq!(node_parameters(&node(ModuleKind::ConvLstm, &[2, 2, 3])), 4 * 2 * (4 * 9 + 1));
        assert_eq!(node_parameters(&node(ModuleKind::Relu, &[])), 0);
    }

    #[test]
    fn explicit_schema_packs_msb_first() {
        let mut space = cnn();
        // kernel lattice 1,3,5,7 (2 bits) and nothing else variable: state = kernel level
        let c = &mut space.cells[0];
        c.attrs = vec![
            crate::search_space::AttrSpec::new("out_channels", 16, 16, 8),
            crate::search_space::AttrSpec::new("kernel", 1, 11, 2),
            crate::search_space::AttrSpec::new("stride", 1, 1, 1),
            crate::search_space::AttrSpec::new("padding", 0, 0, 1),
        ];
        c.allowed_affiliated.clear();
        c.initial_affiliated.clear();
        let mut g = minimal_genotype(&space, 1).unwrap();
        g.strands.get_mut("feature").unwrap()[0].attrs = vec![16, 11, 1, 0];
        let schema = StateSchema {
            slots: vec![
                SlotSpec { cell_type: "conv".into(), capacity: 2, bits: 4 },
                SlotSpec { cell_type: "linear".into(), capacity: 0, bits: 4 },
            ],
        };
        let cell = &g.strand("feature")[0];
        assert_eq!(cell_state_index(cell, space.cell("conv").unwrap()).unwrap(), 5);
        g.strands.remove("classifier");
        let bits = encode_binary(&g, &space, &schema).unwrap();
        assert_eq!(bits_to_string(&bits), "01010000");
    }

    #[test]
    fn empty_slots_encode_to_zero() {
        let space = cnn();
        let schema = StateSchema::for_space(&space).unwrap();
        let g = Genotype { id: 1, strands: BTreeMap::new(), birth_generation: 0, fitness: None };
        let bits = encode_binary(&g, &space, &schema).unwrap();
        assert_eq!(bits.len(), schema.total_bits());
        assert!(bits.iter().all(|b| !b));
    }

    #[test]
    fn attr_outside_domain_is_an_encoding_fault() {
        let space = cnn();
        let schema = StateSchema::for_space(&space).unwrap();
        let mut g = minimal_genotype(&space, 1).unwrap();
        g.strands.get_mut("feature").unwrap()[0].attrs[1] = 99;
        assert!(matches!(encode_binary(&g, &space, &schema), Err(EncodeError::AttrOutOfDomain { .. })));
    }

    #[test]
    fn fitness_serde() {
        let rec = FitnessRecord {
            incomplete: Some(Fitness::FAILED),
            complete: Some(Fitness::new(0.5)),
            evaluated_generation: 2,
            inherited: false,
        };
        let s = alloc::format!("{:?}", rec);
        assert!(s.contains("inf"));
        assert!(Fitness::FAILED < Fitness::new(-1e300));
        assert_eq!(Fitness::new(f64::NAN), Fitness::FAILED);
    }
}
