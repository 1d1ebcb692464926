//! The type-free search space: which cell types exist, which organs they may
//! populate, and which data-flow directions are legal.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Ceiling applied to a cell type that has no explicit entry.
pub const DEFAULT_CELL_CEILING: u32 = 32;

/// The trainable module at the heart of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    Conv,
    Linear,
    #[serde(alias = "convtrans")]
    ConvTranspose,
    ConvLstm,
}

impl CoreKind {
    /// Names of the core attributes, in storage order.
    pub fn attr_names(self) -> &'static [&'static str] {
        match self {
            CoreKind::Conv | CoreKind::ConvTranspose => {
                &["out_channels", "kernel", "stride", "padding"]
            }
            CoreKind::Linear => &["out_features"],
            CoreKind::ConvLstm => &["kernel"],
        }
    }

    /// Kind used when a strand is mirrored into a decoder.
    pub fn mirrored(self) -> CoreKind {
        match self {
            CoreKind::Conv => CoreKind::ConvTranspose,
            CoreKind::ConvTranspose => CoreKind::Conv,
            other => other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CoreKind::Conv => "conv",
            CoreKind::Linear => "linear",
            CoreKind::ConvTranspose => "convtranspose",
            CoreKind::ConvLstm => "convlstm",
        }
    }
}

/// Non-trainable (or norm) modules that follow the core module of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffiliatedKind {
    BatchNorm,
    Relu,
    LeakyRelu,
    MaxPool,
    GroupNorm,
}

impl AffiliatedKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AffiliatedKind::BatchNorm => "batchnorm",
            AffiliatedKind::Relu => "relu",
            AffiliatedKind::LeakyRelu => "leakyrelu",
            AffiliatedKind::MaxPool => "maxpool",
            AffiliatedKind::GroupNorm => "groupnorm",
        }
    }
}

/// One integer attribute of a core module: closed domain `[min, max]` and the
/// step used by modify-cell mutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttrSpec {
    pub name: String,
    pub min: u32,
    pub max: u32,
    pub growth: u32,
}

impl AttrSpec {
    pub fn new(name: &str, min: u32, max: u32, growth: u32) -> Self {
        AttrSpec { name: name.to_string(), min, max, growth }
    }

    pub fn contains(&self, value: u32) -> bool {
        (self.min..=self.max).contains(&value)
    }

    /// Number of lattice levels `min, min + growth, ...` inside the domain.
    pub fn levels(&self) -> u64 {
        u64::from((self.max - self.min) / self.growth.max(1)) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellType {
    pub name: String,
    pub core: CoreKind,
    pub attrs: Vec<AttrSpec>,
    pub allowed_affiliated: Vec<AffiliatedKind>,
    pub initial_attrs: Vec<u32>,
    pub initial_affiliated: Vec<AffiliatedKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Organ {
    pub name: String,
    pub allowed_cells: Vec<String>,
    /// Relative probability of choosing this organ for variation.
    pub weight: f64,
    /// When set, this organ is never evolved directly: its strand is derived
    /// from the named organ at decode time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_of: Option<String>,
}

impl Organ {
    pub fn is_mirrored(&self) -> bool {
        self.mirror_of.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionRule {
    /// Maximum in-cells and out-cells per cell.
    pub degree: u32,
    /// Legal organ-to-organ handoffs.
    pub organ_relations: Vec<(String, String)>,
    /// Legal (predecessor, successor) cell-type pairs inside a strand.
    pub cell_relations: Vec<(String, String)>,
}

impl ConnectionRule {
    pub fn allows_cells(&self, from: &str, to: &str) -> bool {
        self.cell_relations.iter().any(|(a, b)| a == from && b == to)
    }

    pub fn allows_organs(&self, from: &str, to: &str) -> bool {
        self.organ_relations.iter().any(|(a, b)| a == from && b == to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub cells: Vec<CellType>,
    pub organs: Vec<Organ>,
    pub rule: ConnectionRule,
    #[serde(default)]
    pub ceilings: BTreeMap<String, u32>,
}

/// An invariant violation, located by a path into the offending value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl SearchSpace {
    pub fn cell(&self, name: &str) -> Option<&CellType> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn organ(&self, name: &str) -> Option<&Organ> {
        self.organs.iter().find(|o| o.name == name)
    }

    pub fn ceiling(&self, cell_type: &str) -> u32 {
        self.ceilings.get(cell_type).copied().unwrap_or(DEFAULT_CELL_CEILING)
    }

    /// Organs that carry their own gene strand.
    pub fn evolved_organs(&self) -> impl Iterator<Item = &Organ> {
        self.organs.iter().filter(|o| !o.is_mirrored())
    }

    /// Cell type used in `organ` for the mirror image of `source`.
    pub fn mirror_cell_type(&self, organ: &Organ, source: &CellType) -> Option<&CellType> {
        let kind = source.core.mirrored();
        organ
            .allowed_cells
            .iter()
            .filter_map(|n| self.cell(n))
            .find(|c| c.core == kind)
    }

    /// Initial per-type counts of the minimal genotype.
    pub fn minimal_counts(&self) -> BTreeMap<String, u32> {
        let mut counts = BTreeMap::new();
        for organ in self.evolved_organs() {
            if let Some(first) = organ.allowed_cells.first() {
                *counts.entry(first.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let v = validate_space(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

/// Every invariant violation in `space`; empty means valid.
pub fn validate_space(space: &SearchSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut names = BTreeSet::new();

    if space.cells.is_empty() {
        out.push(Violation::new("cells", "cell catalog is empty"));
    }
    for (i, cell) in space.cells.iter().enumerate() {
        let path = format!("cells[{i}]");
        if !names.insert(cell.name.as_str()) {
            out.push(Violation::new(format!("{path}.name"), format!("duplicate cell type {:?}", cell.name)));
        }
        validate_cell_type(cell, &path, &mut out);
    }

    let mut organ_names = BTreeSet::new();
    if space.organs.is_empty() {
        out.push(Violation::new("organs", "organ list is empty"));
    }
    for (i, organ) in space.organs.iter().enumerate() {
        let path = format!("organs[{i}]");
        if !organ_names.insert(organ.name.as_str()) {
            out.push(Violation::new(format!("{path}.name"), format!("duplicate organ {:?}", organ.name)));
        }
        if organ.allowed_cells.is_empty() {
            out.push(Violation::new(format!("{path}.allowed_cells"), "no allowed cell types"));
        }
        for name in &organ.allowed_cells {
            if space.cell(name).is_none() {
                out.push(Violation::new(
                    format!("{path}.allowed_cells"),
                    format!("undeclared cell type {name:?}"),
                ));
            }
        }
        if !(organ.weight.is_finite() && organ.weight >= 0.0) {
            out.push(Violation::new(format!("{path}.weight"), "weight must be finite and non-negative"));
        }
        if let Some(source) = &organ.mirror_of {
            match space.organs[..i].iter().find(|o| &o.name == source) {
                None => out.push(Violation::new(
                    format!("{path}.mirror_of"),
                    format!("{source:?} is not an earlier organ"),
                )),
                Some(src) if src.is_mirrored() => out.push(Violation::new(
                    format!("{path}.mirror_of"),
                    "cannot mirror a mirrored organ",
                )),
                Some(src) => {
                    for name in &src.allowed_cells {
                        if let Some(cell) = space.cell(name) {
                            if space.mirror_cell_type(organ, cell).is_none() {
                                out.push(Violation::new(
                                    format!("{path}.allowed_cells"),
                                    format!("no mirror image for cell type {name:?}"),
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    if !space.organs.is_empty() && !space.evolved_organs().any(|o| o.weight > 0.0) {
        out.push(Violation::new("organs", "no evolvable organ has positive weight"));
    }

    if space.rule.degree == 0 {
        out.push(Violation::new("rule.degree", "degree must be at least 1"));
    }
    for (i, (a, b)) in space.rule.organ_relations.iter().enumerate() {
        for o in [a, b] {
            if space.organ(o).is_none() {
                out.push(Violation::new(
                    format!("rule.organ_relations[{i}]"),
                    format!("undeclared organ {o:?}"),
                ));
            }
        }
    }
    for (i, (a, b)) in space.rule.cell_relations.iter().enumerate() {
        for c in [a, b] {
            if space.cell(c).is_none() {
                out.push(Violation::new(
                    format!("rule.cell_relations[{i}]"),
                    format!("undeclared cell type {c:?}"),
                ));
            }
        }
    }
    for pair in space.organs.windows(2) {
        if !space.rule.allows_organs(&pair[0].name, &pair[1].name) {
            out.push(Violation::new(
                "rule.organ_relations",
                format!("missing handoff ({:?}, {:?})", pair[0].name, pair[1].name),
            ));
        }
    }

    for (name, &ceiling) in &space.ceilings {
        if space.cell(name).is_none() {
            out.push(Violation::new(format!("ceilings.{name}"), "undeclared cell type"));
        }
        if ceiling == 0 {
            out.push(Violation::new(format!("ceilings.{name}"), "ceiling must be at least 1"));
        }
    }
    for (name, count) in space.minimal_counts() {
        if space.ceiling(&name) < count {
            out.push(Violation::new(
                format!("ceilings.{name}"),
                format!("ceiling below the {count} cells of the minimal genotype"),
            ));
        }
    }
    out
}

fn validate_cell_type(cell: &CellType, path: &str, out: &mut Vec<Violation>) {
    let expected = cell.core.attr_names();
    if cell.attrs.is_empty() {
        out.push(Violation::new(format!("{path}.attrs"), "attribute schema is empty"));
    } else if cell.attrs.len() != expected.len() {
        out.push(Violation::new(
            format!("{path}.attrs"),
            format!("{} core expects {} attributes, got {}", cell.core.as_str(), expected.len(), cell.attrs.len()),
        ));
    }
    for (j, attr) in cell.attrs.iter().enumerate() {
        let apath = format!("{path}.attrs[{j}]");
        let floor = if attr.name == "padding" { 0 } else { 1 };
        if attr.min < floor {
            out.push(Violation::new(format!("{apath}.min"), format!("minimum must be at least {floor}")));
        }
        if attr.min > attr.max {
            out.push(Violation::new(apath.clone(), "empty domain"));
        }
        if attr.growth == 0 {
            out.push(Violation::new(format!("{apath}.growth"), "growth factor must be at least 1"));
        }
    }
    if cell.initial_attrs.len() != cell.attrs.len() {
        out.push(Violation::new(format!("{path}.initial_attrs"), "length differs from attribute schema"));
    } else {
        for (j, (value, attr)) in cell.initial_attrs.iter().zip(&cell.attrs).enumerate() {
            if !attr.contains(*value) {
                out.push(Violation::new(
                    format!("{path}.initial_attrs[{j}]"),
                    format!("{value} outside [{}, {}]", attr.min, attr.max),
                ));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for kind in &cell.initial_affiliated {
        if !cell.allowed_affiliated.contains(kind) {
            out.push(Violation::new(
                format!("{path}.initial_affiliated"),
                format!("{} is not allowed", kind.as_str()),
            ));
        }
        if !seen.insert(*kind) {
            out.push(Violation::new(format!("{path}.initial_affiliated"), format!("duplicate {}", kind.as_str())));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinSpace {
    Cnn,
    Gan,
    Lstm,
}

impl BuiltinSpace {
    pub const ALL: [BuiltinSpace; 3] = [BuiltinSpace::Cnn, BuiltinSpace::Gan, BuiltinSpace::Lstm];

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "cnn" => Some(BuiltinSpace::Cnn),
            "gan" => Some(BuiltinSpace::Gan),
            "lstm" => Some(BuiltinSpace::Lstm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BuiltinSpace::Cnn => "cnn",
            BuiltinSpace::Gan => "gan",
            BuiltinSpace::Lstm => "lstm",
        }
    }

    /// Input shape each built-in space is exercised with.
    pub fn default_input_shape(self) -> Vec<u32> {
        match self {
            BuiltinSpace::Cnn => vec![3, 32, 32],
            BuiltinSpace::Gan => vec![100],
            BuiltinSpace::Lstm => vec![1, 64, 64, 10],
        }
    }
}

fn conv_like(name: &str, core: CoreKind, growth: [u32; 4], initial: [u32; 4]) -> CellType {
    CellType {
        name: name.to_string(),
        core,
        attrs: vec![
            AttrSpec::new("out_channels", 8, 1024, growth[0]),
            AttrSpec::new("kernel", 1, 11, growth[1]),
            AttrSpec::new("stride", 1, 4, growth[2]),
            AttrSpec::new("padding", 0, 5, growth[3]),
        ],
        allowed_affiliated: vec![],
        initial_attrs: initial.to_vec(),
        initial_affiliated: vec![],
    }
}

fn with_affiliated(mut cell: CellType, allowed: &[AffiliatedKind], initial: &[AffiliatedKind]) -> CellType {
    cell.allowed_affiliated = allowed.to_vec();
    cell.initial_affiliated = initial.to_vec();
    cell
}

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn organ(name: &str, cells: &[&str], weight: f64) -> Organ {
    Organ {
        name: name.to_string(),
        allowed_cells: cells.iter().map(|c| c.to_string()).collect(),
        weight,
        mirror_of: None,
    }
}

fn ceilings_for(cells: &[CellType]) -> BTreeMap<String, u32> {
    cells.iter().map(|c| (c.name.clone(), DEFAULT_CELL_CEILING)).collect()
}

/// One of the three reference spaces (CNN, GAN, LSTM).
pub fn builtin_space(kind: BuiltinSpace) -> SearchSpace {
    use AffiliatedKind::*;
    match kind {
        BuiltinSpace::Cnn => {
            let conv = with_affiliated(
                conv_like("conv", CoreKind::Conv, [8, 2, 2, 2], [16, 3, 1, 0]),
                &[BatchNorm, Relu, LeakyRelu, MaxPool],
                &[BatchNorm, Relu, MaxPool],
            );
            let linear = CellType {
                name: "linear".to_string(),
                core: CoreKind::Linear,
                attrs: vec![AttrSpec::new("out_features", 16, 4096, 16)],
                allowed_affiliated: vec![BatchNorm, Relu, LeakyRelu],
                initial_attrs: vec![32],
                initial_affiliated: vec![Relu],
            };
            let cells = vec![conv, linear];
            SearchSpace {
                ceilings: ceilings_for(&cells),
                cells,
                organs: vec![organ("feature", &["conv"], 0.6), organ("classifier", &["linear"], 0.4)],
                rule: ConnectionRule {
                    degree: 1,
                    organ_relations: pairs(&[("feature", "classifier")]),
                    cell_relations: pairs(&[("conv", "conv"), ("linear", "linear")]),
                },
            }
        }
        BuiltinSpace::Gan => {
            let convt = with_affiliated(
                conv_like("convtranspose", CoreKind::ConvTranspose, [8, 2, 1, 1], [32, 2, 1, 0]),
                &[BatchNorm, Relu, LeakyRelu],
                &[BatchNorm, Relu],
            );
            let conv = with_affiliated(
                conv_like("conv", CoreKind::Conv, [8, 2, 1, 1], [32, 2, 1, 0]),
                &[BatchNorm, Relu, LeakyRelu],
                &[BatchNorm, LeakyRelu],
            );
            let cells = vec![convt, conv];
            SearchSpace {
                ceilings: ceilings_for(&cells),
                cells,
                organs: vec![
                    organ("generator", &["convtranspose"], 0.5),
                    organ("discriminator", &["conv"], 0.5),
                ],
                rule: ConnectionRule {
                    degree: 1,
                    organ_relations: pairs(&[("generator", "discriminator")]),
                    cell_relations: pairs(&[("convtranspose", "convtranspose"), ("conv", "conv")]),
                },
            }
        }
        BuiltinSpace::Lstm => {
            let conv = with_affiliated(
                conv_like("conv", CoreKind::Conv, [16, 2, 1, 1], [16, 3, 1, 0]),
                &[BatchNorm, Relu, LeakyRelu],
                &[LeakyRelu],
            );
            let convt = with_affiliated(
                conv_like("convtranspose", CoreKind::ConvTranspose, [16, 2, 1, 1], [16, 3, 1, 0]),
                &[BatchNorm, Relu, LeakyRelu],
                &[LeakyRelu],
            );
            let convlstm = CellType {
                name: "convlstm".to_string(),
                core: CoreKind::ConvLstm,
                attrs: vec![AttrSpec::new("kernel", 1, 11, 2)],
                allowed_affiliated: vec![GroupNorm],
                initial_attrs: vec![3],
                initial_affiliated: vec![GroupNorm],
            };
            let cells = vec![conv, convt, convlstm];
            let mut decoder = organ("decoder", &["convtranspose", "convlstm"], 0.0);
            decoder.mirror_of = Some("encoder".to_string());
            SearchSpace {
                ceilings: ceilings_for(&cells),
                cells,
                organs: vec![organ("encoder", &["conv", "convlstm"], 1.0), decoder],
                rule: ConnectionRule {
                    degree: 1,
                    organ_relations: pairs(&[("encoder", "decoder")]),
                    cell_relations: pairs(&[
                        ("conv", "conv"),
                        ("convtranspose", "convtranspose"),
                        ("convlstm", "convlstm"),
                        ("conv", "convlstm"),
                        ("convlstm", "conv"),
                        ("convlstm", "convtranspose"),
                        ("convtranspose", "convlstm"),
                    ]),
                },
            }
        }
    }
}
