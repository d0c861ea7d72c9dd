//! Tiling algebra: basic cuts, composition, canonical form, tile geometry and
//! the data/model/hybrid preset assignments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataflowGraph, OpKind, Role};

/// One binary cut: halve along a dimension, or replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cut {
    Partition(usize),
    Replicate,
}

impl Cut {
    pub const ROW: Cut = Cut::Partition(0);
    pub const COL: Cut = Cut::Partition(1);

    pub fn dim(self) -> Option<usize> {
        match self {
            Cut::Partition(d) => Some(d),
            Cut::Replicate => None,
        }
    }
}

impl fmt::Display for Cut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cut::Partition(0) => f.write_str("R"),
            Cut::Partition(1) => f.write_str("C"),
            Cut::Partition(d) => write!(f, "P{d}"),
            Cut::Replicate => f.write_str("r"),
        }
    }
}

impl FromStr for Cut {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" => Ok(Cut::Partition(0)),
            "C" => Ok(Cut::Partition(1)),
            "r" => Ok(Cut::Replicate),
            _ => s
                .strip_prefix('P')
                .and_then(|d| d.parse().ok())
                .map(Cut::Partition)
                .ok_or_else(|| Error::InvalidTiling(s.to_string())),
        }
    }
}

/// An ordered sequence of cuts, outermost first. The empty sequence is the
/// trivial tiling.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tiling(Vec<Cut>);

impl Tiling {
    pub fn new(cuts: Vec<Cut>) -> Self {
        Self(cuts)
    }

    pub fn trivial() -> Self {
        Self(Vec::new())
    }

    pub fn repeat(cut: Cut, k: usize) -> Self {
        Self(vec![cut; k])
    }

    pub fn cuts(&self) -> &[Cut] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn compose(&self, inner: &Tiling) -> Tiling {
        let mut cuts = self.0.clone();
        cuts.extend_from_slice(&inner.0);
        Tiling(cuts)
    }

    pub fn canonicalize(&self) -> CanonicalTiling {
        let mut c = CanonicalTiling::default();
        for cut in &self.0 {
            match cut {
                Cut::Partition(d) => *c.partitions.entry(*d).or_default() += 1,
                Cut::Replicate => c.replicate += 1,
            }
        }
        c
    }

    pub fn replicate_count(&self) -> usize {
        self.0.iter().filter(|c| **c == Cut::Replicate).count()
    }

    pub fn tile_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        tile_shape(shape, self)
    }
}

impl fmt::Display for Tiling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for Tiling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<_>>>()
            .map(Tiling)
    }
}

impl Serialize for Tiling {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tiling {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Order-free form of a tiling: cut counts per dimension plus replications.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct CanonicalTiling {
    pub partitions: BTreeMap<usize, usize>,
    pub replicate: usize,
}

impl CanonicalTiling {
    pub fn total(&self) -> usize {
        self.partitions.values().sum::<usize>() + self.replicate
    }

    /// Representative ordering: partitions by ascending dimension, then
    /// replications.
    pub fn to_tiling(&self) -> Tiling {
        let mut cuts = Vec::with_capacity(self.total());
        for (&d, &n) in &self.partitions {
            cuts.extend(std::iter::repeat_n(Cut::Partition(d), n));
        }
        cuts.extend(std::iter::repeat_n(Cut::Replicate, self.replicate));
        Tiling(cuts)
    }
}

/// Branch bits of one tile, one per cut, outermost first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord(pub Vec<u8>);

impl TileCoord {
    /// Coordinate whose bits spell `index` with the outermost cut as the most
    /// significant bit.
    pub fn from_index(index: usize, k: usize) -> Self {
        TileCoord((0..k).map(|i| ((index >> (k - 1 - i)) & 1) as u8).collect())
    }

    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all(k: usize) -> impl Iterator<Item = TileCoord> {
        (0..1usize << k).map(move |i| TileCoord::from_index(i, k))
    }
}

/// Half-open index ranges, one per dimension.
pub type Block = Vec<Range<usize>>;

pub fn block_elements(b: &[Range<usize>]) -> u64 {
    b.iter().map(|r| (r.end - r.start) as u64).product()
}

pub fn block_intersection(a: &[Range<usize>], b: &[Range<usize>]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.end.min(y.end).saturating_sub(x.start.max(y.start)) as u64)
        .product()
}

pub fn block_contains(outer: &[Range<usize>], inner: &[Range<usize>]) -> bool {
    outer
        .iter()
        .zip(inner)
        .all(|(o, i)| o.start <= i.start && i.end <= o.end)
}

pub(crate) fn check_divisible(shape: &[usize], cuts: impl Iterator<Item = Option<usize>>) -> Result<()> {
    let mut counts = vec![0usize; shape.len()];
    for d in cuts.flatten() {
        if d >= shape.len() {
            return Err(Error::DimOutOfRange {
                dim: d,
                rank: shape.len(),
            });
        }
        counts[d] += 1;
    }
    for (d, (&extent, &c)) in shape.iter().zip(&counts).enumerate() {
        if c >= usize::BITS as usize || extent % (1usize << c) != 0 {
            return Err(Error::Indivisible {
                dim: d,
                extent,
                parts: 1usize.checked_shl(c as u32).unwrap_or(0),
            });
        }
    }
    Ok(())
}

/// Block owned by `coord` when the cuts partition the dimensions given by
/// `dims` (`None` for cuts that do not narrow). Divisibility must already
/// hold.
pub(crate) fn block_of(shape: &[usize], dims: &[Option<usize>], coord: &[u8]) -> Block {
    let mut block: Block = shape.iter().map(|&e| 0..e).collect();
    for (d, &bit) in dims.iter().zip(coord) {
        if let Some(d) = *d {
            let r = &mut block[d];
            let half = (r.end - r.start) / 2;
            if bit == 0 {
                r.end = r.start + half;
            } else {
                r.start += half;
            }
        }
    }
    block
}

pub fn tile_shape(shape: &[usize], t: &Tiling) -> Result<Vec<usize>> {
    check_divisible(shape, t.0.iter().map(|c| c.dim()))?;
    let mut out = shape.to_vec();
    for d in t.0.iter().filter_map(|c| c.dim()) {
        out[d] /= 2;
    }
    Ok(out)
}

pub fn tile_block(shape: &[usize], t: &Tiling, coord: &TileCoord) -> Result<Block> {
    if coord.len() != t.len() {
        return Err(Error::CutCountMismatch {
            expected: t.len(),
            got: coord.len(),
        });
    }
    check_divisible(shape, t.0.iter().map(|c| c.dim()))?;
    let dims: Vec<Option<usize>> = t.0.iter().map(|c| c.dim()).collect();
    Ok(block_of(shape, &dims, &coord.0))
}

/// A tiling for every tensor of a graph, all with the same cut count.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TilingAssignment {
    k: usize,
    tilings: BTreeMap<String, Tiling>,
}

impl TilingAssignment {
    pub fn new(k: usize, tilings: BTreeMap<String, Tiling>) -> Result<Self> {
        if let Some(t) = tilings.values().find(|t| t.len() != k) {
            return Err(Error::CutCountMismatch {
                expected: k,
                got: t.len(),
            });
        }
        Ok(Self { k, tilings })
    }

    /// The `k = 0` assignment: every tensor whole on one device.
    pub fn trivial(g: &DataflowGraph) -> Self {
        Self {
            k: 0,
            tilings: g
                .tensors()
                .iter()
                .map(|t| (t.id.clone(), Tiling::trivial()))
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, tensor: &str) -> Result<&Tiling> {
        self.tilings
            .get(tensor)
            .ok_or_else(|| Error::MissingTensor(tensor.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tiling)> {
        self.tilings.iter()
    }

    pub fn tilings(&self) -> &BTreeMap<String, Tiling> {
        &self.tilings
    }

    /// Checks that every tensor of `g` is covered and divisible.
    pub fn check_covers(&self, g: &DataflowGraph) -> Result<()> {
        for t in g.tensors() {
            tile_shape(&t.shape, self.get(&t.id)?)?;
        }
        Ok(())
    }

    /// Per-tensor composition `outer ∘ inner`.
    pub fn compose(&self, inner: &TilingAssignment) -> Result<TilingAssignment> {
        let mut tilings = BTreeMap::new();
        for (id, t) in &self.tilings {
            tilings.insert(id.clone(), t.compose(inner.get(id)?));
        }
        Ok(Self {
            k: self.k + inner.k,
            tilings,
        })
    }

    /// The assignment restricted to cut `i` (a one-cut assignment).
    pub fn cut(&self, i: usize) -> TilingAssignment {
        Self {
            k: 1,
            tilings: self
                .tilings
                .iter()
                .map(|(id, t)| (id.clone(), Tiling(vec![t.0[i]])))
                .collect(),
        }
    }

    /// The assignment with the outermost cut removed.
    pub fn inner(&self) -> TilingAssignment {
        Self {
            k: self.k.saturating_sub(1),
            tilings: self
                .tilings
                .iter()
                .map(|(id, t)| (id.clone(), Tiling(t.0.iter().skip(1).copied().collect())))
                .collect(),
        }
    }
}

/// Assignment document: the tilings plus optional cost summary fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentDocument {
    pub k: usize,
    pub assignment: BTreeMap<String, Tiling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_cut_costs: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_elements: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_bytes: Option<u64>,
}

impl AssignmentDocument {
    pub fn new(a: &TilingAssignment) -> Self {
        Self {
            k: a.k,
            assignment: a.tilings.clone(),
            per_cut_costs: None,
            total_elements: None,
            total_bytes: None,
        }
    }

    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("assignment serialize") + "\n"
    }

    pub fn into_assignment(self) -> Result<TilingAssignment> {
        TilingAssignment::new(self.k, self.assignment)
    }
}

impl TilingAssignment {
    pub fn to_document(&self) -> String {
        AssignmentDocument::new(self).render()
    }

    pub fn from_document(text: &str) -> Result<Self> {
        serde_json::from_str::<AssignmentDocument>(text)?.into_assignment()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Data,
    Model,
    Hybrid,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" => Ok(Preset::Data),
            "model" => Ok(Preset::Model),
            "hybrid" => Ok(Preset::Hybrid),
            _ => Err(Error::InvalidConfig(format!("unknown preset `{s}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Data => "data",
            Preset::Model => "model",
            Preset::Hybrid => "hybrid",
        })
    }
}

/// Tensor classes the presets distinguish.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PresetClass {
    /// Weights and everything tied to them by elementwise ops (weight
    /// gradients, update temporaries, updated weights).
    Parameter,
    Activation,
    Other,
}

/// Tensors tiled like weights by the presets: weights, outputs of
/// contractions that consume no such tensor (weight gradients), and
/// everything elementwise-connected to either (update temporaries, updated
/// weights).
pub fn parameter_tensors(g: &DataflowGraph) -> BTreeSet<String> {
    let mut params: BTreeSet<String> = g
        .tensors()
        .iter()
        .filter(|t| t.role == Role::Weight)
        .map(|t| t.id.clone())
        .collect();
    loop {
        let before = params.len();
        for op in g.ops() {
            let operands = || op.inputs.iter().chain(std::iter::once(&op.output));
            match op.kind() {
                OpKind::Elementwise => {
                    if operands().any(|t| params.contains(t)) {
                        params.extend(operands().cloned());
                    }
                }
                OpKind::Matmul | OpKind::Conv => {
                    if !op.inputs.iter().any(|t| params.contains(t)) {
                        params.insert(op.output.clone());
                    }
                }
                OpKind::Generic => {}
            }
        }
        if params.len() == before {
            return params;
        }
    }
}

/// Data parallelism: replicate parameters, split everything else along the
/// batch (first) dimension.
fn data_cut(class: PresetClass) -> Cut {
    match class {
        PresetClass::Parameter => Cut::Replicate,
        _ => Cut::Partition(0),
    }
}

/// Model parallelism: parameters by rows, activations by columns
/// (channels), everything else replicated.
fn model_cut(class: PresetClass) -> Cut {
    match class {
        PresetClass::Parameter => Cut::Partition(0),
        PresetClass::Activation => Cut::Partition(1),
        PresetClass::Other => Cut::Replicate,
    }
}

/// Number of outer data-parallel cuts used by the hybrid preset for `k`
/// cuts; the remaining inner cuts are model-parallel.
pub fn hybrid_data_cuts(k: usize) -> usize {
    k.div_ceil(2)
}

pub fn preset_assignment(g: &DataflowGraph, kind: Preset, k: usize) -> Result<TilingAssignment> {
    if k == 0 {
        return Err(Error::InvalidConfig("presets need k >= 1".into()));
    }
    if kind == Preset::Hybrid && k < 2 {
        return Err(Error::InvalidConfig("hybrid preset needs k >= 2".into()));
    }
    let params = parameter_tensors(g);
    let mut tilings = BTreeMap::new();
    for t in g.tensors() {
        let class = if params.contains(&t.id) {
            PresetClass::Parameter
        } else if matches!(t.role, Role::Activation | Role::Input) {
            PresetClass::Activation
        } else {
            PresetClass::Other
        };
        let cuts: Vec<Cut> = match kind {
            Preset::Data => vec![data_cut(class); k],
            Preset::Model => vec![model_cut(class); k],
            Preset::Hybrid => {
                let outer = hybrid_data_cuts(k);
                (0..k)
                    .map(|i| {
                        if i < outer {
                            data_cut(class)
                        } else {
                            model_cut(class)
                        }
                    })
                    .collect()
            }
        };
        if let Some(dim) = cuts.iter().filter_map(|c| c.dim()).find(|&d| d >= t.rank()) {
            return Err(Error::MissingPresetDim {
                tensor: t.id.clone(),
                role: t.role.to_string(),
                dim,
            });
        }
        let tiling = Tiling(cuts);
        tile_shape(&t.shape, &tiling)?;
        tilings.insert(t.id.clone(), tiling);
    }
    TilingAssignment::new(k, tilings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_mlp, MlpConfig, TensorSpec};
    use proptest::prelude::*;

    fn t(s: &str) -> Tiling {
        s.parse().unwrap()
    }

    #[test]
    fn compose_examples() {
        assert_eq!(t("R").compose(&t("C")), t("R C"));
        assert_eq!(Tiling::trivial().compose(&t("C r")), t("C r"));
        assert_eq!(t("R").compose(&t("R")), t("R R"));
        assert_eq!(t("R C").len(), 2);
    }

    #[test]
    fn canonical_examples() {
        assert_eq!(t("R C").canonicalize(), t("C R").canonicalize());
        let c = t("R C").canonicalize();
        assert_eq!(c.partitions, BTreeMap::from([(0, 1), (1, 1)]));
        assert_eq!(c.replicate, 0);
        let c = t("r r").canonicalize();
        assert!(c.partitions.is_empty());
        assert_eq!(c.replicate, 2);
        let c = t("R R r").canonicalize();
        assert_eq!(c.partitions, BTreeMap::from([(0, 2)]));
        assert_eq!((c.replicate, c.total()), (1, 3));
    }

    #[test]
    fn tiling_text_round_trip() {
        for s in ["R C", "r R", "P2 r P3", ""] {
            assert_eq!(t(s).to_string(), s);
        }
        assert_eq!(t("P0 P1"), t("R C"));
        assert!("X".parse::<Tiling>().is_err());
    }

    #[test]
    fn tile_shapes() {
        assert_eq!(tile_shape(&[400, 300], &t("R")).unwrap(), vec![200, 300]);
        assert_eq!(tile_shape(&[400, 300], &t("R C")).unwrap(), vec![200, 150]);
        assert_eq!(
            tile_shape(&[3, 4], &t("R R")).unwrap_err(),
            Error::Indivisible {
                dim: 0,
                extent: 3,
                parts: 4
            }
        );
    }

    #[test]
    fn tile_blocks() {
        let c = |v: &[u8]| TileCoord(v.to_vec());
        assert_eq!(tile_block(&[4, 4], &t("R"), &c(&[1])).unwrap(), vec![2..4, 0..4]);
        for bit in [0, 1] {
            assert_eq!(tile_block(&[4, 4], &t("r"), &c(&[bit])).unwrap(), vec![0..4, 0..4]);
        }
        assert_eq!(
            tile_block(&[4, 4], &t("R C"), &c(&[1, 0])).unwrap(),
            vec![2..4, 0..2]
        );
        // The four coordinates of R C tile the 4x4 index set exactly once.
        let mut seen = [[0u8; 4]; 4];
        for coord in TileCoord::all(2) {
            let b = tile_block(&[4, 4], &t("R C"), &coord).unwrap();
            for i in b[0].clone() {
                for j in b[1].clone() {
                    seen[i][j] += 1;
                }
            }
        }
        assert!(seen.iter().flatten().all(|&n| n == 1));
    }

    #[test]
    fn coord_index() {
        assert_eq!(TileCoord(vec![0, 1]).index(), 1);
        assert_eq!(TileCoord(vec![1, 0]).index(), 2);
        assert_eq!(TileCoord::from_index(2, 2), TileCoord(vec![1, 0]));
    }

    #[test]
    fn presets_follow_roles() {
        let g = gen_mlp(&MlpConfig::new(8, vec![4, 4]).backward().update()).unwrap();
        let data = preset_assignment(&g, Preset::Data, 1).unwrap();
        assert_eq!(data.get("W1").unwrap(), &t("r"));
        assert_eq!(data.get("x1").unwrap(), &t("R"));
        assert_eq!(data.get("h1").unwrap(), &t("R"));
        let model = preset_assignment(&g, Preset::Model, 1).unwrap();
        assert_eq!(model.get("W1").unwrap(), &t("R"));
        assert_eq!(model.get("x1").unwrap(), &t("C"));
        assert_eq!(model.get("dx1").unwrap(), &t("r"));
        assert_eq!(model.get("dW1").unwrap(), &t("R"));
        assert_eq!(data.get("dW1").unwrap(), &t("r"));
        assert_eq!(data.get("W1_new").unwrap(), &t("r"));
        let hybrid = preset_assignment(&g, Preset::Hybrid, 2).unwrap();
        assert_eq!(hybrid.get("W1").unwrap(), &t("r R"));
        assert_eq!(hybrid.get("x1").unwrap(), &t("R C"));
        assert_eq!(hybrid.get("dh1").unwrap(), &t("R r"));
        assert!(preset_assignment(&g, Preset::Hybrid, 1).is_err());
    }

    #[test]
    fn assignment_document_round_trip() {
        let g = gen_mlp(&MlpConfig::new(8, vec![4, 4]).backward()).unwrap();
        let a = preset_assignment(&g, Preset::Hybrid, 2).unwrap();
        let text = a.to_document();
        assert_eq!(TilingAssignment::from_document(&text).unwrap(), a);
        assert!(text.contains("\"W1\": \"r R\""));
        assert!(TilingAssignment::from_document(r#"{"k":1,"assignment":{"a":"R R"}}"#).is_err());
    }

    #[test]
    fn preset_missing_dim() {
        let g = DataflowGraph::new(vec![TensorSpec::new("v", vec![4], Role::Activation)], vec![])
            .unwrap();
        assert!(matches!(
            preset_assignment(&g, Preset::Model, 1).unwrap_err(),
            Error::MissingPresetDim { .. }
        ));
    }

    fn arb_tiling(rank: usize, k: usize) -> impl Strategy<Value = Tiling> {
        prop::collection::vec(
            prop_oneof![
                (0..rank).prop_map(Cut::Partition),
                Just(Cut::Replicate)
            ],
            k,
        )
        .prop_map(Tiling)
    }

    proptest! {
        #[test]
        fn blocks_cover_each_element_per_replica(t in arb_tiling(2, 3)) {
            let shape = [8usize, 8];
            let mut seen = [[0usize; 8]; 8];
            for coord in TileCoord::all(3) {
                let b = tile_block(&shape, &t, &coord).unwrap();
                for i in b[0].clone() {
                    for j in b[1].clone() {
                        seen[i][j] += 1;
                    }
                }
            }
            let reps = 1usize << t.replicate_count();
            prop_assert!(seen.iter().flatten().all(|&n| n == reps));
        }

        #[test]
        fn canonical_ignores_order(t in arb_tiling(3, 4), rot in 0usize..4) {
            let mut cuts = t.cuts().to_vec();
            cuts.rotate_left(rot);
            cuts.reverse();
            prop_assert_eq!(Tiling::new(cuts).canonicalize(), t.canonicalize());
            prop_assert_eq!(t.canonicalize().to_tiling().canonicalize(), t.canonicalize());
        }
    }
}
