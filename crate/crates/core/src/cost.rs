//! Communication cost model: ghost-area conversion costs, aligned operator
//! forms, per-operator and per-graph costs, and the textbook strategy
//! arithmetic for data/model/hybrid parallelism on an MLP.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataflowGraph, OpAttrs, OpNode};
use crate::tiling::{
    block_elements, block_intersection, block_of, check_divisible, Cut, Tiling, TilingAssignment,
};

/// One cut of a tiling as held after an operator ran: besides the concrete
/// cuts, a contraction split along its inner dimension leaves both halves
/// holding full-extent partial sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceCut {
    Partition(usize),
    Replicate,
    Reduce,
}

impl SourceCut {
    /// The dimension this cut narrows, if any.
    pub fn dim(self) -> Option<usize> {
        match self {
            SourceCut::Partition(d) => Some(d),
            _ => None,
        }
    }
}

impl From<Cut> for SourceCut {
    fn from(c: Cut) -> Self {
        match c {
            Cut::Partition(d) => SourceCut::Partition(d),
            Cut::Replicate => SourceCut::Replicate,
        }
    }
}

impl fmt::Display for SourceCut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceCut::Partition(d) => Cut::Partition(*d).fmt(f),
            SourceCut::Replicate => f.write_str("r"),
            SourceCut::Reduce => f.write_str("red"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SourceTiling(pub Vec<SourceCut>);

impl SourceTiling {
    /// A fully reduced source: `k` cuts that all left partial sums.
    pub fn reduction(k: usize) -> Self {
        Self(vec![SourceCut::Reduce; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reduce_count(&self) -> usize {
        self.0.iter().filter(|c| **c == SourceCut::Reduce).count()
    }

    pub fn dims(&self) -> Vec<Option<usize>> {
        self.0.iter().map(|c| c.dim()).collect()
    }

    /// The concrete tiling, if no cut is a reduction.
    pub fn concrete(&self) -> Option<Tiling> {
        self.0
            .iter()
            .map(|c| match c {
                SourceCut::Partition(d) => Some(Cut::Partition(*d)),
                SourceCut::Replicate => Some(Cut::Replicate),
                SourceCut::Reduce => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Tiling::new)
    }
}

impl From<&Tiling> for SourceTiling {
    fn from(t: &Tiling) -> Self {
        Self(t.cuts().iter().map(|&c| c.into()).collect())
    }
}

impl FromStr for SourceTiling {
    type Err = Error;

    /// Whitespace-separated cuts; `red` marks a reduction.
    fn from_str(s: &str) -> Result<Self> {
        s.split_whitespace()
            .map(|c| match c {
                "red" => Ok(SourceCut::Reduce),
                _ => c.parse::<Cut>().map(SourceCut::from),
            })
            .collect::<Result<_>>()
            .map(Self)
    }
}

impl fmt::Display for SourceTiling {
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

/// Elements fetched over all `2^k` devices to turn tiles held under `src`
/// into tiles required under `dst`.
///
/// Each device needs its `dst` block. A concrete element it does not hold is
/// fetched once; under `r` reduction cuts every needed element is the sum of
/// `2^r` partials, of which the device holds at most one.
pub fn conversion_cost(src: &SourceTiling, dst: &Tiling, shape: &[usize], k: usize) -> Result<u64> {
    for got in [src.len(), dst.len()] {
        if got != k {
            return Err(Error::CutCountMismatch { expected: k, got });
        }
    }
    let src_dims = src.dims();
    let dst_dims: Vec<Option<usize>> = dst.cuts().iter().map(|c| c.dim()).collect();
    check_divisible(shape, src_dims.iter().copied())?;
    check_divisible(shape, dst_dims.iter().copied())?;
    Ok(conversion_cost_unchecked(&src_dims, src.reduce_count(), &dst_dims, shape))
}

pub(crate) fn conversion_cost_unchecked(
    src_dims: &[Option<usize>],
    reduces: usize,
    dst_dims: &[Option<usize>],
    shape: &[usize],
) -> u64 {
    let k = dst_dims.len();
    let mut bits = vec![0u8; k];
    let mut total = 0;
    for dev in 0..1usize << k {
        for (i, b) in bits.iter_mut().enumerate() {
            *b = ((dev >> (k - 1 - i)) & 1) as u8;
        }
        let need = block_of(shape, dst_dims, &bits);
        let hold = block_of(shape, src_dims, &bits);
        total += (block_elements(&need) << reduces) - block_intersection(&need, &hold);
    }
    total
}

/// A one-cut way to run an operator with no communication: the cut every
/// operand must have, and the state the output is left in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedForm {
    pub name: String,
    pub inputs: Vec<Cut>,
    pub output: SourceCut,
}

impl AlignedForm {
    fn new(name: impl Into<String>, inputs: Vec<Cut>, output: SourceCut) -> Self {
        Self {
            name: name.into(),
            inputs,
            output,
        }
    }
}

/// Aligned forms of `op`, in tie-break order. `out_rank` is the rank of the
/// output (elementwise forms exist per dimension).
pub fn aligned_forms(op: &OpNode, out_rank: usize) -> Vec<AlignedForm> {
    let n = op.inputs.len();
    let p = Cut::Partition;
    match op.attrs {
        OpAttrs::Matmul(_) | OpAttrs::Conv(_) => {
            let c = op.contraction().expect("contraction op");
            let names = if matches!(op.attrs, OpAttrs::Matmul(_)) {
                ["row", "col", "reduce"]
            } else {
                ["batch", "out_channel", "in_channel"]
            };
            vec![
                AlignedForm::new(
                    names[0],
                    vec![p(c.lhs.0), Cut::Replicate],
                    SourceCut::Partition(c.out.0),
                ),
                AlignedForm::new(
                    names[1],
                    vec![Cut::Replicate, p(c.rhs.1)],
                    SourceCut::Partition(c.out.1),
                ),
                AlignedForm::new(names[2], vec![p(c.lhs.1), p(c.rhs.0)], SourceCut::Reduce),
            ]
        }
        OpAttrs::Elementwise(_) => (0..out_rank)
            .map(|d| AlignedForm::new(format!("P{d}"), vec![p(d); n], SourceCut::Partition(d)))
            .chain(std::iter::once(AlignedForm::new(
                "replicate",
                vec![Cut::Replicate; n],
                SourceCut::Replicate,
            )))
            .collect(),
        OpAttrs::Generic(g) => vec![AlignedForm::new(
            "batch",
            vec![p(g.batch_dim); n],
            SourceCut::Partition(g.batch_dim),
        )],
    }
}

/// Cheapest way to run one operator under given operand tilings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCost {
    pub elements: u64,
    pub bytes: u64,
    /// Chosen aligned form per cut (indices into [`aligned_forms`]),
    /// outermost first.
    pub forms: Vec<usize>,
}

/// Operand view of one operator: shapes and dtype sizes per slot, inputs
/// first and the output last.
pub(crate) struct Operands<'a> {
    pub shapes: Vec<&'a [usize]>,
    pub dtype_bytes: Vec<u64>,
}

impl<'a> Operands<'a> {
    pub fn of(g: &'a DataflowGraph, op: &OpNode) -> Self {
        let specs: Vec<_> = op
            .inputs
            .iter()
            .chain(std::iter::once(&op.output))
            .map(|t| g.spec(t))
            .collect();
        Self {
            shapes: specs.iter().map(|s| s.shape.as_slice()).collect(),
            dtype_bytes: specs.iter().map(|s| s.dtype_bytes as u64).collect(),
        }
    }
}

/// The per-slot form tilings of a form sequence, or `None` when some slot
/// is not divisible under it.
pub(crate) fn form_tilings(
    forms: &[AlignedForm],
    seq: &[usize],
    shapes: &[&[usize]],
) -> Option<(Vec<Tiling>, SourceTiling)> {
    let n = shapes.len() - 1;
    let inputs: Vec<Tiling> = (0..n)
        .map(|s| Tiling::new(seq.iter().map(|&f| forms[f].inputs[s]).collect()))
        .collect();
    let output = SourceTiling(seq.iter().map(|&f| forms[f].output).collect());
    for (t, shape) in inputs.iter().zip(shapes) {
        check_divisible(shape, t.cuts().iter().map(|c| c.dim())).ok()?;
    }
    check_divisible(shapes[n], output.dims().into_iter()).ok()?;
    Some((inputs, output))
}

/// Minimum over aligned form sequences of the input conversions into the
/// form plus the output conversion out of it. Ties keep the first sequence
/// in lexicographic form order.
pub(crate) fn op_cost_with(
    op: &OpNode,
    operands: &Operands<'_>,
    assigned: &[&Tiling],
    k: usize,
) -> Result<OpCost> {
    let n = op.inputs.len();
    let forms = aligned_forms(op, operands.shapes[n].len());
    let mut best: Option<OpCost> = None;
    let mut seq = vec![0usize; k];
    loop {
        if let Some((form_in, form_out)) = form_tilings(&forms, &seq, &operands.shapes) {
            let mut elements = 0;
            let mut bytes = 0;
            for s in 0..n {
                let src = SourceTiling::from(assigned[s]);
                let e = conversion_cost(&src, &form_in[s], operands.shapes[s], k)?;
                elements += e;
                bytes += e * operands.dtype_bytes[s];
            }
            let e = conversion_cost(&form_out, assigned[n], operands.shapes[n], k)?;
            elements += e;
            bytes += e * operands.dtype_bytes[n];
            if best.as_ref().is_none_or(|b| elements < b.elements) {
                best = Some(OpCost {
                    elements,
                    bytes,
                    forms: seq.clone(),
                });
            }
        }
        if !advance(&mut seq, forms.len()) {
            break;
        }
    }
    best.ok_or_else(|| Error::NoAlignedForm(op.id.clone()))
}

/// Odometer step over `radix`-ary digits, last digit fastest. Returns false
/// after the final combination.
pub(crate) fn advance(digits: &mut [usize], radix: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < radix {
            return true;
        }
        *d = 0;
    }
    false
}

/// Communication of `op` under the given input and output tilings (one per
/// input, in order), each of `k` cuts.
pub fn op_comm_cost(
    g: &DataflowGraph,
    op: &OpNode,
    inputs: &[&Tiling],
    output: &Tiling,
    k: usize,
) -> Result<OpCost> {
    if inputs.len() != op.inputs.len() {
        return Err(Error::Malformed(format!(
            "op `{}` takes {} inputs, got {} tilings",
            op.id,
            op.inputs.len(),
            inputs.len()
        )));
    }
    for t in inputs.iter().chain(std::iter::once(&output)) {
        if t.len() != k {
            return Err(Error::CutCountMismatch {
                expected: k,
                got: t.len(),
            });
        }
    }
    let operands = Operands::of(g, op);
    for (t, shape) in inputs.iter().chain(std::iter::once(&output)).zip(&operands.shapes) {
        check_divisible(shape, t.cuts().iter().map(|c| c.dim()))?;
    }
    let mut assigned = inputs.to_vec();
    assigned.push(output);
    op_cost_with(op, &operands, &assigned, k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCostEntry {
    pub op_id: String,
    pub elements: u64,
    pub bytes: u64,
    pub chosen_form: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_elements: u64,
    pub total_bytes: u64,
    pub per_op: Vec<OpCostEntry>,
}

impl CostReport {
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize") + "\n"
    }
}

/// Total communication of running every op of `g` under `a` on `2^k`
/// devices.
pub fn graph_cost(g: &DataflowGraph, a: &TilingAssignment) -> Result<CostReport> {
    a.check_covers(g)?;
    let k = a.k();
    let mut per_op = Vec::with_capacity(g.ops().len());
    for op in g.ops() {
        let inputs: Vec<&Tiling> = op.inputs.iter().map(|t| a.get(t)).collect::<Result<_>>()?;
        let c = op_comm_cost(g, op, &inputs, a.get(&op.output)?, k)?;
        let forms = aligned_forms(op, g.spec(&op.output).rank());
        let chosen_form = c
            .forms
            .iter()
            .map(|&f| forms[f].name.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        per_op.push(OpCostEntry {
            op_id: op.id.clone(),
            elements: c.elements,
            bytes: c.bytes,
            chosen_form,
        });
    }
    Ok(CostReport {
        total_elements: per_op.iter().map(|e| e.elements).sum(),
        total_bytes: per_op.iter().map(|e| e.bytes).sum(),
        per_op,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Data,
    Model,
    Hybrid { groups: u64 },
}

impl FromStr for Strategy {
    type Err = Error;

    /// `data`, `model`, `hybrid:G` or `hybrid(G)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown strategy `{s}`"));
        match s {
            "data" => Ok(Strategy::Data),
            "model" => Ok(Strategy::Model),
            _ => {
                let g = s
                    .strip_prefix("hybrid:")
                    .or_else(|| s.strip_prefix("hybrid(").and_then(|r| r.strip_suffix(')')))
                    .ok_or_else(bad)?;
                let groups = g.parse().map_err(|_| bad())?;
                Ok(Strategy::Hybrid { groups })
            }
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Data => f.write_str("data"),
            Strategy::Model => f.write_str("model"),
            Strategy::Hybrid { groups } => write!(f, "hybrid:{groups}"),
        }
    }
}

/// Bytes moved per training step by the classic strategies on a square
/// MLP: data parallelism ships every parameter to and from each device,
/// model parallelism every activation, and hybrid does data parallelism
/// across `groups` groups with model parallelism inside each.
pub fn reference_strategy_bytes(
    layers: u64,
    width: u64,
    batch: u64,
    devices: u64,
    dtype_bytes: u64,
    strategy: Strategy,
) -> Result<u64> {
    if [layers, width, batch, devices, dtype_bytes].contains(&0) {
        return Err(Error::InvalidConfig("arguments must be positive".into()));
    }
    let params = layers * width * width * dtype_bytes;
    let activations = layers * batch * width * dtype_bytes;
    Ok(match strategy {
        Strategy::Data => params * devices * 2,
        Strategy::Model => activations * devices * 2,
        Strategy::Hybrid { groups } => {
            if groups == 0 || !devices.is_multiple_of(groups) {
                return Err(Error::InvalidConfig(format!(
                    "{groups} groups do not divide {devices} devices"
                )));
            }
            // groups * (activations / groups) * (devices / groups) * 2
            params * groups * 2 + activations * (devices / groups) * 2
        }
    })
}

/// [`reference_strategy_bytes`] in megabytes (10^6 bytes).
pub fn reference_strategy_cost(
    layers: u64,
    width: u64,
    batch: u64,
    devices: u64,
    dtype_bytes: u64,
    strategy: Strategy,
) -> Result<f64> {
    reference_strategy_bytes(layers, width, batch, devices, dtype_bytes, strategy)
        .map(|b| b as f64 / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_mlp, parse_graph, MlpConfig};
    use crate::tiling::{preset_assignment, Preset};
    use std::collections::BTreeMap;

    fn t(s: &str) -> Tiling {
        s.parse().unwrap()
    }

    fn src(s: &str) -> SourceTiling {
        SourceTiling::from(&t(s))
    }

    #[test]
    fn conversion_examples() {
        let sh = [4, 4];
        assert_eq!(conversion_cost(&src("R"), &t("R"), &sh, 1).unwrap(), 0);
        assert_eq!(conversion_cost(&src("R"), &t("C"), &sh, 1).unwrap(), 8);
        assert_eq!(conversion_cost(&src("r"), &t("R"), &sh, 1).unwrap(), 0);
        assert_eq!(conversion_cost(&src("R"), &t("r"), &sh, 1).unwrap(), 16);
        let red = SourceTiling::reduction(1);
        assert_eq!(conversion_cost(&red, &t("R"), &sh, 1).unwrap(), 16);
        assert_eq!(conversion_cost(&red, &t("r"), &sh, 1).unwrap(), 32);
    }

    #[test]
    fn conversion_errors() {
        assert!(matches!(
            conversion_cost(&src("R"), &t("R R"), &[4, 4], 1),
            Err(Error::CutCountMismatch { .. })
        ));
        assert!(matches!(
            conversion_cost(&src("R R"), &t("r r"), &[2, 4], 2),
            Err(Error::Indivisible { .. })
        ));
    }

    fn single_matmul(transpose_b: bool) -> DataflowGraph {
        let y = if transpose_b { "[4,6]" } else { "[6,4]" };
        parse_graph(&format!(
            r#"{{"tensors":[
                {{"id":"X","shape":[4,6],"role":"input"}},
                {{"id":"Y","shape":{y},"role":"weight"}},
                {{"id":"Z","shape":[4,4],"role":"activation"}}],
              "ops":[{{"id":"mm","kind":"matmul","inputs":["X","Y"],"output":"Z",
                      "attrs":{{"transpose_b":{transpose_b}}}}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn matmul_op_costs() {
        let g = single_matmul(false);
        let op = &g.ops()[0];
        let c = op_comm_cost(&g, op, &[&t("R"), &t("r")], &t("R"), 1).unwrap();
        assert_eq!((c.elements, c.forms.as_slice()), (0, &[0][..]));
        let c = op_comm_cost(&g, op, &[&t("C"), &t("R")], &t("R"), 1).unwrap();
        assert_eq!((c.elements, c.bytes, c.forms.as_slice()), (16, 64, &[2][..]));
    }

    #[test]
    fn transpose_remaps_forms() {
        let g = single_matmul(true);
        let forms = aligned_forms(&g.ops()[0], 2);
        assert_eq!(forms[1].inputs, vec![Cut::Replicate, Cut::Partition(0)]);
        assert_eq!(forms[2].inputs, vec![Cut::Partition(1), Cut::Partition(1)]);
        let c = op_comm_cost(&g, &g.ops()[0], &[&t("r"), &t("R")], &t("C"), 1).unwrap();
        assert_eq!(c.elements, 0);
    }

    #[test]
    fn elementwise_forms() {
        let g = gen_mlp(&MlpConfig::new(4, vec![4, 4])).unwrap();
        let act = &g.ops()[1];
        let names: Vec<String> = aligned_forms(act, 2).into_iter().map(|f| f.name).collect();
        assert_eq!(names, ["P0", "P1", "replicate"]);
        let c = op_comm_cost(&g, act, &[&t("R")], &t("R"), 1).unwrap();
        assert_eq!(c.elements, 0);
    }

    #[test]
    fn data_preset_costs() {
        let fwd = gen_mlp(&MlpConfig::new(4, vec![4, 4])).unwrap();
        let a = preset_assignment(&fwd, Preset::Data, 1).unwrap();
        assert_eq!(graph_cost(&fwd, &a).unwrap().total_elements, 0);

        let bwd = gen_mlp(&MlpConfig::new(4, vec![4, 4]).backward()).unwrap();
        let a = preset_assignment(&bwd, Preset::Data, 1).unwrap();
        let r = graph_cost(&bwd, &a).unwrap();
        // Only the weight gradient pays: both partials are fetched by the
        // other replica.
        assert_eq!(r.total_elements, 32);
        assert_eq!(r.total_bytes, 128);
        let wgrad = r.per_op.iter().find(|e| e.op_id == "wgrad1").unwrap();
        assert_eq!((wgrad.elements, wgrad.chosen_form.as_str()), (32, "reduce"));
    }

    #[test]
    fn k_cut_op_cost_uses_form_sequences() {
        let g = single_matmul(false);
        let op = &g.ops()[0];
        let c = op_comm_cost(&g, op, &[&t("R C"), &t("r R")], &t("R r"), 2).unwrap();
        assert_eq!((c.elements, c.forms.as_slice()), (32, &[0, 2][..]));
        let tilings = BTreeMap::from([
            ("X".to_string(), t("R C")),
            ("Y".to_string(), t("r R")),
            ("Z".to_string(), t("R r")),
        ]);
        let a = TilingAssignment::new(2, tilings).unwrap();
        let r = graph_cost(&g, &a).unwrap();
        assert_eq!((r.total_elements, r.per_op[0].chosen_form.as_str()), (32, "row reduce"));
    }

    #[test]
    fn reference_strategies() {
        let mb = |s| reference_strategy_cost(5, 300, 400, 16, 4, s).unwrap();
        assert_eq!(reference_strategy_bytes(5, 300, 400, 16, 4, Strategy::Data).unwrap(), 57_600_000);
        assert!((mb(Strategy::Data) - 57.6).abs() < 1e-9);
        assert!((mb(Strategy::Model) - 76.8).abs() < 1e-9);
        assert!((mb(Strategy::Hybrid { groups: 4 }) - 33.6).abs() < 1e-9);
        assert_eq!("hybrid(4)".parse::<Strategy>().unwrap(), Strategy::Hybrid { groups: 4 });
        assert_eq!("hybrid:2".parse::<Strategy>().unwrap(), Strategy::Hybrid { groups: 2 });
        assert!("hybrid".parse::<Strategy>().is_err());
    }
}
