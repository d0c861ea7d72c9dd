//! Semantic dataflow graph: tensors, operators, validation, the JSON graph
//! document, and generators for MLP and CNN training graphs.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

fn default_dtype_bytes() -> u32 {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Weight,
    Activation,
    Gradient,
    Temp,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Input => "input",
            Role::Weight => "weight",
            Role::Activation => "activation",
            Role::Gradient => "gradient",
            Role::Temp => "temp",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub id: String,
    /// Extents per dimension. A `temp` tensor may be declared with an empty
    /// shape in a document; it is then inferred from its producer.
    pub shape: Vec<usize>,
    #[serde(default = "default_dtype_bytes")]
    pub dtype_bytes: u32,
    pub role: Role,
}

impl TensorSpec {
    pub fn new(id: impl Into<String>, shape: Vec<usize>, role: Role) -> Self {
        Self {
            id: id.into(),
            shape,
            dtype_bytes: 4,
            role,
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn elements(&self) -> u64 {
        self.shape.iter().map(|&e| e as u64).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Matmul,
    Elementwise,
    Conv,
    Generic,
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matmul" => Ok(OpKind::Matmul),
            "elementwise" => Ok(OpKind::Elementwise),
            "conv" => Ok(OpKind::Conv),
            "generic" => Ok(OpKind::Generic),
            other => Err(Error::UnknownOpKind(other.to_string())),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Matmul => "matmul",
            OpKind::Elementwise => "elementwise",
            OpKind::Conv => "conv",
            OpKind::Generic => "generic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElemFn {
    Add,
    Sub,
    Scale,
    PointwiseFn,
    PointwiseFnGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// `[x, w] -> y`
    Forward,
    /// `[dy, w] -> dx`
    BackwardData,
    /// `[dy, x] -> dw`
    BackwardFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatmulAttrs {
    #[serde(default)]
    pub transpose_a: bool,
    #[serde(default)]
    pub transpose_b: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementwiseAttrs {
    #[serde(rename = "fn")]
    pub func: ElemFn,
    /// Learning rate for `scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalar: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub mode: ConvMode,
    /// Batch and channel dimension of the activation operands.
    #[serde(default)]
    pub batch_dim: usize,
    #[serde(default = "one")]
    pub channel_dim: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GenericAttrs {
    #[serde(default)]
    pub batch_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpAttrs {
    Matmul(MatmulAttrs),
    Elementwise(ElementwiseAttrs),
    Conv(ConvAttrs),
    Generic(GenericAttrs),
}

impl OpAttrs {
    pub fn kind(&self) -> OpKind {
        match self {
            OpAttrs::Matmul(_) => OpKind::Matmul,
            OpAttrs::Elementwise(_) => OpKind::Elementwise,
            OpAttrs::Conv(_) => OpKind::Conv,
            OpAttrs::Generic(_) => OpKind::Generic,
        }
    }
}

/// Dimension roles of a contraction (matmul or conv) in terms of the
/// `(m x k) . (k x n) = (m x n)` pattern. Each pair names dimension indices
/// of the corresponding operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Contraction {
    /// `(m, k)` dims of the first input.
    pub lhs: (usize, usize),
    /// `(k, n)` dims of the second input.
    pub rhs: (usize, usize),
    /// `(m, n)` dims of the output.
    pub out: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub id: String,
    pub inputs: Vec<String>,
    pub output: String,
    pub attrs: OpAttrs,
}

impl OpNode {
    pub fn kind(&self) -> OpKind {
        self.attrs.kind()
    }

    pub fn contraction(&self) -> Option<Contraction> {
        match self.attrs {
            OpAttrs::Matmul(a) => Some(Contraction {
                lhs: if a.transpose_a { (1, 0) } else { (0, 1) },
                rhs: if a.transpose_b { (1, 0) } else { (0, 1) },
                out: (0, 1),
            }),
            OpAttrs::Conv(c) => {
                let (b, ch) = (c.batch_dim, c.channel_dim);
                Some(match c.mode {
                    ConvMode::Forward => Contraction {
                        lhs: (b, ch),
                        rhs: (1, 0),
                        out: (b, ch),
                    },
                    ConvMode::BackwardData => Contraction {
                        lhs: (b, ch),
                        rhs: (0, 1),
                        out: (b, ch),
                    },
                    ConvMode::BackwardFilter => Contraction {
                        lhs: (ch, b),
                        rhs: (b, ch),
                        out: (0, 1),
                    },
                })
            }
            _ => None,
        }
    }

    /// Dimensions of operand `slot` (inputs first, then the output at index
    /// `inputs.len()`) that the operator may partition.
    pub fn partitionable_dims(&self, slot: usize, rank: usize) -> Vec<usize> {
        match self.attrs {
            OpAttrs::Elementwise(_) => (0..rank).collect(),
            OpAttrs::Generic(g) => vec![g.batch_dim],
            OpAttrs::Matmul(_) | OpAttrs::Conv(_) => {
                let c = self.contraction().expect("contraction op");
                let (a, b) = match slot {
                    0 => c.lhs,
                    1 => c.rhs,
                    _ => c.out,
                };
                let mut v = vec![a, b];
                v.sort_unstable();
                v
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct OpDoc {
    id: String,
    kind: String,
    inputs: Vec<String>,
    output: String,
    #[serde(default)]
    attrs: Value,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    tensors: Vec<TensorSpec>,
    ops: Vec<OpDoc>,
}

impl OpDoc {
    fn from_node(op: &OpNode) -> Self {
        let attrs = match op.attrs {
            OpAttrs::Matmul(a) => serde_json::to_value(a),
            OpAttrs::Elementwise(a) => serde_json::to_value(a),
            OpAttrs::Conv(a) => serde_json::to_value(a),
            OpAttrs::Generic(a) => serde_json::to_value(a),
        }
        .expect("attrs serialize");
        OpDoc {
            id: op.id.clone(),
            kind: op.kind().to_string(),
            inputs: op.inputs.clone(),
            output: op.output.clone(),
            attrs,
        }
    }

    fn into_node(self) -> Result<OpNode> {
        let kind: OpKind = self.kind.parse()?;
        let attrs = if self.attrs.is_null() {
            Value::Object(Default::default())
        } else {
            self.attrs
        };
        let bad = |e: serde_json::Error| Error::Malformed(format!("op `{}` attrs: {e}", self.id));
        let attrs = match kind {
            OpKind::Matmul => OpAttrs::Matmul(serde_json::from_value(attrs).map_err(bad)?),
            OpKind::Elementwise => {
                OpAttrs::Elementwise(serde_json::from_value(attrs).map_err(bad)?)
            }
            OpKind::Conv => OpAttrs::Conv(serde_json::from_value(attrs).map_err(bad)?),
            OpKind::Generic => OpAttrs::Generic(serde_json::from_value(attrs).map_err(bad)?),
        };
        Ok(OpNode {
            id: self.id,
            inputs: self.inputs,
            output: self.output,
            attrs,
        })
    }
}

/// A validated serial dataflow graph. Immutable after construction.
#[derive(Debug, Clone)]
pub struct DataflowGraph {
    tensors: Vec<TensorSpec>,
    ops: Vec<OpNode>,
    index: HashMap<String, usize>,
}

impl PartialEq for DataflowGraph {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors && self.ops == other.ops
    }
}

impl DataflowGraph {
    /// Builds a graph, inferring empty `temp` shapes and checking every
    /// invariant.
    pub fn new(mut tensors: Vec<TensorSpec>, ops: Vec<OpNode>) -> Result<Self> {
        let index = build_index(&tensors)?;
        check_structure(&index, &ops)?;
        infer_shapes(&mut tensors, &index, &ops)?;
        let g = Self {
            tensors,
            ops,
            index,
        };
        g.validate()?;
        Ok(g)
    }

    /// Builds a graph without operator shape checks. Used for tile graphs,
    /// whose operand shapes follow per-tensor tilings rather than operator
    /// semantics.
    pub(crate) fn new_unchecked(tensors: Vec<TensorSpec>, ops: Vec<OpNode>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.clone(), i))
            .collect();
        Self {
            tensors,
            ops,
            index,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn ops(&self) -> &[OpNode] {
        &self.ops
    }

    pub fn tensor(&self, id: &str) -> Option<&TensorSpec> {
        self.index.get(id).map(|&i| &self.tensors[i])
    }

    pub fn tensor_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub(crate) fn spec(&self, id: &str) -> &TensorSpec {
        &self.tensors[self.index[id]]
    }

    /// Tensors not produced by any op.
    pub fn graph_inputs(&self) -> Vec<&TensorSpec> {
        let produced: HashSet<&str> = self.ops.iter().map(|o| o.output.as_str()).collect();
        self.tensors
            .iter()
            .filter(|t| !produced.contains(t.id.as_str()))
            .collect()
    }

    /// Distinct tensors touched by `op`, in first-occurrence order.
    pub fn incident_tensors<'a>(&'a self, op: &'a OpNode) -> Vec<&'a str> {
        let mut out: Vec<&str> = Vec::with_capacity(op.inputs.len() + 1);
        for t in op.inputs.iter().chain(std::iter::once(&op.output)) {
            if !out.contains(&t.as_str()) {
                out.push(t);
            }
        }
        out
    }

    /// Checks every operator invariant against the current shapes.
    pub fn validate(&self) -> Result<()> {
        check_structure(&self.index, &self.ops)?;
        for op in &self.ops {
            let shapes: Vec<&[usize]> = op
                .inputs
                .iter()
                .map(|t| self.spec(t).shape.as_slice())
                .collect();
            let expected = output_shape(op, &shapes)?;
            let declared = &self.spec(&op.output).shape;
            if let Some(expected) = expected {
                if &expected != declared {
                    return Err(Error::ShapeMismatch {
                        op: op.id.clone(),
                        detail: format!("output declared {declared:?}, inferred {expected:?}"),
                    });
                }
            }
            if let OpAttrs::Elementwise(_) = op.attrs {
                if shapes.iter().any(|s| *s != declared.as_slice()) {
                    return Err(Error::ShapeMismatch {
                        op: op.id.clone(),
                        detail: format!("elementwise operands {shapes:?} vs output {declared:?}"),
                    });
                }
            }
            if let OpAttrs::Generic(a) = op.attrs {
                for t in op.inputs.iter().chain(std::iter::once(&op.output)) {
                    let r = self.spec(t).rank();
                    if a.batch_dim >= r {
                        return Err(Error::DimOutOfRange {
                            dim: a.batch_dim,
                            rank: r,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> String {
        let doc = GraphDoc {
            tensors: self.tensors.clone(),
            ops: self.ops.iter().map(OpDoc::from_node).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serialize") + "\n"
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        let ops = doc
            .ops
            .into_iter()
            .map(OpDoc::into_node)
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.tensors, ops)
    }
}

pub fn parse_graph(text: &str) -> Result<DataflowGraph> {
    DataflowGraph::from_document(text)
}

pub fn serialize_graph(g: &DataflowGraph) -> String {
    g.to_document()
}

fn build_index(tensors: &[TensorSpec]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(tensors.len());
    for (i, t) in tensors.iter().enumerate() {
        if index.insert(t.id.clone(), i).is_some() {
            return Err(Error::DuplicateId(t.id.clone()));
        }
        if t.dtype_bytes == 0 {
            return Err(Error::Malformed(format!("tensor `{}` has dtype_bytes 0", t.id)));
        }
        let inferable = t.shape.is_empty() && t.role == Role::Temp;
        if !inferable && (t.shape.is_empty() || t.shape.contains(&0)) {
            return Err(Error::Malformed(format!(
                "tensor `{}` has invalid shape {:?}",
                t.id, t.shape
            )));
        }
    }
    Ok(index)
}

/// Resolves references, single assignment, cycles and op order.
fn check_structure(index: &HashMap<String, usize>, ops: &[OpNode]) -> Result<()> {
    let mut op_ids = HashSet::new();
    let mut producer: HashMap<&str, usize> = HashMap::new();
    for (i, op) in ops.iter().enumerate() {
        if !op_ids.insert(op.id.as_str()) {
            return Err(Error::DuplicateId(op.id.clone()));
        }
        for t in op.inputs.iter().chain(std::iter::once(&op.output)) {
            if !index.contains_key(t) {
                return Err(Error::DanglingTensor {
                    op: op.id.clone(),
                    tensor: t.clone(),
                });
            }
        }
        if producer.insert(op.output.as_str(), i).is_some() {
            return Err(Error::MultipleProducers(op.output.clone()));
        }
    }
    // Cycle search over op -> consumer-op edges.
    let mut consumers: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, op) in ops.iter().enumerate() {
        for t in &op.inputs {
            consumers.entry(t.as_str()).or_default().push(i);
        }
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; ops.len()];
    for start in 0..ops.len() {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let succ = consumers
                .get(ops[node].output.as_str())
                .map(|v| v.as_slice())
                .unwrap_or(&[]);
            if *next < succ.len() {
                let s = succ[*next];
                *next += 1;
                match state[s] {
                    0 => {
                        state[s] = 1;
                        stack.push((s, 0));
                    }
                    1 => return Err(Error::Cycle(ops[s].id.clone())),
                    _ => {}
                }
            } else {
                state[node] = 2;
                stack.pop();
            }
        }
    }
    for (i, op) in ops.iter().enumerate() {
        for t in &op.inputs {
            if let Some(&p) = producer.get(t.as_str()) {
                if p >= i {
                    return Err(Error::NotTopological {
                        op: op.id.clone(),
                        tensor: t.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn infer_shapes(
    tensors: &mut [TensorSpec],
    index: &HashMap<String, usize>,
    ops: &[OpNode],
) -> Result<()> {
    for op in ops {
        let out = index[&op.output];
        if !tensors[out].shape.is_empty() {
            continue;
        }
        let shapes: Vec<Vec<usize>> = op
            .inputs
            .iter()
            .map(|t| tensors[index[t]].shape.clone())
            .collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let inferred = match op.attrs {
            OpAttrs::Elementwise(_) => refs.first().map(|s| s.to_vec()),
            _ => output_shape(op, &refs)?,
        };
        match inferred {
            Some(s) if !s.is_empty() => tensors[out].shape = s,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: op.id.clone(),
                    detail: format!("cannot infer shape of `{}`", op.output),
                })
            }
        }
    }
    Ok(())
}

fn mismatch(op: &OpNode, detail: String) -> Error {
    Error::ShapeMismatch {
        op: op.id.clone(),
        detail,
    }
}

/// The output shape implied by a contraction op, `None` for kinds whose
/// output is declared rather than derived.
fn output_shape(op: &OpNode, inputs: &[&[usize]]) -> Result<Option<Vec<usize>>> {
    match op.attrs {
        OpAttrs::Matmul(a) => {
            if inputs.len() != 2 || inputs.iter().any(|s| s.len() != 2) {
                return Err(mismatch(op, format!("matmul needs two matrices, got {inputs:?}")));
            }
            let c = op.contraction().unwrap();
            let (m, k1) = (inputs[0][c.lhs.0], inputs[0][c.lhs.1]);
            let (k2, n) = (inputs[1][c.rhs.0], inputs[1][c.rhs.1]);
            if k1 != k2 {
                return Err(mismatch(
                    op,
                    format!(
                        "inner extents {k1} vs {k2} (operands {:?}{} and {:?}{})",
                        inputs[0],
                        if a.transpose_a { "^T" } else { "" },
                        inputs[1],
                        if a.transpose_b { "^T" } else { "" },
                    ),
                ));
            }
            Ok(Some(vec![m, n]))
        }
        OpAttrs::Conv(c) => {
            if inputs.len() != 2 || inputs.iter().any(|s| s.len() != 4) {
                return Err(mismatch(op, format!("conv needs two rank-4 operands, got {inputs:?}")));
            }
            if c.batch_dim == c.channel_dim || c.batch_dim > 3 || c.channel_dim > 3 {
                return Err(mismatch(op, "invalid batch/channel dims".into()));
            }
            let spatial: Vec<usize> = (0..4)
                .filter(|&d| d != c.batch_dim && d != c.channel_dim)
                .collect();
            let act = |b: usize, ch: usize, h: usize, w: usize| {
                let mut s = vec![0; 4];
                s[c.batch_dim] = b;
                s[c.channel_dim] = ch;
                s[spatial[0]] = h;
                s[spatial[1]] = w;
                s
            };
            let (a0, a1) = (inputs[0], inputs[1]);
            let shape = match c.mode {
                ConvMode::Forward => {
                    let (x, w) = (a0, a1);
                    if x[c.channel_dim] != w[1]
                        || x[spatial[0]] < w[2]
                        || x[spatial[1]] < w[3]
                    {
                        return Err(mismatch(op, format!("input {x:?} vs filter {w:?}")));
                    }
                    act(
                        x[c.batch_dim],
                        w[0],
                        x[spatial[0]] - w[2] + 1,
                        x[spatial[1]] - w[3] + 1,
                    )
                }
                ConvMode::BackwardData => {
                    let (dy, w) = (a0, a1);
                    if dy[c.channel_dim] != w[0] {
                        return Err(mismatch(op, format!("gradient {dy:?} vs filter {w:?}")));
                    }
                    act(
                        dy[c.batch_dim],
                        w[1],
                        dy[spatial[0]] + w[2] - 1,
                        dy[spatial[1]] + w[3] - 1,
                    )
                }
                ConvMode::BackwardFilter => {
                    let (dy, x) = (a0, a1);
                    if dy[c.batch_dim] != x[c.batch_dim]
                        || x[spatial[0]] < dy[spatial[0]]
                        || x[spatial[1]] < dy[spatial[1]]
                    {
                        return Err(mismatch(op, format!("gradient {dy:?} vs input {x:?}")));
                    }
                    vec![
                        dy[c.channel_dim],
                        x[c.channel_dim],
                        x[spatial[0]] - dy[spatial[0]] + 1,
                        x[spatial[1]] - dy[spatial[1]] + 1,
                    ]
                }
            };
            Ok(Some(shape))
        }
        OpAttrs::Elementwise(a) => {
            let arity = match a.func {
                ElemFn::Add | ElemFn::Sub | ElemFn::PointwiseFnGrad => 2,
                ElemFn::Scale | ElemFn::PointwiseFn => 1,
            };
            if inputs.len() != arity {
                return Err(mismatch(
                    op,
                    format!("{:?} takes {arity} inputs, got {}", a.func, inputs.len()),
                ));
            }
            Ok(None)
        }
        OpAttrs::Generic(_) => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub batch: usize,
    /// Layer widths `d_0..d_L`.
    pub dims: Vec<usize>,
    pub with_backward: bool,
    pub with_update: bool,
    pub learning_rate: f64,
}

impl MlpConfig {
    pub fn new(batch: usize, dims: Vec<usize>) -> Self {
        Self {
            batch,
            dims,
            with_backward: false,
            with_update: false,
            learning_rate: 0.1,
        }
    }

    pub fn backward(mut self) -> Self {
        self.with_backward = true;
        self
    }

    pub fn update(mut self) -> Self {
        self.with_update = true;
        self
    }

    pub fn layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    pub batch: usize,
    pub image_hw: (usize, usize),
    pub channels: Vec<usize>,
    pub filter_hw: (usize, usize),
    pub with_backward: bool,
    pub with_update: bool,
    pub learning_rate: f64,
}

impl CnnConfig {
    pub fn new(
        batch: usize,
        image_hw: (usize, usize),
        channels: Vec<usize>,
        filter_hw: (usize, usize),
    ) -> Self {
        Self {
            batch,
            image_hw,
            channels,
            filter_hw,
            with_backward: false,
            with_update: false,
            learning_rate: 0.1,
        }
    }

    pub fn backward(mut self) -> Self {
        self.with_backward = true;
        self
    }

    pub fn update(mut self) -> Self {
        self.with_update = true;
        self
    }
}

struct Builder {
    tensors: Vec<TensorSpec>,
    ops: Vec<OpNode>,
}

impl Builder {
    fn tensor(&mut self, id: String, shape: Vec<usize>, role: Role) -> String {
        self.tensors.push(TensorSpec::new(id.clone(), shape, role));
        id
    }

    fn op(&mut self, id: String, inputs: &[&str], output: &str, attrs: OpAttrs) {
        self.ops.push(OpNode {
            id,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.to_string(),
            attrs,
        });
    }

    fn elementwise(&mut self, id: String, inputs: &[&str], output: &str, func: ElemFn) {
        self.op(
            id,
            inputs,
            output,
            OpAttrs::Elementwise(ElementwiseAttrs { func, scalar: None }),
        );
    }

    /// Loss head, activation-gradient nodes and update rule shared by the
    /// MLP and CNN generators. `layer_op` emits the two gradient contractions
    /// of layer `l` given `(dh_l, dx_{l-1} id)` and returns the weight
    /// gradient id.
    fn backward_and_update(
        &mut self,
        layers: usize,
        shape_of: &dyn Fn(&str) -> Vec<usize>,
        with_update: bool,
        learning_rate: f64,
        mut layer_op: impl FnMut(&mut Self, usize, &str, &str) -> String,
    ) {
        let top = format!("x{layers}");
        let target = self.tensor("y".into(), shape_of(&top), Role::Input);
        let dtop = self.tensor(format!("dx{layers}"), shape_of(&top), Role::Gradient);
        self.elementwise("loss".into(), &[&top, &target], &dtop, ElemFn::Sub);
        let mut grads = Vec::new();
        for l in (1..=layers).rev() {
            let h = format!("h{l}");
            let dh = self.tensor(format!("dh{l}"), shape_of(&h), Role::Gradient);
            self.elementwise(
                format!("act_grad{l}"),
                &[&format!("dx{l}"), &h],
                &dh,
                ElemFn::PointwiseFnGrad,
            );
            let dx_prev = format!("dx{}", l - 1);
            let dw = layer_op(self, l, &dh, &dx_prev);
            grads.push((l, dw));
        }
        if with_update {
            grads.sort();
            for (l, dw) in grads {
                let w = format!("W{l}");
                let u = self.tensor(format!("u{l}"), shape_of(&w), Role::Temp);
                self.op(
                    format!("scale{l}"),
                    &[&dw],
                    &u,
                    OpAttrs::Elementwise(ElementwiseAttrs {
                        func: ElemFn::Scale,
                        scalar: Some(learning_rate),
                    }),
                );
                let w_new = self.tensor(format!("W{l}_new"), shape_of(&w), Role::Weight);
                self.elementwise(format!("update{l}"), &[&w, &u], &w_new, ElemFn::Sub);
            }
        }
    }
}

/// Builds the training graph of a fully connected network: per layer
/// `h_l = x_{l-1} W_l`, `x_l = f(h_l)`; with backward, a squared-error loss
/// head `dx_L = x_L - y`, `dh_l = df(h_l) * dx_l`, `dW_l = x_{l-1}^T dh_l`,
/// `dx_{l-1} = dh_l W_l^T`; with update, `W_l_new = W_l - eps * dW_l`.
pub fn gen_mlp(cfg: &MlpConfig) -> Result<DataflowGraph> {
    if cfg.dims.len() < 2 || cfg.batch == 0 || cfg.dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "mlp needs batch > 0 and at least two positive widths, got batch {} dims {:?}",
            cfg.batch, cfg.dims
        )));
    }
    if cfg.with_update && !cfg.with_backward {
        return Err(Error::InvalidConfig("update requires backward".into()));
    }
    let layers = cfg.layers();
    let b = cfg.batch;
    let mut g = Builder {
        tensors: Vec::new(),
        ops: Vec::new(),
    };
    g.tensor("x0".into(), vec![b, cfg.dims[0]], Role::Input);
    for l in 1..=layers {
        let (din, dout) = (cfg.dims[l - 1], cfg.dims[l]);
        let w = g.tensor(format!("W{l}"), vec![din, dout], Role::Weight);
        let h = g.tensor(format!("h{l}"), vec![b, dout], Role::Activation);
        let x = g.tensor(format!("x{l}"), vec![b, dout], Role::Activation);
        g.op(
            format!("fc{l}"),
            &[&format!("x{}", l - 1), &w],
            &h,
            OpAttrs::Matmul(MatmulAttrs::default()),
        );
        g.elementwise(format!("act{l}"), &[&h], &x, ElemFn::PointwiseFn);
    }
    if cfg.with_backward {
        let dims = cfg.dims.clone();
        let shape_of = move |id: &str| -> Vec<usize> {
            let (prefix, num) = id.split_at(1);
            let l: usize = num.trim_end_matches("_new").parse().unwrap();
            match prefix {
                "W" => vec![dims[l - 1], dims[l]],
                _ => vec![b, dims[l]],
            }
        };
        let dims2 = cfg.dims.clone();
        g.backward_and_update(
            layers,
            &shape_of,
            cfg.with_update,
            cfg.learning_rate,
            |g, l, dh, dx_prev| {
                let x_prev = format!("x{}", l - 1);
                let w = format!("W{l}");
                let dw = g.tensor(format!("dW{l}"), vec![dims2[l - 1], dims2[l]], Role::Gradient);
                g.op(
                    format!("wgrad{l}"),
                    &[&x_prev, dh],
                    &dw,
                    OpAttrs::Matmul(MatmulAttrs {
                        transpose_a: true,
                        transpose_b: false,
                    }),
                );
                g.tensor(dx_prev.to_string(), vec![b, dims2[l - 1]], Role::Gradient);
                g.op(
                    format!("dgrad{l}"),
                    &[dh, &w],
                    dx_prev,
                    OpAttrs::Matmul(MatmulAttrs {
                        transpose_a: false,
                        transpose_b: true,
                    }),
                );
                dw
            },
        );
    }
    DataflowGraph::new(g.tensors, g.ops)
}

/// Builds a chain of valid (unpadded, stride 1) convolutions over NCHW
/// activations with OIHW filters, mirroring [`gen_mlp`].
pub fn gen_cnn(cfg: &CnnConfig) -> Result<DataflowGraph> {
    let (ih, iw) = cfg.image_hw;
    let (fh, fw) = cfg.filter_hw;
    if cfg.channels.len() < 2
        || cfg.batch == 0
        || cfg.channels.contains(&0)
        || fh == 0
        || fw == 0
    {
        return Err(Error::InvalidConfig(format!(
            "cnn needs batch > 0, positive filter and at least two channel counts, got {cfg:?}"
        )));
    }
    let layers = cfg.channels.len() - 1;
    if ih < layers * (fh - 1) + 1 || iw < layers * (fw - 1) + 1 {
        return Err(Error::InvalidConfig(format!(
            "image {ih}x{iw} too small for {layers} layers of {fh}x{fw} filters"
        )));
    }
    if cfg.with_update && !cfg.with_backward {
        return Err(Error::InvalidConfig("update requires backward".into()));
    }
    let b = cfg.batch;
    let ch = cfg.channels.clone();
    let act_shape = move |l: usize| vec![b, ch[l], ih - l * (fh - 1), iw - l * (fw - 1)];
    let ch2 = cfg.channels.clone();
    let w_shape = move |l: usize| vec![ch2[l], ch2[l - 1], fh, fw];
    let conv = |mode| {
        OpAttrs::Conv(ConvAttrs {
            mode,
            batch_dim: 0,
            channel_dim: 1,
        })
    };
    let mut g = Builder {
        tensors: Vec::new(),
        ops: Vec::new(),
    };
    g.tensor("x0".into(), act_shape(0), Role::Input);
    for l in 1..=layers {
        let w = g.tensor(format!("W{l}"), w_shape(l), Role::Weight);
        let h = g.tensor(format!("h{l}"), act_shape(l), Role::Activation);
        let x = g.tensor(format!("x{l}"), act_shape(l), Role::Activation);
        g.op(
            format!("conv{l}"),
            &[&format!("x{}", l - 1), &w],
            &h,
            conv(ConvMode::Forward),
        );
        g.elementwise(format!("act{l}"), &[&h], &x, ElemFn::PointwiseFn);
    }
    if cfg.with_backward {
        let a2 = act_shape.clone();
        let w2 = w_shape.clone();
        let shape_of = move |id: &str| -> Vec<usize> {
            let (prefix, num) = id.split_at(1);
            let l: usize = num.trim_end_matches("_new").parse().unwrap();
            match prefix {
                "W" => w2(l),
                _ => a2(l),
            }
        };
        g.backward_and_update(
            layers,
            &shape_of,
            cfg.with_update,
            cfg.learning_rate,
            |g, l, dh, dx_prev| {
                let x_prev = format!("x{}", l - 1);
                let w = format!("W{l}");
                let dw = g.tensor(format!("dW{l}"), w_shape(l), Role::Gradient);
                g.op(
                    format!("wgrad{l}"),
                    &[dh, &x_prev],
                    &dw,
                    conv(ConvMode::BackwardFilter),
                );
                g.tensor(dx_prev.to_string(), act_shape(l - 1), Role::Gradient);
                g.op(
                    format!("dgrad{l}"),
                    &[dh, &w],
                    dx_prev,
                    conv(ConvMode::BackwardData),
                );
                dw
            },
        );
    }
    DataflowGraph::new(g.tensors, g.ops)
}
