//! Parallel execution graph: every op becomes `2^k` local sub-ops, wrapped
//! in slice/fetch/concat chains that convert operands into the chosen
//! aligned form and the result back into its assigned tiling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cost::{aligned_forms, form_tilings, op_comm_cost, SourceCut, SourceTiling};
use crate::error::{Error, Result};
use crate::graph::DataflowGraph;
use crate::placement::PlacementMap;
use crate::tiling::{block_elements, block_intersection, block_of, Block, Tiling, TilingAssignment};

/// Half-open index ranges `[start, end)` per dimension.
pub type Span = Vec<(usize, usize)>;

fn to_span(b: &[Range<usize>]) -> Span {
    b.iter().map(|r| (r.start, r.end)).collect()
}

pub fn span_block(s: &[(usize, usize)]) -> Block {
    s.iter().map(|&(a, b)| a..b).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// The device's tile of `tensor` under its assigned tiling. Graph inputs
    /// have no producer node; other buffers forward their single input.
    Buffer {
        tensor: String,
        coord: Vec<u8>,
        block: Span,
    },
    /// Extracts `block` from the input value.
    Slice { tensor: String, block: Span },
    /// Receives the input value from `src_device`.
    Fetch {
        src_device: usize,
        bytes: u64,
        phase: usize,
    },
    /// Assembles `block` from disjoint pieces.
    Concat { tensor: String, block: Span },
    /// Sums partials that each cover `block`.
    ReducePartial { tensor: String, block: Span },
    /// Local execution of `op` on this device's operands; the output covers
    /// `block` (a partial sum when the form reduces).
    SubOp {
        op: String,
        coord: Vec<u8>,
        form: String,
        block: Span,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecNode {
    pub id: usize,
    pub device: usize,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecEdge {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
}

/// Nodes are stored in a topological order (every input precedes its
/// consumer) that is also the deterministic execution order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExecutionGraph {
    pub k: usize,
    pub nodes: Vec<ExecNode>,
}

#[derive(Serialize, Deserialize)]
struct PlanDocument {
    k: usize,
    devices: usize,
    nodes: Vec<ExecNode>,
    edges: Vec<ExecEdge>,
}

impl ExecutionGraph {
    pub fn devices(&self) -> usize {
        1 << self.k
    }

    /// Every dependency edge; only edges into fetch nodes carry bytes.
    pub fn edges(&self) -> Vec<ExecEdge> {
        self.nodes
            .iter()
            .flat_map(|n| {
                let bytes = match n.kind {
                    NodeKind::Fetch { bytes, .. } => bytes,
                    _ => 0,
                };
                n.inputs.iter().map(move |&src| ExecEdge {
                    src,
                    dst: n.id,
                    bytes,
                })
            })
            .collect()
    }

    pub fn total_fetch_bytes(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Fetch { bytes, .. } => bytes,
                _ => 0,
            })
            .sum()
    }

    pub fn fetch_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Fetch { .. }))
            .count()
    }

    pub fn to_document(&self) -> String {
        let doc = PlanDocument {
            k: self.k,
            devices: self.devices(),
            nodes: self.nodes.clone(),
            edges: self.edges(),
        };
        serde_json::to_string_pretty(&doc).expect("plan serialize") + "\n"
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let doc: PlanDocument = serde_json::from_str(text)?;
        let g = ExecutionGraph {
            k: doc.k,
            nodes: doc.nodes,
        };
        if doc.devices != g.devices() {
            return Err(Error::Malformed(format!(
                "plan has {} devices but k = {}",
                doc.devices, g.k
            )));
        }
        g.check()?;
        if doc.edges != g.edges() {
            return Err(Error::Malformed("edge list disagrees with node inputs".into()));
        }
        Ok(g)
    }

    /// Ids are positions, inputs precede consumers, devices exist, and only
    /// fetches cross devices.
    pub fn check(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Malformed(format!("node {i} has id {}", n.id)));
            }
            if n.device >= self.devices() {
                return Err(Error::UnknownDevice(n.device));
            }
            for &src in &n.inputs {
                if src >= i {
                    return Err(Error::Malformed(format!(
                        "node {i} consumes node {src} that does not precede it"
                    )));
                }
                let src_dev = self.nodes[src].device;
                match n.kind {
                    NodeKind::Fetch { src_device, .. } if src_device == src_dev => {}
                    _ if src_dev == n.device => {}
                    _ => {
                        return Err(Error::Malformed(format!(
                            "edge {src} -> {i} crosses devices outside a fetch"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph plan {\n  rankdir=TB;\n");
        let mut by_dev: BTreeMap<usize, Vec<&ExecNode>> = BTreeMap::new();
        for n in &self.nodes {
            by_dev.entry(n.device).or_default().push(n);
        }
        for d in 0..self.devices() {
            let _ = writeln!(s, "  subgraph cluster_dev{d} {{\n    label=\"device {d}\";");
            for n in by_dev.get(&d).into_iter().flatten() {
                let _ = writeln!(s, "    n{} [label=\"{}\"];", n.id, dot_label(&n.kind));
            }
            s.push_str("  }\n");
        }
        for e in self.edges() {
            if e.bytes > 0 {
                let _ = writeln!(s, "  n{} -> n{} [label=\"{} B\"];", e.src, e.dst, e.bytes);
            } else {
                let _ = writeln!(s, "  n{} -> n{};", e.src, e.dst);
            }
        }
        s.push_str("}\n");
        s
    }

    pub fn export(&self, format: &str) -> Result<String> {
        match format {
            "document" | "json" => Ok(self.to_document()),
            "dot" => Ok(self.to_dot()),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

fn dot_label(k: &NodeKind) -> String {
    match k {
        NodeKind::Buffer { tensor, .. } => format!("buffer {tensor}"),
        NodeKind::Slice { tensor, .. } => format!("slice {tensor}"),
        NodeKind::Fetch { src_device, bytes, .. } => format!("fetch {bytes} B from {src_device}"),
        NodeKind::Concat { tensor, .. } => format!("concat {tensor}"),
        NodeKind::ReducePartial { tensor, .. } => format!("reduce {tensor}"),
        NodeKind::SubOp { op, form, .. } => format!("{op} [{form}]"),
    }
}

fn device_bits(dev: usize, k: usize) -> Vec<u8> {
    (0..k).map(|i| ((dev >> (k - 1 - i)) & 1) as u8).collect()
}

/// Holder closest to `dev` in the hierarchy (longest shared coordinate
/// prefix), then lowest id.
fn nearest(dev: usize, holders: &[usize], k: usize) -> usize {
    *holders
        .iter()
        .min_by_key(|&&h| {
            let shared = if h == dev {
                k
            } else {
                k - (usize::BITS - (h ^ dev).leading_zeros()) as usize
            };
            (std::cmp::Reverse(shared), h)
        })
        .expect("at least one holder")
}

struct Builder {
    k: usize,
    nodes: Vec<ExecNode>,
}

impl Builder {
    fn push(&mut self, device: usize, kind: NodeKind, inputs: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(ExecNode {
            id,
            device,
            kind,
            inputs,
        });
        id
    }

    /// Converts a tensor held as `src_nodes` (one per device) under `src`
    /// into tiles under `dst`; returns the node holding each device's tile.
    #[allow(clippy::too_many_arguments)]
    fn convert(
        &mut self,
        tensor: &str,
        shape: &[usize],
        dtype_bytes: u64,
        src: &SourceTiling,
        src_nodes: &[usize],
        dst: &Tiling,
        phase: usize,
    ) -> Vec<usize> {
        let k = self.k;
        let n_dev = 1usize << k;
        let src_dims = src.dims();
        let dst_dims: Vec<Option<usize>> = dst.cuts().iter().map(|c| c.dim()).collect();
        let reducing: Vec<usize> = (0..k).filter(|&i| src.0[i] == SourceCut::Reduce).collect();
        let combo_of = |dev: usize| -> usize {
            let bits = device_bits(dev, k);
            reducing
                .iter()
                .enumerate()
                .map(|(j, &i)| (bits[i] as usize) << j)
                .sum()
        };
        let holds: Vec<Block> = (0..n_dev)
            .map(|d| block_of(shape, &src_dims, &device_bits(d, k)))
            .collect();
        // Devices grouped by (partial, block), in order of first device.
        let mut groups: Vec<(usize, Block, Vec<usize>)> = Vec::new();
        for (d, hold) in holds.iter().enumerate() {
            let c = combo_of(d);
            match groups.iter_mut().find(|(gc, b, _)| *gc == c && b == hold) {
                Some(g) => g.2.push(d),
                None => groups.push((c, hold.clone(), vec![d])),
            }
        }
        let mut out = Vec::with_capacity(n_dev);
        for dev in 0..n_dev {
            let need = block_of(shape, &dst_dims, &device_bits(dev, k));
            let hold = &holds[dev];
            if reducing.is_empty() && need == *hold {
                out.push(src_nodes[dev]);
                continue;
            }
            if reducing.is_empty() && block_intersection(&need, hold) == block_elements(&need) {
                out.push(self.push(
                    dev,
                    NodeKind::Slice {
                        tensor: tensor.into(),
                        block: to_span(&need),
                    },
                    vec![src_nodes[dev]],
                ));
                continue;
            }
            let mut per_partial = Vec::with_capacity(1 << reducing.len());
            for combo in 0..1usize << reducing.len() {
                let mut pieces = Vec::new();
                for (_, block, members) in groups.iter().filter(|g| g.0 == combo) {
                    let piece: Block = need
                        .iter()
                        .zip(block)
                        .map(|(a, b)| a.start.max(b.start)..a.end.min(b.end))
                        .collect();
                    if piece.iter().any(|r| r.start >= r.end) {
                        continue;
                    }
                    let slice = |b: &mut Self, holder: usize| {
                        b.push(
                            holder,
                            NodeKind::Slice {
                                tensor: tensor.into(),
                                block: to_span(&piece),
                            },
                            vec![src_nodes[holder]],
                        )
                    };
                    if members.contains(&dev) {
                        pieces.push(slice(self, dev));
                    } else {
                        let holder = nearest(dev, members, k);
                        let s = slice(self, holder);
                        pieces.push(self.push(
                            dev,
                            NodeKind::Fetch {
                                src_device: holder,
                                bytes: block_elements(&piece) * dtype_bytes,
                                phase,
                            },
                            vec![s],
                        ));
                    }
                }
                per_partial.push(self.push(
                    dev,
                    NodeKind::Concat {
                        tensor: tensor.into(),
                        block: to_span(&need),
                    },
                    pieces,
                ));
            }
            out.push(if reducing.is_empty() {
                per_partial[0]
            } else {
                self.push(
                    dev,
                    NodeKind::ReducePartial {
                        tensor: tensor.into(),
                        block: to_span(&need),
                    },
                    per_partial,
                )
            });
        }
        out
    }
}

/// Rewrites `g` under `a` into per-device work placed by `p`. Each op runs in
/// its cheapest aligned form sequence; conversion fetches total exactly the
/// op's modeled cost.
pub fn build_execution_graph(
    g: &DataflowGraph,
    a: &TilingAssignment,
    p: &PlacementMap,
) -> Result<ExecutionGraph> {
    let k = a.k();
    if p.k() != k {
        return Err(Error::CutCountMismatch {
            expected: k,
            got: p.k(),
        });
    }
    a.check_covers(g)?;
    let n_dev = 1usize << k;
    let mut b = Builder {
        k,
        nodes: Vec::new(),
    };
    let mut current: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let buffers = |b: &mut Builder, tensor: &str, shape: &[usize], t: &Tiling, inputs: Option<&[usize]>| {
        let dims: Vec<Option<usize>> = t.cuts().iter().map(|c| c.dim()).collect();
        (0..n_dev)
            .map(|dev| {
                let coord = device_bits(dev, k);
                let block = to_span(&block_of(shape, &dims, &coord));
                b.push(
                    dev,
                    NodeKind::Buffer {
                        tensor: tensor.into(),
                        coord,
                        block,
                    },
                    inputs.map_or_else(Vec::new, |i| vec![i[dev]]),
                )
            })
            .collect::<Vec<_>>()
    };
    for t in g.graph_inputs() {
        let nodes = buffers(&mut b, &t.id, &t.shape, a.get(&t.id)?, None);
        current.insert(t.id.clone(), nodes);
    }
    for (oi, op) in g.ops().iter().enumerate() {
        let assigned: Vec<&Tiling> = op
            .inputs
            .iter()
            .chain(std::iter::once(&op.output))
            .map(|t| a.get(t))
            .collect::<Result<_>>()?;
        let n = op.inputs.len();
        let cost = op_comm_cost(g, op, &assigned[..n], assigned[n], k)?;
        let specs: Vec<_> = op
            .inputs
            .iter()
            .chain(std::iter::once(&op.output))
            .map(|t| g.tensor(t).expect("validated"))
            .collect();
        let shapes: Vec<&[usize]> = specs.iter().map(|s| s.shape.as_slice()).collect();
        let forms = aligned_forms(op, shapes[n].len());
        let (form_in, form_out) =
            form_tilings(&forms, &cost.forms, &shapes).expect("chosen form is feasible");
        let form_name = cost
            .forms
            .iter()
            .map(|&f| forms[f].name.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let mut operands: Vec<Vec<usize>> = Vec::with_capacity(n);
        for s in 0..n {
            let src_nodes = current
                .get(&op.inputs[s])
                .ok_or_else(|| Error::MissingTensor(op.inputs[s].clone()))?
                .clone();
            operands.push(b.convert(
                &op.inputs[s],
                shapes[s],
                specs[s].dtype_bytes as u64,
                &SourceTiling::from(assigned[s]),
                &src_nodes,
                &form_in[s],
                2 * oi,
            ));
        }
        let out_dims = form_out.dims();
        let sub_ops: Vec<usize> = (0..n_dev)
            .map(|dev| {
                let coord = device_bits(dev, k);
                let block = to_span(&block_of(shapes[n], &out_dims, &coord));
                b.push(
                    dev,
                    NodeKind::SubOp {
                        op: op.id.clone(),
                        coord,
                        form: form_name.clone(),
                        block,
                    },
                    operands.iter().map(|o| o[dev]).collect(),
                )
            })
            .collect();
        let converted = b.convert(
            &op.output,
            shapes[n],
            specs[n].dtype_bytes as u64,
            &form_out,
            &sub_ops,
            assigned[n],
            2 * oi + 1,
        );
        let nodes = buffers(&mut b, &op.output, shapes[n], assigned[n], Some(&converted));
        current.insert(op.output.clone(), nodes);
    }
    Ok(ExecutionGraph { k, nodes: b.nodes })
}
