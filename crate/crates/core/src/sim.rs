//! Simulated cluster: per-link traffic accounting with a bottleneck-link time
//! estimate, and dense numeric execution of a plan device by device.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dense::{apply_op, compare, seeded_inputs, sub_block, FunctionBinding, Tensor};
use crate::error::{Error, Result};
use crate::exec::{ExecutionGraph, NodeKind, Span};
use crate::graph::{DataflowGraph, Role};
use crate::oracle::serial_execute_with;
use crate::placement::DeviceHierarchy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTraffic {
    pub label: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceTraffic {
    pub device: usize,
    pub sent: u64,
    pub received: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTraffic {
    pub phase: usize,
    /// Bytes per hierarchy level, root first.
    pub level_bytes: Vec<u64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericCheck {
    pub max_abs: f64,
    pub max_rel: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub per_level: Vec<LevelTraffic>,
    pub per_device: Vec<DeviceTraffic>,
    pub phases: Vec<PhaseTraffic>,
    pub total_bytes: u64,
    pub est_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub numeric: Option<NumericCheck>,
}

impl SimReport {
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize") + "\n"
    }
}

/// Attributes every fetch to the level of its endpoints' nearest common
/// ancestor. Time is the sum over phases of the slowest level in that phase.
pub fn simulate_traffic(eg: &ExecutionGraph, h: &DeviceHierarchy) -> Result<SimReport> {
    if eg.devices() > h.devices() {
        return Err(Error::UnknownDevice(eg.devices() - 1));
    }
    let depth = h.depth();
    let mut per_level = vec![0u64; depth];
    let mut per_device = vec![(0u64, 0u64); h.devices()];
    let mut phases: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for n in &eg.nodes {
        if let NodeKind::Fetch {
            src_device,
            bytes,
            phase,
        } = n.kind
        {
            let Some(level) = h.nca_level(src_device, n.device)? else {
                continue;
            };
            per_level[level] += bytes;
            per_device[src_device].0 += bytes;
            per_device[n.device].1 += bytes;
            phases.entry(phase).or_insert_with(|| vec![0; depth])[level] += bytes;
        }
    }
    let bw: Vec<f64> = h.levels().iter().map(|l| l.bandwidth_bytes_per_s).collect();
    let phases: Vec<PhaseTraffic> = phases
        .into_iter()
        .map(|(phase, level_bytes)| {
            let seconds = level_bytes
                .iter()
                .zip(&bw)
                .map(|(&b, &w)| b as f64 / w)
                .fold(0.0, f64::max);
            PhaseTraffic {
                phase,
                level_bytes,
                seconds,
            }
        })
        .collect();
    Ok(SimReport {
        per_level: h
            .levels()
            .iter()
            .zip(&per_level)
            .map(|(l, &bytes)| LevelTraffic {
                label: l.label.clone(),
                bytes,
            })
            .collect(),
        per_device: per_device
            .into_iter()
            .enumerate()
            .map(|(device, (sent, received))| DeviceTraffic {
                device,
                sent,
                received,
            })
            .collect(),
        total_bytes: per_level.iter().sum(),
        est_seconds: phases.iter().map(|p| p.seconds).sum(),
        phases,
        numeric: None,
    })
}

fn extents(s: &Span) -> Vec<usize> {
    s.iter().map(|&(a, b)| b - a).collect()
}

fn relative(outer: &Span, inner: &Span) -> Span {
    outer
        .iter()
        .zip(inner)
        .map(|(&(o, _), &(a, b))| (a - o, b - o))
        .collect()
}

fn plan_bug(id: usize, detail: String) -> Error {
    Error::Execution(format!("node {id}: {detail}"))
}

/// Executes `eg` node by node (ids are a topological order) on seeded
/// inputs and compares every non-temp tile with the serial reference.
pub fn execute_numeric(g: &DataflowGraph, eg: &ExecutionGraph, seed: u64) -> Result<NumericCheck> {
    execute_numeric_with(g, eg, seed, &FunctionBinding::tanh())
}

pub fn execute_numeric_with(
    g: &DataflowGraph,
    eg: &ExecutionGraph,
    seed: u64,
    fns: &FunctionBinding,
) -> Result<NumericCheck> {
    eg.check()?;
    let inputs = seeded_inputs(g, seed);
    let reference = serial_execute_with(g, &inputs, fns)?;
    let ops: BTreeMap<&str, _> = g.ops().iter().map(|o| (o.id.as_str(), o)).collect();
    // Each node's value and the absolute block it covers.
    let mut vals: Vec<(Span, Tensor)> = Vec::with_capacity(eg.nodes.len());
    let mut worst_abs = 0.0f64;
    let mut worst_rel = 0.0f64;
    for n in &eg.nodes {
        let arg = |i: usize| &vals[n.inputs[i]];
        let v = match &n.kind {
            NodeKind::Buffer { tensor, block, .. } => {
                let t = if n.inputs.is_empty() {
                    let full = inputs
                        .get(tensor)
                        .ok_or_else(|| Error::MissingTensor(tensor.clone()))?;
                    sub_block(full, block)
                } else {
                    let (s, t) = arg(0);
                    if s != block {
                        return Err(plan_bug(n.id, format!("buffer of `{tensor}` got block {s:?}, wants {block:?}")));
                    }
                    t.clone()
                };
                let role = g
                    .tensor(tensor)
                    .ok_or_else(|| Error::MissingTensor(tensor.clone()))?
                    .role;
                if role != Role::Temp {
                    let want = sub_block(&reference[tensor], block);
                    let (abs, _) = compare(&t, &want);
                    let scale = reference[tensor].iter().map(|v| v.abs()).fold(0.0, f64::max);
                    worst_abs = worst_abs.max(abs);
                    worst_rel = worst_rel.max(if scale > 0.0 { abs / scale } else { abs });
                }
                (block.clone(), t)
            }
            NodeKind::Slice { block, .. } => {
                let (s, t) = arg(0);
                (block.clone(), sub_block(t, &relative(s, block)))
            }
            NodeKind::Fetch { .. } => arg(0).clone(),
            NodeKind::Concat { block, .. } => {
                let mut out = Tensor::zeros(extents(block));
                let mut covered = 0usize;
                for i in 0..n.inputs.len() {
                    let (s, t) = arg(i);
                    let mut view = out.view_mut();
                    for (ax, &(lo, hi)) in relative(block, s).iter().enumerate() {
                        view.slice_axis_inplace(ndarray::Axis(ax), (lo..hi).into());
                    }
                    view.assign(t);
                    covered += t.len();
                }
                if covered != out.len() {
                    return Err(plan_bug(n.id, format!("pieces cover {covered} of {} elements", out.len())));
                }
                (block.clone(), out)
            }
            NodeKind::ReducePartial { block, .. } => {
                let mut out = Tensor::zeros(extents(block));
                for i in 0..n.inputs.len() {
                    out += &arg(i).1;
                }
                (block.clone(), out)
            }
            NodeKind::SubOp { op, block, .. } => {
                let node = ops
                    .get(op.as_str())
                    .ok_or_else(|| plan_bug(n.id, format!("unknown op `{op}`")))?;
                let args: Vec<&Tensor> = (0..n.inputs.len()).map(|i| &arg(i).1).collect();
                let t = apply_op(node, &args, fns)?;
                if t.shape() != extents(block).as_slice() {
                    return Err(plan_bug(
                        n.id,
                        format!("`{op}` produced {:?} for block {block:?}", t.shape()),
                    ));
                }
                (block.clone(), t)
            }
        };
        vals.push(v);
    }
    Ok(NumericCheck {
        max_abs: worst_abs,
        max_rel: worst_rel,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{build_execution_graph, ExecNode};
    use crate::graph::{gen_mlp, MlpConfig};
    use crate::placement::{place_cuts, HierarchyLevel};
    use crate::tiling::{preset_assignment, Preset, TilingAssignment};

    fn fetch(id: usize, device: usize, src_device: usize, bytes: u64, phase: usize) -> ExecNode {
        ExecNode {
            id,
            device,
            kind: NodeKind::Fetch {
                src_device,
                bytes,
                phase,
            },
            inputs: vec![],
        }
    }

    #[test]
    fn single_root_fetch_time() {
        let h = DeviceHierarchy::new(vec![HierarchyLevel::new("root", 16.0)]).unwrap();
        let eg = ExecutionGraph {
            k: 1,
            nodes: vec![fetch(0, 1, 0, 64, 0)],
        };
        let r = simulate_traffic(&eg, &h).unwrap();
        assert_eq!(r.est_seconds, 4.0);
        assert_eq!(r.per_level[0].bytes, 64);
        assert_eq!((r.per_device[0].sent, r.per_device[1].received), (64, 64));
    }

    #[test]
    fn phases_take_the_slowest_level() {
        let h = DeviceHierarchy::new(vec![
            HierarchyLevel::new("root", 1.0),
            HierarchyLevel::new("leaf", 10.0),
        ])
        .unwrap();
        let eg = ExecutionGraph {
            k: 2,
            nodes: vec![
                fetch(0, 0, 2, 3, 0),
                fetch(1, 0, 1, 50, 0),
                fetch(2, 3, 2, 20, 1),
            ],
        };
        let r = simulate_traffic(&eg, &h).unwrap();
        assert_eq!(r.est_seconds, 5.0 + 2.0);
        assert_eq!(r.total_bytes, 73);
        let small = DeviceHierarchy::uniform(1, 1.0).unwrap();
        assert!(matches!(simulate_traffic(&eg, &small), Err(Error::UnknownDevice(_))));
    }

    #[test]
    fn trivial_plan_is_exact_and_silent() {
        let g = gen_mlp(&MlpConfig::new(4, vec![3, 5, 2]).backward().update()).unwrap();
        let a = TilingAssignment::trivial(&g);
        let eg = build_execution_graph(&g, &a, &place_cuts(0, &DeviceHierarchy::uniform(0, 1.0).unwrap()).unwrap()).unwrap();
        let r = simulate_traffic(&eg, &DeviceHierarchy::uniform(0, 1.0).unwrap()).unwrap();
        assert_eq!((r.total_bytes, r.est_seconds), (0, 0.0));
        let n = execute_numeric(&g, &eg, 1).unwrap();
        assert_eq!((n.max_abs, n.max_rel), (0.0, 0.0));
    }

    #[test]
    fn presets_match_serial_execution() {
        let g = gen_mlp(&MlpConfig::new(8, vec![4, 4]).backward().update()).unwrap();
        for preset in [Preset::Data, Preset::Model, Preset::Hybrid] {
            for k in 1..=2 {
                if preset == Preset::Hybrid && k < 2 {
                    continue;
                }
                let a = preset_assignment(&g, preset, k).unwrap();
                let h = DeviceHierarchy::uniform(k, 1e9).unwrap();
                let eg = build_execution_graph(&g, &a, &place_cuts(k, &h).unwrap()).unwrap();
                let n = execute_numeric(&g, &eg, 42).unwrap();
                assert!(n.max_rel <= 1e-12, "{preset} k={k}: {n:?}");
                let r = simulate_traffic(&eg, &h).unwrap();
                assert_eq!(r.total_bytes, eg.total_fetch_bytes());
            }
        }
    }
}
