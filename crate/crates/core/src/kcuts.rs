//! Recursive k-cuts planning: cut once, shrink every tensor to its tile,
//! and plan the tile graph with one cut fewer. The total charges the outer
//! cut once and each inner plan once per half.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cost::graph_cost;
use crate::error::Result;
use crate::graph::{DataflowGraph, TensorSpec};
use crate::onecut::onecut;
use crate::tiling::{tile_shape, AssignmentDocument, Tiling, TilingAssignment};

/// The graph one tile group executes after `p`: same ops, every tensor
/// shrunk to its tile shape under `p`.
pub fn construct_tile_graph(g: &DataflowGraph, p: &TilingAssignment) -> Result<DataflowGraph> {
    let tensors = g
        .tensors()
        .iter()
        .map(|t| {
            Ok(TensorSpec {
                shape: tile_shape(&t.shape, p.get(&t.id)?)?,
                ..t.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DataflowGraph::new_unchecked(tensors, g.ops().to_vec()))
}

/// Per-cut costs of an assignment evaluated cut by cut: cut `i` is costed
/// as a one-cut plan on the tile graph left by cuts `0..i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchicalCost {
    /// Elements per cut, outermost first.
    pub per_cut: Vec<u64>,
    pub per_cut_bytes: Vec<u64>,
    pub total_elements: u64,
    pub total_bytes: u64,
}

/// `Σ 2^i c_i` over per-cut costs listed outermost first.
pub fn recompose(per_cut: &[u64]) -> u64 {
    per_cut.iter().enumerate().map(|(i, c)| c << i).sum()
}

pub fn hierarchical_cost(g: &DataflowGraph, a: &TilingAssignment) -> Result<HierarchicalCost> {
    a.check_covers(g)?;
    let mut per_cut = Vec::with_capacity(a.k());
    let mut per_cut_bytes = Vec::with_capacity(a.k());
    let mut tile = g.clone();
    for i in 0..a.k() {
        let cut = a.cut(i);
        let r = graph_cost(&tile, &cut)?;
        per_cut.push(r.total_elements);
        per_cut_bytes.push(r.total_bytes);
        tile = construct_tile_graph(&tile, &cut)?;
    }
    Ok(HierarchicalCost {
        total_elements: recompose(&per_cut),
        total_bytes: recompose(&per_cut_bytes),
        per_cut,
        per_cut_bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KCutResult {
    pub k: usize,
    pub assignment: TilingAssignment,
    /// `δ_k .. δ_1`: elements moved by each cut, outermost first.
    pub per_cut_costs: Vec<u64>,
    pub per_cut_bytes: Vec<u64>,
    pub total: u64,
    pub total_bytes: u64,
}

impl KCutResult {
    pub fn to_document(&self) -> String {
        AssignmentDocument {
            per_cut_costs: Some(self.per_cut_costs.clone()),
            total_elements: Some(self.total),
            total_bytes: Some(self.total_bytes),
            ..AssignmentDocument::new(&self.assignment)
        }
        .render()
    }
}

/// Plans `2^k` devices by `k` successive one-cut optimizations.
pub fn kcuts(g: &DataflowGraph, k: usize) -> Result<KCutResult> {
    let mut tile = g.clone();
    let mut cuts: BTreeMap<String, Vec<_>> = g
        .tensors()
        .iter()
        .map(|t| (t.id.clone(), Vec::with_capacity(k)))
        .collect();
    let mut per_cut_costs = Vec::with_capacity(k);
    let mut per_cut_bytes = Vec::with_capacity(k);
    for _ in 0..k {
        let one = onecut(&tile)?;
        let bytes = graph_cost(&tile, &one.assignment)?.total_bytes;
        per_cut_costs.push(one.delta);
        per_cut_bytes.push(bytes);
        for (id, t) in one.assignment.iter() {
            cuts.get_mut(id).expect("same tensors").push(t.cuts()[0]);
        }
        tile = construct_tile_graph(&tile, &one.assignment)?;
    }
    let assignment = TilingAssignment::new(
        k,
        cuts.into_iter().map(|(id, c)| (id, Tiling::new(c))).collect(),
    )?;
    Ok(KCutResult {
        k,
        assignment,
        total: recompose(&per_cut_costs),
        total_bytes: recompose(&per_cut_bytes),
        per_cut_costs,
        per_cut_bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TheoremViolation {
    #[error("total {got} differs from the recomposed per-cut costs {expected}")]
    Total { expected: u64, got: u64 },
    #[error("greediness fails at i={i}: delta_i = {outer} > 2 * delta_(i-1) = {}", 2 * inner)]
    Greediness { i: usize, outer: u64, inner: u64 },
}

/// Checks the total-cost identity and that no cut costs more than twice the
/// next inner one (`δ_i ≤ 2 δ_{i-1}`).
pub fn verify_theorems(r: &KCutResult) -> std::result::Result<(), TheoremViolation> {
    let expected = recompose(&r.per_cut_costs);
    if expected != r.total {
        return Err(TheoremViolation::Total {
            expected,
            got: r.total,
        });
    }
    let k = r.per_cut_costs.len();
    for i in 2..=k {
        let outer = r.per_cut_costs[k - i];
        let inner = r.per_cut_costs[k - i + 1];
        if outer > 2 * inner {
            return Err(TheoremViolation::Greediness { i, outer, inner });
        }
    }
    Ok(())
}
