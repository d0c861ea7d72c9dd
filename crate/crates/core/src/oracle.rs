//! Brute-force references: element-by-element conversion counting,
//! exhaustive tiling search, and single-device dense execution.

use std::collections::BTreeMap;

use crate::cost::{SourceCut, SourceTiling};
use crate::dense::{apply_op, seeded_inputs, FunctionBinding, Tensor};
use crate::error::{Error, Result};
use crate::graph::DataflowGraph;
use crate::kcuts::construct_tile_graph;
use crate::onecut::{advance_mixed, build_tables, candidate_cuts};
use crate::tiling::{Tiling, TilingAssignment};

pub const ELEMENT_GUARD: usize = 1_000_000;
pub const SEARCH_GUARD: u128 = 10_000_000;

/// Branch bit each cut requires of a device holding element `idx`, or `None`
/// for cuts that do not partition.
fn required_bits(idx: &[usize], shape: &[usize], dims: &[Option<usize>]) -> Vec<Option<u8>> {
    let mut out = vec![None; dims.len()];
    for d in 0..shape.len() {
        let cuts: Vec<usize> = (0..dims.len()).filter(|&i| dims[i] == Some(d)).collect();
        let m = cuts.len();
        if m == 0 {
            continue;
        }
        let q = idx[d] / (shape[d] >> m);
        for (j, &i) in cuts.iter().enumerate() {
            out[i] = Some(((q >> (m - 1 - j)) & 1) as u8);
        }
    }
    out
}

fn matches(bits: &[u8], req: &[Option<u8>]) -> bool {
    bits.iter().zip(req).all(|(b, r)| r.is_none_or(|r| r == *b))
}

/// Counts, over every device and element, the values a device needs under
/// `dst` but does not hold under `src`. Under reduction cuts a needed value
/// is assembled from one partial per combination of the reducing cuts' bits;
/// each partial the device does not hold itself is one transfer.
pub fn element_conversion_cost(
    src: &SourceTiling,
    dst: &Tiling,
    shape: &[usize],
    k: usize,
) -> Result<u64> {
    let size: usize = shape.iter().product();
    if size > ELEMENT_GUARD {
        return Err(Error::SizeGuard {
            size,
            limit: ELEMENT_GUARD,
        });
    }
    for got in [src.len(), dst.len()] {
        if got != k {
            return Err(Error::CutCountMismatch { expected: k, got });
        }
    }
    let src_dims = src.dims();
    let dst_dims: Vec<Option<usize>> = dst.cuts().iter().map(|c| c.dim()).collect();
    crate::tiling::check_divisible(shape, src_dims.iter().copied())?;
    crate::tiling::check_divisible(shape, dst_dims.iter().copied())?;
    let reducing: Vec<usize> = (0..k).filter(|&i| src.0[i] == SourceCut::Reduce).collect();

    let mut total = 0u64;
    let mut idx = vec![0usize; shape.len()];
    loop {
        let need = required_bits(&idx, shape, &dst_dims);
        let hold = required_bits(&idx, shape, &src_dims);
        for dev in 0..1usize << k {
            let bits: Vec<u8> = (0..k).map(|i| ((dev >> (k - 1 - i)) & 1) as u8).collect();
            if !matches(&bits, &need) {
                continue;
            }
            for combo in 0..1usize << reducing.len() {
                let mine = reducing
                    .iter()
                    .enumerate()
                    .all(|(j, &i)| bits[i] as usize == (combo >> j) & 1);
                if !(mine && matches(&bits, &hold)) {
                    total += 1;
                }
            }
        }
        if !advance_mixed(&mut idx, shape) {
            break;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BruteForce {
    pub cost: u64,
    pub witness: TilingAssignment,
}

/// Exact minimum over every ordered `k`-cut assignment, where cut `i` is
/// costed on the tile graph of cuts `0..i` and weighted by `2^i`. For `k = 1`
/// this is the plain one-cut objective. Refuses searches above
/// [`SEARCH_GUARD`] assignments.
pub fn brute_force_tiling(g: &DataflowGraph, k: usize) -> Result<BruteForce> {
    let cands = candidate_cuts(g);
    let per_cut: u128 = cands
        .iter()
        .fold(1u128, |acc, c| acc.saturating_mul(c.len() as u128));
    let size = (0..k).fold(1u128, |acc, _| acc.saturating_mul(per_cut));
    if size > SEARCH_GUARD {
        return Err(Error::SearchSpaceExceeded {
            size,
            limit: SEARCH_GUARD,
        });
    }
    search(g, k)?.ok_or_else(|| {
        Error::NoFeasibleTiling(g.tensors().first().map(|t| t.id.clone()).unwrap_or_default())
    })
}

fn search(g: &DataflowGraph, k: usize) -> Result<Option<BruteForce>> {
    if k == 0 {
        return Ok(Some(BruteForce {
            cost: 0,
            witness: TilingAssignment::trivial(g),
        }));
    }
    let cands = candidate_cuts(g);
    let tables = build_tables(g, &cands)?;
    let radix: Vec<usize> = cands.iter().map(Vec::len).collect();
    let mut digits = vec![0usize; radix.len()];
    let mut choice = vec![0u8; radix.len()];
    let mut best: Option<BruteForce> = None;
    loop {
        for (c, &d) in choice.iter_mut().zip(&digits) {
            *c = d as u8;
        }
        let outer = tables
            .iter()
            .try_fold(0u64, |acc, t| t.lookup(&choice).map(|c| acc + c));
        if let Some(outer) = outer {
            let cut = TilingAssignment::new(
                1,
                g.tensors()
                    .iter()
                    .zip(&digits)
                    .zip(&cands)
                    .map(|((t, &d), c)| (t.id.clone(), Tiling::new(vec![c[d]])))
                    .collect::<BTreeMap<_, _>>(),
            )?;
            let bound = best.as_ref().map_or(u64::MAX, |b| b.cost);
            // The inner term is non-negative, so an outer cost at or above
            // the incumbent cannot win.
            if outer < bound {
                let inner = if k == 1 {
                    Some(BruteForce {
                        cost: 0,
                        witness: TilingAssignment::trivial(g),
                    })
                } else {
                    search(&construct_tile_graph(g, &cut)?, k - 1)?
                };
                if let Some(inner) = inner {
                    let cost = outer + 2 * inner.cost;
                    if cost < bound {
                        best = Some(BruteForce {
                            cost,
                            witness: cut.compose(&inner.witness)?,
                        });
                    }
                }
            }
        }
        if !advance_mixed(&mut digits, &radix) {
            break;
        }
    }
    Ok(best)
}

/// Runs the whole graph on one device in operator order and returns every
/// tensor by id.
pub fn serial_execute_with(
    g: &DataflowGraph,
    inputs: &BTreeMap<String, Tensor>,
    fns: &FunctionBinding,
) -> Result<BTreeMap<String, Tensor>> {
    let mut vals = BTreeMap::new();
    for t in g.graph_inputs() {
        let v = inputs
            .get(&t.id)
            .ok_or_else(|| Error::MissingTensor(t.id.clone()))?;
        if v.shape() != t.shape.as_slice() {
            return Err(Error::Execution(format!(
                "input `{}` has shape {:?}, expected {:?}",
                t.id,
                v.shape(),
                t.shape
            )));
        }
        vals.insert(t.id.clone(), v.clone());
    }
    for op in g.ops() {
        let args: Vec<&Tensor> = op.inputs.iter().map(|id| &vals[id]).collect();
        let out = apply_op(op, &args, fns)?;
        vals.insert(op.output.clone(), out);
    }
    Ok(vals)
}

/// [`serial_execute_with`] on seeded inputs and the `tanh` binding.
pub fn serial_execute(g: &DataflowGraph, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    serial_execute_with(g, &seeded_inputs(g, seed), &FunctionBinding::tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{conversion_cost, graph_cost};
    use crate::graph::{gen_mlp, MlpConfig};
    use crate::kcuts::{hierarchical_cost, kcuts};
    use crate::onecut::onecut;

    fn t(s: &str) -> Tiling {
        s.parse().unwrap()
    }

    #[test]
    fn ownership_examples() {
        let r = |s: &str| SourceTiling::from(&t(s));
        assert_eq!(element_conversion_cost(&r("R"), &t("C"), &[4, 4], 1).unwrap(), 8);
        for dst in ["R", "C", "r"] {
            assert_eq!(element_conversion_cost(&r("r"), &t(dst), &[4, 6], 1).unwrap(), 0);
        }
        let red = SourceTiling::reduction(1);
        assert_eq!(element_conversion_cost(&red, &t("r"), &[4, 4], 1).unwrap(), 32);
        assert_eq!(element_conversion_cost(&red, &t("R"), &[4, 4], 1).unwrap(), 16);
        assert!(matches!(
            element_conversion_cost(&r("r"), &t("r"), &[2000, 1000], 1),
            Err(Error::SizeGuard { .. })
        ));
    }

    #[test]
    fn ownership_agrees_with_model_on_mixed_sources() {
        let src = SourceTiling(vec![SourceCut::Partition(1), SourceCut::Reduce]);
        for dst in ["R C", "r r", "C R", "R r"] {
            let shape = [4, 8];
            assert_eq!(
                element_conversion_cost(&src, &t(dst), &shape, 2).unwrap(),
                conversion_cost(&src, &t(dst), &shape, 2).unwrap(),
                "{dst}"
            );
        }
    }

    #[test]
    fn brute_force_matches_onecut() {
        let g = gen_mlp(&MlpConfig::new(8, vec![4, 4]).backward()).unwrap();
        let bf = brute_force_tiling(&g, 1).unwrap();
        assert_eq!(bf.cost, onecut(&g).unwrap().delta);
        assert_eq!(graph_cost(&g, &bf.witness).unwrap().total_elements, bf.cost);
    }

    #[test]
    fn brute_force_two_cuts_witness_is_consistent() {
        let g = gen_mlp(&MlpConfig::new(8, vec![4, 4])).unwrap();
        let bf = brute_force_tiling(&g, 2).unwrap();
        assert_eq!(hierarchical_cost(&g, &bf.witness).unwrap().total_elements, bf.cost);
        assert!(bf.cost <= kcuts(&g, 2).unwrap().total);
    }

    #[test]
    fn identity_network_passes_input_through() {
        let g = gen_mlp(&MlpConfig::new(3, vec![4, 4, 4])).unwrap();
        let mut inputs = seeded_inputs(&g, 5);
        for w in ["W1", "W2"] {
            inputs.insert(w.into(), ndarray::Array2::<f64>::eye(4).into_dyn());
        }
        let out = serial_execute_with(&g, &inputs, &FunctionBinding::identity()).unwrap();
        assert_eq!(out["x2"], inputs["x0"]);
    }

    #[test]
    fn zero_step_keeps_weights() {
        let mut cfg = MlpConfig::new(2, vec![3, 3]).backward().update();
        cfg.learning_rate = 0.0;
        let g = gen_mlp(&cfg).unwrap();
        let out = serial_execute(&g, 9).unwrap();
        assert_eq!(out["W1_new"], out["W1"]);
    }

    #[test]
    fn hand_traced_step() {
        // x0 = [[1, 0]], W = I, y = 0, identity f: x1 = [[1, 0]] = dx1,
        // dW = x0^T dx1 = e11, W_new = I - 0.1 e11.
        let g = gen_mlp(&MlpConfig::new(1, vec![2, 2]).backward().update()).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("x0".to_string(), ndarray::arr2(&[[1.0, 0.0]]).into_dyn());
        inputs.insert("y".to_string(), ndarray::arr2(&[[0.0, 0.0]]).into_dyn());
        inputs.insert("W1".to_string(), ndarray::Array2::<f64>::eye(2).into_dyn());
        let out = serial_execute_with(&g, &inputs, &FunctionBinding::identity()).unwrap();
        let want = ndarray::arr2(&[[0.9, 0.0], [0.0, 1.0]]);
        assert_eq!(out["W1_new"], want.into_dyn());
    }

    #[test]
    fn guard_refuses_large_searches() {
        let g = gen_mlp(&MlpConfig::new(8, vec![4, 4, 4, 4, 4]).backward().update()).unwrap();
        assert!(matches!(
            brute_force_tiling(&g, 1),
            Err(Error::SearchSpaceExceeded { .. })
        ));
    }
}
