//! One-cut optimizer: level the graph by breadth-first search, then run a
//! dynamic program over levels whose state is the tiling of every tensor
//! live across the level boundary.

use std::collections::{BTreeMap, VecDeque};

use crate::cost::{op_cost_with, Operands};
use crate::error::{Error, Result};
use crate::graph::DataflowGraph;
use crate::tiling::{check_divisible, Cut, Tiling, TilingAssignment};

/// One-cut candidates per tensor (indexed like `g.tensors()`), in tie-break
/// order `P0 < P1 < ... < r`. A dimension is a candidate when every op
/// touching the tensor may partition it and its extent is even.
pub fn candidate_cuts(g: &DataflowGraph) -> Vec<Vec<Cut>> {
    let mut allowed: Vec<Vec<bool>> = g.tensors().iter().map(|t| vec![true; t.rank()]).collect();
    for op in g.ops() {
        for (slot, id) in op.inputs.iter().chain(std::iter::once(&op.output)).enumerate() {
            let i = g.tensor_index(id).expect("validated");
            let dims = op.partitionable_dims(slot, allowed[i].len());
            for (d, ok) in allowed[i].iter_mut().enumerate() {
                *ok &= dims.contains(&d);
            }
        }
    }
    g.tensors()
        .iter()
        .zip(allowed)
        .map(|(t, ok)| {
            (0..t.rank())
                .filter(|&d| ok[d] && check_divisible(&t.shape, std::iter::once(Some(d))).is_ok())
                .map(Cut::Partition)
                .chain(std::iter::once(Cut::Replicate))
                .collect()
        })
        .collect()
}

/// Cost of one op for every combination of its incident tensors' one-cut
/// candidates. `None` marks combinations with no feasible aligned form.
pub(crate) struct OpTable {
    /// Distinct incident tensors (graph tensor indices).
    pub tensors: Vec<usize>,
    radix: Vec<usize>,
    costs: Vec<Option<u64>>,
}

impl OpTable {
    pub fn build(g: &DataflowGraph, op_index: usize, cands: &[Vec<Cut>]) -> Result<Self> {
        let op = &g.ops()[op_index];
        let tensors: Vec<usize> = g
            .incident_tensors(op)
            .iter()
            .map(|id| g.tensor_index(id).expect("validated"))
            .collect();
        let slot_pos: Vec<usize> = op
            .inputs
            .iter()
            .chain(std::iter::once(&op.output))
            .map(|id| {
                let i = g.tensor_index(id).expect("validated");
                tensors.iter().position(|&t| t == i).expect("incident")
            })
            .collect();
        let radix: Vec<usize> = tensors.iter().map(|&t| cands[t].len()).collect();
        let operands = Operands::of(g, op);
        let mut costs = Vec::with_capacity(radix.iter().product());
        let mut digits = vec![0usize; tensors.len()];
        loop {
            let tilings: Vec<Tiling> = slot_pos
                .iter()
                .map(|&p| Tiling::new(vec![cands[tensors[p]][digits[p]]]))
                .collect();
            let refs: Vec<&Tiling> = tilings.iter().collect();
            costs.push(match op_cost_with(op, &operands, &refs, 1) {
                Ok(c) => Some(c.elements),
                Err(Error::NoAlignedForm(_)) => None,
                Err(e) => return Err(e),
            });
            if !advance_mixed(&mut digits, &radix) {
                break;
            }
        }
        Ok(Self {
            tensors,
            radix,
            costs,
        })
    }

    /// Cost given the candidate index of every graph tensor.
    pub fn lookup(&self, choice: &[u8]) -> Option<u64> {
        let mut idx = 0;
        for (&t, &r) in self.tensors.iter().zip(&self.radix) {
            idx = idx * r + choice[t] as usize;
        }
        self.costs[idx]
    }
}

/// Mixed-radix odometer, last digit fastest. Returns false after the final
/// combination.
pub(crate) fn advance_mixed(digits: &mut [usize], radix: &[usize]) -> bool {
    for (d, &r) in digits.iter_mut().zip(radix).rev() {
        *d += 1;
        if *d < r {
            return true;
        }
        *d = 0;
    }
    false
}

pub(crate) fn build_tables(g: &DataflowGraph, cands: &[Vec<Cut>]) -> Result<Vec<OpTable>> {
    (0..g.ops().len())
        .map(|i| OpTable::build(g, i, cands))
        .collect()
}

/// Ops grouped into BFS levels, with the tensors live across each level
/// boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPlan {
    /// Op ids per level, ascending op order within a level.
    pub levels: Vec<Vec<String>>,
    /// `frontiers[l]`: tensors touched both by ops in levels `0..=l` and by
    /// ops after level `l`, in tensor order.
    pub frontiers: Vec<Vec<String>>,
}

/// Levels as op indices plus per-tensor first/last level.
struct Leveling {
    levels: Vec<Vec<usize>>,
    span: Vec<Option<(usize, usize)>>,
}

fn level_ops(g: &DataflowGraph) -> Leveling {
    let n_ops = g.ops().len();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); g.tensors().len()];
    let incident: Vec<Vec<usize>> = g
        .ops()
        .iter()
        .enumerate()
        .map(|(o, op)| {
            let ts: Vec<usize> = g
                .incident_tensors(op)
                .iter()
                .map(|id| g.tensor_index(id).expect("validated"))
                .collect();
            for &t in &ts {
                users[t].push(o);
            }
            ts
        })
        .collect();
    let mut level_of = vec![usize::MAX; n_ops];
    let mut levels: Vec<Vec<usize>> = Vec::new();
    for seed in 0..n_ops {
        if level_of[seed] != usize::MAX {
            continue;
        }
        // Each component is levelled from its first op and appended.
        let base = levels.len();
        level_of[seed] = base;
        let mut queue = VecDeque::from([seed]);
        while let Some(o) = queue.pop_front() {
            let l = level_of[o];
            if levels.len() <= l {
                levels.resize(l + 1, Vec::new());
            }
            levels[l].push(o);
            for &t in &incident[o] {
                for &next in &users[t] {
                    if level_of[next] == usize::MAX {
                        level_of[next] = l + 1;
                        queue.push_back(next);
                    }
                }
            }
        }
    }
    for l in &mut levels {
        l.sort_unstable();
    }
    let mut span: Vec<Option<(usize, usize)>> = vec![None; g.tensors().len()];
    for (o, ts) in incident.iter().enumerate() {
        let l = level_of[o];
        for &t in ts {
            span[t] = Some(match span[t] {
                None => (l, l),
                Some((a, b)) => (a.min(l), b.max(l)),
            });
        }
    }
    Leveling { levels, span }
}

fn frontier_at(span: &[Option<(usize, usize)>], l: usize) -> Vec<usize> {
    span.iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Some((a, b)) if *a <= l && l < *b))
        .map(|(t, _)| t)
        .collect()
}

pub fn bfs_levels(g: &DataflowGraph) -> LevelPlan {
    let lv = level_ops(g);
    let name = |t: usize| g.tensors()[t].id.clone();
    LevelPlan {
        levels: lv
            .levels
            .iter()
            .map(|l| l.iter().map(|&o| g.ops()[o].id.clone()).collect())
            .collect(),
        frontiers: (0..lv.levels.len())
            .map(|l| frontier_at(&lv.span, l).into_iter().map(name).collect())
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DpStats {
    /// Distinct frontier states kept after each level.
    pub states_per_level: Vec<usize>,
    /// Transitions evaluated over the whole run.
    pub transitions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneCutResult {
    pub assignment: TilingAssignment,
    /// Minimum total communication, in elements.
    pub delta: u64,
    pub stats: DpStats,
}

/// Backpointer of one state: previous frontier key and the candidate
/// indices chosen for the tensors first seen at this level.
type Back = (Vec<u8>, Vec<u8>);

/// Exact minimum-communication one-cut assignment of `g`.
pub fn onecut(g: &DataflowGraph) -> Result<OneCutResult> {
    let cands = candidate_cuts(g);
    let tables = build_tables(g, &cands)?;
    let lv = level_ops(g);
    let n_levels = lv.levels.len();
    let mut stats = DpStats::default();

    let mut prev_frontier: Vec<usize> = Vec::new();
    let mut states: BTreeMap<Vec<u8>, u64> = BTreeMap::from([(Vec::new(), 0)]);
    let mut backs: Vec<BTreeMap<Vec<u8>, Back>> = Vec::with_capacity(n_levels);
    let mut news: Vec<Vec<usize>> = Vec::with_capacity(n_levels);
    let mut frontiers: Vec<Vec<usize>> = Vec::with_capacity(n_levels);
    let mut choice = vec![0u8; g.tensors().len()];

    for (l, ops) in lv.levels.iter().enumerate() {
        let new: Vec<usize> = frontier_new(&lv.span, l);
        let frontier = frontier_at(&lv.span, l);
        let radix: Vec<usize> = new.iter().map(|&t| cands[t].len()).collect();
        let mut next: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        let mut back: BTreeMap<Vec<u8>, Back> = BTreeMap::new();
        for (key, &base) in &states {
            for (&t, &c) in prev_frontier.iter().zip(key) {
                choice[t] = c;
            }
            let mut digits = vec![0usize; new.len()];
            loop {
                for (&t, &d) in new.iter().zip(&digits) {
                    choice[t] = d as u8;
                }
                stats.transitions += 1;
                let level_cost = ops
                    .iter()
                    .try_fold(0u64, |acc, &o| tables[o].lookup(&choice).map(|c| acc + c));
                if let Some(c) = level_cost {
                    let total = base + c;
                    let k: Vec<u8> = frontier.iter().map(|&t| choice[t]).collect();
                    if next.get(&k).is_none_or(|&best| total < best) {
                        next.insert(k.clone(), total);
                        back.insert(k, (key.clone(), digits.iter().map(|&d| d as u8).collect()));
                    }
                }
                if !advance_mixed(&mut digits, &radix) {
                    break;
                }
            }
        }
        if next.is_empty() {
            let culprit = ops
                .iter()
                .map(|&o| g.ops()[o].output.clone())
                .next()
                .unwrap_or_default();
            return Err(Error::NoFeasibleTiling(culprit));
        }
        stats.states_per_level.push(next.len());
        states = next;
        backs.push(back);
        news.push(new);
        frontiers.push(frontier.clone());
        prev_frontier = frontier;
    }

    let delta = states.get(&Vec::new()).copied().unwrap_or(0);
    // Walk the backpointers from the empty final frontier.
    let mut chosen: Vec<Option<u8>> = vec![None; g.tensors().len()];
    let mut key: Vec<u8> = Vec::new();
    for l in (0..n_levels).rev() {
        for (&t, &c) in frontiers[l].iter().zip(&key) {
            chosen[t] = Some(c);
        }
        let (prev, new_choice) = backs[l][&key].clone();
        for (&t, &c) in news[l].iter().zip(&new_choice) {
            chosen[t] = Some(c);
        }
        key = prev;
    }
    let tilings = g
        .tensors()
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            let c = chosen[t].unwrap_or(0) as usize;
            (spec.id.clone(), Tiling::new(vec![cands[t][c]]))
        })
        .collect();
    Ok(OneCutResult {
        assignment: TilingAssignment::new(1, tilings)?,
        delta,
        stats,
    })
}

/// Tensors whose first incident op sits in level `l`.
fn frontier_new(span: &[Option<(usize, usize)>], l: usize) -> Vec<usize> {
    span.iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Some((a, _)) if *a == l))
        .map(|(t, _)| t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::graph_cost;
    use crate::graph::{gen_mlp, parse_graph, MlpConfig};
    use crate::tiling::{preset_assignment, Preset};

    #[test]
    fn forward_chain_levels() {
        let g = gen_mlp(&MlpConfig::new(4, vec![4, 4, 4])).unwrap();
        let plan = bfs_levels(&g);
        assert_eq!(plan.levels, vec![vec!["fc1"], vec!["act1"], vec!["fc2"], vec!["act2"]]);
        assert_eq!(plan.frontiers.last().unwrap(), &Vec::<String>::new());
        assert_eq!(plan.frontiers[0], vec!["h1"]);
    }

    #[test]
    fn single_op_single_level() {
        let g = parse_graph(
            r#"{"tensors":[{"id":"X","shape":[4,6],"role":"input"},
                           {"id":"Y","shape":[6,4],"role":"weight"},
                           {"id":"Z","shape":[4,4],"role":"activation"}],
                "ops":[{"id":"mm","kind":"matmul","inputs":["X","Y"],"output":"Z"}]}"#,
        )
        .unwrap();
        assert_eq!(bfs_levels(&g).levels.len(), 1);
        let r = onecut(&g).unwrap();
        assert_eq!(r.delta, 0);
        assert_eq!(graph_cost(&g, &r.assignment).unwrap().total_elements, 0);
    }

    #[test]
    fn frontiers_match_incidence() {
        let g = gen_mlp(&MlpConfig::new(4, vec![4, 4, 4]).backward().update()).unwrap();
        let plan = bfs_levels(&g);
        let level = |op: &str| plan.levels.iter().position(|l| l.iter().any(|o| o == op)).unwrap();
        for t in g.tensors() {
            let touching: Vec<usize> = g
                .ops()
                .iter()
                .filter(|o| o.inputs.contains(&t.id) || o.output == t.id)
                .map(|o| level(&o.id))
                .collect();
            let (lo, hi) = (*touching.iter().min().unwrap(), *touching.iter().max().unwrap());
            for (l, f) in plan.frontiers.iter().enumerate() {
                assert_eq!(f.contains(&t.id), lo <= l && l < hi, "{} at level {l}", t.id);
            }
        }
        // The weight feeds the forward op and later the backward op and the
        // update, so it is carried past the forward level.
        assert!(level("dgrad1") > level("fc1"));
        assert!(plan.frontiers[level("fc1")].contains(&"W1".to_string()));
    }

    #[test]
    fn onecut_matches_its_own_cost_and_beats_presets() {
        let g = gen_mlp(&MlpConfig::new(8, vec![4, 4]).backward().update()).unwrap();
        let r = onecut(&g).unwrap();
        assert_eq!(graph_cost(&g, &r.assignment).unwrap().total_elements, r.delta);
        for p in [Preset::Data, Preset::Model] {
            let a = preset_assignment(&g, p, 1).unwrap();
            assert!(r.delta <= graph_cost(&g, &a).unwrap().total_elements);
        }
    }

    #[test]
    fn deterministic() {
        let g = gen_mlp(&MlpConfig::new(8, vec![4, 8, 4]).backward().update()).unwrap();
        assert_eq!(onecut(&g).unwrap(), onecut(&g).unwrap());
    }

    #[test]
    fn chain_state_count_is_flat_in_depth() {
        let peak = |layers: usize| {
            let g = gen_mlp(&MlpConfig::new(8, vec![8; layers + 1]).backward().update()).unwrap();
            *onecut(&g).unwrap().stats.states_per_level.iter().max().unwrap()
        };
        assert_eq!(peak(3), peak(6));
    }
}
