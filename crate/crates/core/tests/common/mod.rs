//! Graph corpora shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tileplan::graph::{gen_cnn, gen_mlp, CnnConfig, DataflowGraph, MlpConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn extent(rng: &mut ChaCha8Rng) -> usize {
    *[2, 4, 8].choose(rng).unwrap()
}

/// A chain `h_i = h_{i-1} . W_i` of `n` matmuls with random extents in
/// {2, 4, 8} and random operand transposition.
pub fn matmul_chain(rng: &mut ChaCha8Rng, n: usize) -> DataflowGraph {
    let b = extent(rng);
    let dims: Vec<usize> = (0..=n).map(|_| extent(rng)).collect();
    let mut tensors = Vec::new();
    let mut ops = Vec::new();
    let ta0: bool = rng.gen();
    let x0 = if ta0 { [dims[0], b] } else { [b, dims[0]] };
    tensors.push(format!(r#"{{"id":"h0","shape":{:?},"role":"input"}}"#, x0));
    for i in 1..=n {
        let tb: bool = rng.gen();
        let w = if tb { [dims[i], dims[i - 1]] } else { [dims[i - 1], dims[i]] };
        tensors.push(format!(r#"{{"id":"W{i}","shape":{w:?},"role":"weight"}}"#));
        tensors.push(format!(
            r#"{{"id":"h{i}","shape":[{b},{}],"role":"activation"}}"#,
            dims[i]
        ));
        let ta = i == 1 && ta0;
        ops.push(format!(
            r#"{{"id":"mm{i}","kind":"matmul","inputs":["h{}","W{i}"],"output":"h{i}","attrs":{{"transpose_a":{ta},"transpose_b":{tb}}}}}"#,
            i - 1
        ));
    }
    let doc = format!(
        r#"{{"tensors":[{}],"ops":[{}]}}"#,
        tensors.join(","),
        ops.join(",")
    );
    DataflowGraph::from_document(&doc).expect("chain graph")
}

/// Small training graphs for the one-cut corpus: forward MLPs of up to four
/// layers, one-layer backward graphs, and bare matmul chains of up to five
/// matmuls.
pub fn small_graph(rng: &mut ChaCha8Rng) -> DataflowGraph {
    match rng.gen_range(0..3) {
        0 => {
            let layers = rng.gen_range(1..=4);
            let dims = (0..=layers).map(|_| extent(rng)).collect();
            gen_mlp(&MlpConfig::new(extent(rng), dims)).unwrap()
        }
        1 => {
            let mut cfg = MlpConfig::new(extent(rng), vec![extent(rng), extent(rng)]).backward();
            if rng.gen() {
                cfg = cfg.update();
            }
            gen_mlp(&cfg).unwrap()
        }
        _ => {
            let n = rng.gen_range(1..=5);
            matmul_chain(rng, n)
        }
    }
}

/// Named generated graphs: MLPs of depth 1 to 4 and two CNN chains, all with
/// backward and update, small enough for dense execution and divisible for presets up to k = 3.
pub fn corpus() -> Vec<(String, DataflowGraph)> {
    let mut out = Vec::new();
    for depth in 1..=4 {
        let dims = [8, 16, 8, 16, 8][..=depth].to_vec();
        out.push((
            format!("mlp{depth}"),
            gen_mlp(&MlpConfig::new(8, dims).backward().update()).unwrap(),
        ));
    }
    out.push((
        "cnn1".into(),
        gen_cnn(&CnnConfig::new(8, (5, 5), vec![4, 8], (2, 2)).backward().update()).unwrap(),
    ));
    out.push((
        "cnn2".into(),
        gen_cnn(&CnnConfig::new(8, (6, 6), vec![4, 4, 8], (3, 3)).backward().update()).unwrap(),
    ));
    out
}
