//! Deterministic inputs for the benchmarks.

use gmpool::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Symmetric `n × n` matrix with entries in `[0, 1]`.
pub fn symmetric_matrix(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * n).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![n, n], data)
        .and_then(|t| t.symmetrized())
        .expect("square matrix")
}

/// Ring of `n` nodes with random chords, `d_n` node and `d_e` edge features.
pub fn ring_graph(n: usize, d_n: usize, d_e: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feature =
        |d: usize| -> Vec<f64> { (0..d).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let nodes: Vec<Vec<f64>> = (0..n).map(|_| feature(d_n)).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        if n > 1 && (i + 1 < n || n > 2) {
            edges.push((i, (i + 1) % n, feature(d_e)));
        }
        if n > 4 && i % 3 == 0 {
            edges.push((i, (i + n / 2) % n, feature(d_e)));
        }
    }
    edges.iter_mut().for_each(|e| {
        if e.0 > e.1 {
            std::mem::swap(&mut e.0, &mut e.1);
        }
    });
    edges.sort_by_key(|e| (e.0, e.1));
    edges.dedup_by_key(|e| (e.0, e.1));
    Graph::new(&nodes, &edges, d_e, Some(1.0)).expect("valid ring graph")
}
