#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use gmpool::dmpnn::{encode, DmpnnConfig, DmpnnParams};
use gmpool::model::{Model, ModelConfig, Pooling, Readout};
use gmpool::pooling::effective_clusters;
use gmpool::{Task, Tensor};
use rand::Rng;

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..n {
        out.data_mut()[perm[i] * c..(perm[i] + 1) * c].copy_from_slice(x.row(i));
    }
    out
}

/// `out[p_i, p_j, :] = e[i, j, :]` for an `n × n × h` tensor.
fn permute_grid(e: &Tensor, perm: &[usize]) -> Tensor {
    let (n, h) = (e.shape()[0], e.shape()[2]);
    let mut out = Tensor::zeros(e.shape().to_vec());
    for i in 0..n {
        for j in 0..n {
            let src = (i * n + j) * h;
            let dst = (perm[i] * n + perm[j]) * h;
            out.data_mut()[dst..dst + h].copy_from_slice(&e.data()[src..src + h]);
        }
    }
    out
}

fn small_model(pooling: Pooling, seed: u64) -> Model {
    let config = ModelConfig {
        hidden: 8,
        steps_pre: 3,
        steps_post: 1,
        dropout: 0.0,
        pooling,
        ..ModelConfig::default()
    };
    Model::new(3, 2, Task::Regression, config, seed).unwrap()
}

#[test]
fn dmpnn_and_grouping_matrix_permute_exactly() {
    let mut r = rng(70);
    let cfg = DmpnnConfig {
        hidden: 6,
        steps: 3,
        dropout: 0.0,
    };
    let model = small_model(Pooling::Gmpool, 1);
    for _ in 0..100 {
        let n = r.random_range(1..=12);
        let g = random_graph(n, 3, 2, 0.4, &mut r);
        let perm = random_permutation(n, &mut r);
        let pg = g.permuted(&perm).unwrap();
        let params = DmpnnParams::init(3, 2, &cfg, &mut r);
        let (x, e) = encode(&g, &params, &cfg).unwrap();
        let (px, pe) = encode(&pg, &params, &cfg).unwrap();
        assert_eq!(px, permute_rows(&x, &perm));
        assert_eq!(pe, permute_grid(&e, &perm));

        let m = model.grouping_matrix(&g).unwrap();
        let pm = model.grouping_matrix(&pg).unwrap();
        assert_eq!(pm, m.permute_square(&perm));
        assert_eq!(m, m.transpose().unwrap());
        for thr in [0.25, 0.5, 1.0] {
            assert_eq!(
                effective_clusters(&m, thr).unwrap(),
                effective_clusters(&pm, thr).unwrap()
            );
        }
    }
}

#[test]
fn graph_predictions_are_permutation_invariant() {
    let mut r = rng(71);
    for (k, pooling) in [Pooling::Gmpool, Pooling::Ngmpool, Pooling::None]
        .into_iter()
        .enumerate()
    {
        for readout in [Readout::Mean, Readout::Sum] {
            let mut model = small_model(pooling, k as u64);
            model.config.readout = readout;
            for _ in 0..20 {
                let n = r.random_range(2..=10);
                let g = random_graph(n, 3, 2, 0.5, &mut r);
                let perm = random_permutation(n, &mut r);
                let a = model.predict(&g).unwrap();
                let b = model.predict(&g.permuted(&perm).unwrap()).unwrap();
                assert!(
                    (a - b).abs() <= 1e-8 * a.abs().max(1.0),
                    "{pooling:?} {readout:?}: {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn permuted_graph_keeps_structure() {
    let mut r = rng(72);
    let g = random_graph(7, 2, 1, 0.5, &mut r);
    let perm = random_permutation(7, &mut r);
    let pg = g.permuted(&perm).unwrap();
    pg.validate().unwrap();
    for (i, j) in g.undirected_edges() {
        assert!(pg.has_edge(perm[i], perm[j]));
        assert_eq!(pg.edge_feature(perm[j], perm[i]), g.edge_feature(j, i));
    }
    assert_eq!(g.undirected_edges().len(), pg.undirected_edges().len());
    assert!(g.permuted(&[0, 0, 1, 2, 3, 4, 5]).is_err());
}
