#![allow(dead_code)]

use gmpool::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Random values in `[-2, 2]` kept at least `margin` away from zero.
pub fn random_off_kink(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(margin..2.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = random_tensor(&[n, n], 0.0, 1.0, rng);
    a.symmetrized().unwrap()
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn numeric_gradient(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape().to_vec());
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        g.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * eps);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.distance(b);
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Gradient of `build(tape, x)` w.r.t. `x`, through the tape.
pub fn tape_gradient(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.param(x.clone()).unwrap();
    let out = build(&mut tape, v);
    tape.backward(out).unwrap();
    tape.grad(v).unwrap().clone()
}

pub fn tape_value(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let out = build(&mut tape, v);
    tape.value(out).data()[0]
}

/// Relative error between the tape gradient and central differences.
pub fn gradient_check(x: &Tensor, eps: f64, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let analytic = tape_gradient(x, &build);
    let numeric = numeric_gradient(x, eps, |t| tape_value(t, &build));
    relative_error(&analytic, &numeric)
}

pub fn block_ones(sizes: &[usize]) -> Tensor {
    let n: usize = sizes.iter().sum();
    let mut m = Tensor::zeros([n, n]);
    let mut start = 0;
    for &k in sizes {
        for i in start..start + k {
            for j in start..start + k {
                m.set(i, j, 1.0);
            }
        }
        start += k;
    }
    m
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Random undirected graph with edge probability `p`; features in `[-1, 1]`.
pub fn random_graph(
    n: usize,
    d_n: usize,
    d_e: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> gmpool::Graph {
    let nodes: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d_n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((
                    i,
                    j,
                    (0..d_e).map(|_| rng.random_range(-1.0..1.0)).collect(),
                ));
            }
        }
    }
    gmpool::Graph::new(&nodes, &edges, d_e, Some(rng.random_range(0.0..4.0))).unwrap()
}
