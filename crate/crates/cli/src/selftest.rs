//! Embedded invariant suite behind `gmpool selftest`.

use gmpool::dmpnn::{encode, DmpnnConfig, DmpnnParams};
use gmpool::linalg::{self, sym_eig_backward, EigBackwardConfig};
use gmpool::pooling::{
    coarsen_with_grouping, coarsen_with_operator, effective_clusters, gmpool_decompose,
    iterative_decompose, GroupingMatrix, IterativeConfig, PairClassifier,
};
use gmpool::{Graph, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Failure;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = Tensor::new([n, n], (0..n * n).map(|_| rng.random::<f64>()).collect()).expect("shape");
    a.symmetrized().expect("square")
}

fn block_ones(sizes: &[usize]) -> Tensor {
    let mut owner = Vec::new();
    for (b, &k) in sizes.iter().enumerate() {
        owner.extend(std::iter::repeat_n(b, k));
    }
    Tensor::from_fn_square(owner.len(), |i, j| f64::from(owner[i] == owner[j]))
}

fn relative(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < 1e-12 {
        a.distance(b)
    } else {
        a.distance(b) / scale
    }
}

fn fd_check(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(x.clone()).expect("finite");
    let out = build(&mut tape, v);
    tape.backward(out).expect("scalar");
    let analytic = tape.grad(v).expect("param").clone();
    let value = |t: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone()).expect("finite");
        let out = build(&mut tape, v);
        tape.value(out).data()[0]
    };
    let mut numeric = Tensor::zeros(x.shape().to_vec());
    let eps = 1e-5;
    for k in 0..x.numel() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[k] += eps;
        m.data_mut()[k] -= eps;
        numeric.data_mut()[k] = (value(&p) - value(&m)) / (2.0 * eps);
    }
    relative(&analytic, &numeric)
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 3], &mut rng).map(|v| if v.abs() < 0.05 { 0.5 } else { v });
    let c = random_tensor(&[3, 3], &mut rng);
    let weighted = move |t: &mut Tape, y: Var| {
        let cv = t.constant(c.clone()).expect("finite");
        let p = t.mul(y, cv).expect("shape");
        t.sum_all(p).expect("shape")
    };
    type Build = Box<dyn Fn(&mut Tape, Var) -> Var>;
    let w = weighted.clone();
    let cases: Vec<(&str, Build)> = vec![
        (
            "matmul",
            Box::new(move |t: &mut Tape, x| {
                let y = t.matmul(x, x).unwrap();
                w(t, y)
            }),
        ),
        (
            "sigmoid",
            Box::new({
                let w = weighted.clone();
                move |t: &mut Tape, x| {
                    let y = t.sigmoid(x).unwrap();
                    w(t, y)
                }
            }),
        ),
        (
            "softplus",
            Box::new({
                let w = weighted.clone();
                move |t: &mut Tape, x| {
                    let y = t.softplus(x).unwrap();
                    w(t, y)
                }
            }),
        ),
        (
            "relu",
            Box::new({
                let w = weighted.clone();
                move |t: &mut Tape, x| {
                    let y = t.relu(x).unwrap();
                    w(t, y)
                }
            }),
        ),
        (
            "abs",
            Box::new({
                let w = weighted.clone();
                move |t: &mut Tape, x| {
                    let y = t.abs(x).unwrap();
                    w(t, y)
                }
            }),
        ),
        (
            "div",
            Box::new({
                let w = weighted.clone();
                move |t: &mut Tape, x| {
                    let s = t.sigmoid(x).unwrap();
                    let y = t.div(x, s).unwrap();
                    w(t, y)
                }
            }),
        ),
        (
            "gather",
            Box::new(|t: &mut Tape, x| {
                let y = t.gather_rows(x, vec![2, 0, 2]).unwrap();
                let y = t.sigmoid(y).unwrap();
                t.sum_all(y).unwrap()
            }),
        ),
        (
            "scatter",
            Box::new(|t: &mut Tape, x| {
                let y = t.scatter_add_rows(x, vec![1, 1, 0], 2).unwrap();
                let y = t.softplus(y).unwrap();
                t.sum_all(y).unwrap()
            }),
        ),
        (
            "mean_rows",
            Box::new(|t: &mut Tape, x| {
                let y = t.mean_rows(x).unwrap();
                let y = t.sigmoid(y).unwrap();
                t.sum_all(y).unwrap()
            }),
        ),
        (
            "sqrt_operator",
            Box::new(|t: &mut Tape, x| {
                let xt = t.transpose(x).unwrap();
                let sym = t.add(x, xt).unwrap();
                let s = t.sqrt_operator(sym, EigBackwardConfig::default()).unwrap();
                let st = t.transpose(s).unwrap();
                let g = t.matmul(st, s).unwrap();
                let g = t.sigmoid(g).unwrap();
                t.sum_all(g).unwrap()
            }),
        ),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for (name, build) in &cases {
        let x = if *name == "sqrt_operator" {
            Tensor::diag(&[3.0, 1.5, 0.5]).map(|v| v + 0.1)
        } else {
            a.clone()
        };
        let err = fd_check(&x, build.as_ref());
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let msg = format!(
        "{} ops, worst relative error {:.1e} ({})",
        cases.len(),
        worst.0,
        worst.1
    );
    if worst.0 < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reconstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(1..=16);
        let m = GroupingMatrix::new(random_symmetric(n, &mut rng)).map_err(|e| e.to_string())?;
        let (s, d, mut eig) = gmpool_decompose(&m).map_err(|e| e.to_string())?;
        eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
        let sts = s.s.transpose().unwrap().matmul(&s.s).unwrap();
        let sst = s.s.matmul(&s.s.transpose().unwrap()).unwrap();
        worst.0 = worst.0.max(sts.distance(&eig.reconstruct()));
        worst.1 = worst.1.max(sst.distance(&d.to_tensor()));
    }
    let msg = format!(
        "50 matrices, max ‖SᵀS−M₊‖ {:.1e}, max ‖SSᵀ−D‖ {:.1e}",
        worst.0, worst.1
    );
    if worst.0 <= 1e-8 && worst.1 <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn stability() -> Outcome {
    let cfg = EigBackwardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=16 {
        for m in [Tensor::identity(n), Tensor::ones([n, n])] {
            let eig = linalg::sym_eig(&m).map_err(|e| e.to_string())?;
            let d_basis = random_tensor(&[n, n], &mut rng);
            let d_vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = sym_eig_backward(&eig, &d_basis, &d_vals, &cfg).map_err(|e| e.to_string())?;
            let upstream = (d_basis.frobenius_norm().powi(2)
                + d_vals.iter().map(|v| v * v).sum::<f64>())
            .sqrt();
            if !g.all_finite() || g.frobenius_norm() > cfg.k_cap * upstream {
                return Err(format!("unbounded gradient at n = {n}"));
            }
        }
    }
    Ok("degenerate spectra n ≤ 16 give finite, bounded gradients".into())
}

fn block_oracle() -> Outcome {
    let m = block_ones(&[3, 2, 1]);
    let eig = linalg::sym_eig(&m).map_err(|e| e.to_string())?;
    let want = [3.0, 2.0, 1.0, 0.0, 0.0, 0.0];
    let ok_vals = eig
        .eigenvalues
        .iter()
        .zip(want)
        .all(|(a, b)| (a - b).abs() < 1e-8);
    let c1 = effective_clusters(&m, 1.0).map_err(|e| e.to_string())?;
    let c05 = effective_clusters(&m, 0.5).map_err(|e| e.to_string())?;
    let msg = format!("Λ ≈ {want:?}: {ok_vals}, clusters@1 = {c1}, clusters@0.5 = {c05}");
    if ok_vals && c1 == 2 && c05 == 3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ngmpool_identity() -> Outcome {
    let m = GroupingMatrix::new(block_ones(&[3, 2])).map_err(|e| e.to_string())?;
    let (s, _, _) = gmpool_decompose(&m).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&[5, 3], &mut rng);
    let (e, a) = (Tensor::zeros([5, 5, 3]), Tensor::zeros([5, 5]));
    let ng = coarsen_with_grouping(&x, &e, &a, &m).map_err(|e| e.to_string())?;
    let gm = coarsen_with_operator(&x, &e, &a, &s).map_err(|e| e.to_string())?;
    let embed = |ones: &Tensor, x: &Tensor| ones.transpose().unwrap().matmul(x).unwrap();
    let diff = embed(&ng.ones, &ng.x).distance(&embed(&gm.ones, &gm.x));
    let w = random_tensor(&[3, 3], &mut rng);
    let relu = |t: &Tensor| t.matmul(&w).unwrap().map(|v| v.max(0.0));
    let nonlinear = relative(
        &embed(&ng.ones, &relu(&ng.x)),
        &embed(&gm.ones, &relu(&gm.x)),
    );
    let msg = format!("linear gap {diff:.1e}; ReLU relative gap {nonlinear:.3} (reported only)");
    if diff < 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn iterative() -> Outcome {
    let m = block_ones(&[2, 2]);
    let cfg = IterativeConfig {
        rank: 2,
        iters: 500,
        tol: 0.0,
        seed: 0,
    };
    let d = iterative_decompose(&m, &cfg).map_err(|e| e.to_string())?;
    let err = d.reconstruction_error(&m);
    let monotone = d.loss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let msg = format!("rank 2 on two blocks: error {err:.1e}, monotone {monotone}");
    if err < 1e-3 && monotone {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> Graph {
    let nodes: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < 0.4 {
                edges.push((i, j, vec![rng.random_range(-1.0..1.0)]));
            }
        }
    }
    Graph::new(&nodes, &edges, 1, None).expect("valid graph")
}

fn equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = DmpnnConfig {
        hidden: 6,
        steps: 3,
        dropout: 0.0,
    };
    let params = DmpnnParams::init(3, 1, &cfg, &mut rng);
    let clf = PairClassifier::new((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.3);
    for _ in 0..20 {
        let n = rng.random_range(2..=10);
        let g = random_graph(n, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = g.permuted(&perm).map_err(|e| e.to_string())?;
        let (x, _) = encode(&g, &params, &cfg).map_err(|e| e.to_string())?;
        let (px, _) = encode(&pg, &params, &cfg).map_err(|e| e.to_string())?;
        let m = clf
            .grouping_matrix(&x, false)
            .map_err(|e| e.to_string())?
            .into_tensor();
        let pm = clf
            .grouping_matrix(&px, false)
            .map_err(|e| e.to_string())?
            .into_tensor();
        if pm != m.permute_square(&perm) {
            return Err(format!(
                "grouping matrix not equivariant on a {n}-node graph"
            ));
        }
        if effective_clusters(&m, 1.0).ok() != effective_clusters(&pm, 1.0).ok() {
            return Err("effective clusters changed under permutation".into());
        }
    }
    Ok("20 random graphs: M(PX) = P·M·Pᵀ exactly".into())
}

pub fn run() -> Result<(), Failure> {
    let checks: [Check; 7] = [
        ("gradients", gradients),
        ("reconstruction", reconstruction),
        ("eigen-backward stability", stability),
        ("block-diagonal oracle", block_oracle),
        ("ngmpool identity", ngmpool_identity),
        ("iterative decomposition", iterative),
        ("permutation equivariance", equivariance),
    ];
    let mut failed = 0;
    println!("{:<26} {:<6} detail", "check", "result");
    for (name, check) in checks {
        let (tag, detail) = match check() {
            Ok(d) => ("pass", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{name:<26} {tag:<6} {detail}");
    }
    if failed == 0 {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{failed} of {} checks failed",
            checks.len()
        )))
    }
}
