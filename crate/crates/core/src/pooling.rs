//! Grouping-matrix pooling.
//!
//! A classifier scores every node pair; the resulting grouping matrix `M`
//! is either factored as `M ≈ SᵀS` with `S = diag(√Λ₊)·Oᵀ` (GMPool) or
//! applied directly (NGMPool). The pooled dimension follows the rank of
//! `M`, so no cluster count is ever configured on these paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, EigBackwardConfig, SymEig};
use crate::tensor::Tensor;

/// Symmetric `n×n` matrix with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingMatrix(Tensor);

impl GroupingMatrix {
    pub fn new(m: Tensor) -> Result<Self> {
        if !m.is_square_matrix() {
            return Err(Error::shape(
                "grouping_matrix",
                format!("expected a square matrix, got {:?}", m.shape()),
            ));
        }
        let n = m.rows();
        for i in 0..n {
            for j in 0..n {
                let v = m.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!(
                        "grouping entry ({i}, {j}) = {v} outside [0, 1]"
                    )));
                }
                if v != m.get(j, i) {
                    return Err(Error::InvalidArgument(format!(
                        "grouping matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Eigen,
    Iterative,
}

/// Row-convention coarsening map: `X̃ = S·X`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingOperator {
    pub s: Tensor,
    pub scheme: Scheme,
}

/// Diagonal of `S·Sᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeMatrix {
    pub diagonal: Vec<f64>,
}

impl DegreeMatrix {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::diag(&self.diagonal)
    }
}

/// `T[i·n + j] = |X_i − X_j|`, as an `n² × h` matrix.
pub fn pairwise_input(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let left = (0..n * n).map(|k| k / n).collect();
    let right = (0..n * n).map(|k| k % n).collect();
    let xi = tape.gather_rows(x, left)?;
    let xj = tape.gather_rows(x, right)?;
    let d = tape.sub(xi, xj)?;
    tape.abs(d)
}

/// `n × n × h` tensor of absolute feature differences.
pub fn pairwise_distance(x: &Tensor) -> Tensor {
    let (n, h) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n * n * h);
    for i in 0..n {
        for j in 0..n {
            out.extend(x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).abs()));
        }
    }
    Tensor::new([n, n, h], out).expect("shape matches data")
}

/// Pair classifier `sigmoid(w·T_ij + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairClassifier {
    /// `hidden × 1`
    pub w: Tensor,
    /// `1 × 1`
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct PairClassifierVars {
    pub w: Var,
    pub b: Var,
}

impl PairClassifier {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        let h = w.len();
        Self {
            w: Tensor::new([h, 1], w).expect("column vector"),
            b: Tensor::new([1, 1], vec![b]).expect("scalar"),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<PairClassifierVars> {
        Ok(PairClassifierVars {
            w: tape.leaf(self.w.clone(), trainable)?,
            b: tape.leaf(self.b.clone(), trainable)?,
        })
    }

    /// Grouping matrix of a node-feature matrix, evaluated without gradients.
    pub fn grouping_matrix(&self, x: &Tensor, clamp_diagonal: bool) -> Result<GroupingMatrix> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let t = pairwise_input(&mut tape, xv)?;
        let m = grouping_matrix(&mut tape, t, &vars, x.rows(), clamp_diagonal)?;
        GroupingMatrix::new(tape.value(m).clone())
    }
}

/// `M = sigmoid(T·w + b)` reshaped to `n × n`. With `clamp_diagonal`, `M_ii = 1`.
pub fn grouping_matrix(
    tape: &mut Tape,
    t: Var,
    clf: &PairClassifierVars,
    n: usize,
    clamp_diagonal: bool,
) -> Result<Var> {
    let h = tape.shape(t)[1];
    if tape.shape(clf.w) != [h, 1] {
        return Err(Error::shape(
            "grouping_matrix",
            format!(
                "classifier weights {:?} for {h} channels",
                tape.shape(clf.w)
            ),
        ));
    }
    let logits = tape.matmul(t, clf.w)?;
    let logits = tape.add(logits, clf.b)?;
    let probs = tape.sigmoid(logits)?;
    let m = tape.reshape(probs, [n, n])?;
    if !clamp_diagonal {
        return Ok(m);
    }
    let off = tape.constant(Tensor::from_fn_square(
        n,
        |i, j| if i == j { 0.0 } else { 1.0 },
    ))?;
    let eye = tape.constant(Tensor::identity(n))?;
    let masked = tape.mul(m, off)?;
    tape.add(masked, eye)
}

/// Eigen-scheme factorization: `S = diag(√Λ₊)·Oᵀ`, `D = diag(Λ₊)`, with every
/// row of `S` oriented so that `1̃ = S·1 ≥ 0` where it is nonzero.
pub fn gmpool_decompose(m: &GroupingMatrix) -> Result<(PoolingOperator, DegreeMatrix, SymEig)> {
    let eig = linalg::sym_eig(m.as_tensor())?.oriented_by_mass();
    let s = linalg::sqrt_operator(&eig);
    let diagonal = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    Ok((
        PoolingOperator {
            s,
            scheme: Scheme::Eigen,
        },
        DegreeMatrix { diagonal },
        eig,
    ))
}

/// Differentiable `S` on the tape.
pub fn gmpool_operator(tape: &mut Tape, m: Var, cfg: EigBackwardConfig) -> Result<Var> {
    cfg.validate()?;
    tape.sqrt_operator(m, cfg)
}

/// Tape handles of a pooled graph.
#[derive(Debug, Clone, Copy)]
pub struct CoarsenedVars {
    /// `r × h`
    pub x: Var,
    /// `r × r × h`
    pub e: Var,
    /// `r × r`
    pub a: Var,
    /// `r × 1` node weights `1̃`.
    pub ones: Var,
}

/// Plain-tensor pooled graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsenedGraph {
    pub x: Tensor,
    pub e: Tensor,
    pub a: Tensor,
    pub ones: Tensor,
}

/// `L·E·Rᵀ` applied to every channel of an `n × n × h` tensor.
fn sandwich(tape: &mut Tape, left: Var, e: Var, right: Var) -> Result<Var> {
    let (r_left, n) = (tape.shape(left)[0], tape.shape(left)[1]);
    let r_right = tape.shape(right)[0];
    let (n1, n2, h) = match tape.shape(e) {
        [a, b, c] => (*a, *b, *c),
        other => {
            return Err(Error::shape(
                "coarsen",
                format!("edge tensor must be rank 3, got {other:?}"),
            ))
        }
    };
    if n1 != n || n2 != tape.shape(right)[1] {
        return Err(Error::shape(
            "coarsen",
            format!("operator width {n} for edge tensor {n1}x{n2}"),
        ));
    }
    // F[a, j, :] = Σ_i L_ai E[i, j, :]
    let flat = tape.reshape(e, [n1, n2 * h])?;
    let f = tape.matmul(left, flat)?;
    let f = tape.reshape(f, [r_left, n2, h])?;
    let f = tape.swap_leading_axes(f)?;
    // G[b, a, :] = Σ_j R_bj F[a, j, :]
    let f = tape.reshape(f, [n2, r_left * h])?;
    let g = tape.matmul(right, f)?;
    let g = tape.reshape(g, [r_right, r_left, h])?;
    tape.swap_leading_axes(g)
}

fn check_operator(tape: &Tape, op: Var, x: Var, a: Var) -> Result<()> {
    let n = tape.shape(x)[0];
    let ok = tape.shape(op).len() == 2 && tape.shape(op)[1] == n && tape.shape(a) == [n, n];
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            "coarsen",
            format!(
                "operator {:?} for {n} nodes and adjacency {:?}",
                tape.shape(op),
                tape.shape(a)
            ),
        ))
    }
}

/// `X̃ = S·X`, `Ẽ = S·E·Sᵀ`, `Ã = S·A·Sᵀ`, `1̃ = S·1`.
pub fn gmpool_coarsen(tape: &mut Tape, x: Var, e: Var, a: Var, s: Var) -> Result<CoarsenedVars> {
    check_operator(tape, s, x, a)?;
    let n = tape.shape(x)[0];
    let xt = tape.matmul(s, x)?;
    let et = sandwich(tape, s, e, s)?;
    let st = tape.transpose(s)?;
    let sa = tape.matmul(s, a)?;
    let at = tape.matmul(sa, st)?;
    let one = tape.constant(Tensor::ones([n, 1]))?;
    let ones = tape.matmul(s, one)?;
    Ok(CoarsenedVars {
        x: xt,
        e: et,
        a: at,
        ones,
    })
}

/// `X̃ = M·X`, `Ẽ = M·E·M`, `Ã = M·A·M`, `1̃ = 1`.
pub fn ngmpool_coarsen(tape: &mut Tape, x: Var, e: Var, a: Var, m: Var) -> Result<CoarsenedVars> {
    check_operator(tape, m, x, a)?;
    let n = tape.shape(x)[0];
    if tape.shape(m) != [n, n] {
        return Err(Error::shape(
            "ngmpool",
            format!("grouping matrix {:?} for {n} nodes", tape.shape(m)),
        ));
    }
    let xt = tape.matmul(m, x)?;
    // M is symmetric, so M·E·M = M·E·Mᵀ.
    let et = sandwich(tape, m, e, m)?;
    let ma = tape.matmul(m, a)?;
    let at = tape.matmul(ma, m)?;
    let ones = tape.constant(Tensor::ones([n, 1]))?;
    Ok(CoarsenedVars {
        x: xt,
        e: et,
        a: at,
        ones,
    })
}

fn coarsen_tensors(
    x: &Tensor,
    e: &Tensor,
    a: &Tensor,
    op: &Tensor,
    f: fn(&mut Tape, Var, Var, Var, Var) -> Result<CoarsenedVars>,
) -> Result<CoarsenedGraph> {
    let mut tape = Tape::new();
    let (xv, ev, av, ov) = (
        tape.constant(x.clone())?,
        tape.constant(e.clone())?,
        tape.constant(a.clone())?,
        tape.constant(op.clone())?,
    );
    let c = f(&mut tape, xv, ev, av, ov)?;
    Ok(CoarsenedGraph {
        x: tape.value(c.x).clone(),
        e: tape.value(c.e).clone(),
        a: tape.value(c.a).clone(),
        ones: tape.value(c.ones).clone(),
    })
}

/// Tensor-level [`gmpool_coarsen`].
pub fn coarsen_with_operator(
    x: &Tensor,
    e: &Tensor,
    a: &Tensor,
    s: &PoolingOperator,
) -> Result<CoarsenedGraph> {
    coarsen_tensors(x, e, a, &s.s, gmpool_coarsen)
}

/// Tensor-level [`ngmpool_coarsen`].
pub fn coarsen_with_grouping(
    x: &Tensor,
    e: &Tensor,
    a: &Tensor,
    m: &GroupingMatrix,
) -> Result<CoarsenedGraph> {
    coarsen_tensors(x, e, a, m.as_tensor(), ngmpool_coarsen)
}

/// Number of eigenvalues strictly above `threshold`.
pub fn effective_clusters(m: &Tensor, threshold: f64) -> Result<usize> {
    Ok(effective_clusters_from(
        &linalg::sym_eig(m)?.eigenvalues,
        threshold,
    ))
}

pub fn effective_clusters_from(eigenvalues: &[f64], threshold: f64) -> usize {
    eigenvalues.iter().filter(|&&l| l > threshold).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeConfig {
    pub rank: usize,
    pub iters: usize,
    /// Stop once the relative loss decrease of an accepted step falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            iters: 500,
            tol: 1e-12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeDecomposition {
    /// `r × n` factor minimizing `‖M − WᵀW‖²_F`.
    pub w: Tensor,
    /// `w` with every nonzero column rescaled to sum to 1.
    pub w_normalized: Tensor,
    /// Loss before the first update, then after every iteration.
    pub loss_trace: Vec<f64>,
}

impl IterativeDecomposition {
    pub fn reconstruction_error(&self, m: &Tensor) -> f64 {
        reconstruction(&self.w).distance(m)
    }

    pub fn operator(&self) -> PoolingOperator {
        PoolingOperator {
            s: self.w.clone(),
            scheme: Scheme::Iterative,
        }
    }
}

const NMF_DELTA: f64 = 1e-12;

fn reconstruction(w: &Tensor) -> Tensor {
    w.transpose()
        .expect("matrix")
        .matmul(w)
        .expect("conformable")
}

fn nmf_loss(m: &Tensor, w: &Tensor) -> f64 {
    let d = reconstruction(w).distance(m);
    d * d
}

fn check_nonnegative(m: &Tensor) -> Result<()> {
    if !m.is_square_matrix() {
        return Err(Error::shape(
            "iterative_decompose",
            format!("expected a square matrix, got {:?}", m.shape()),
        ));
    }
    if let Some(v) = m.data().iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "matrix entry {v} is not a finite non-negative number"
        )));
    }
    Ok(())
}

/// Symmetric non-negative factorization `M ≈ WᵀW` from a seeded random start.
pub fn iterative_decompose(m: &Tensor, cfg: &IterativeConfig) -> Result<IterativeDecomposition> {
    check_nonnegative(m)?;
    let n = m.rows();
    if cfg.rank < 1 || cfg.rank > n {
        return Err(Error::InvalidArgument(format!(
            "rank {} not in 1..={n}",
            cfg.rank
        )));
    }
    let mean = m.data().iter().sum::<f64>() / (n * n).max(1) as f64;
    let scale = 2.0 * (mean / cfg.rank as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = (0..cfg.rank * n)
        .map(|_| scale * rng.random::<f64>())
        .collect();
    iterative_decompose_from(m, Tensor::new([cfg.rank, n], data)?, cfg.iters, cfg.tol)
}

/// Multiplicative updates `W ← W ⊙ (1 − β + β·(W·M) ⊘ (W·Wᵀ·W + δ))`.
///
/// `β` starts at 1, the plain multiplicative rule, and is halved whenever a
/// step would raise the loss, so the loss trace never increases.
pub fn iterative_decompose_from(
    m: &Tensor,
    w0: Tensor,
    iters: usize,
    tol: f64,
) -> Result<IterativeDecomposition> {
    check_nonnegative(m)?;
    let n = m.rows();
    if w0.rank() != 2 || w0.cols() != n || w0.rows() < 1 || w0.rows() > n {
        return Err(Error::InvalidArgument(format!(
            "initial factor {:?} does not fit {n} nodes",
            w0.shape()
        )));
    }
    if w0.data().iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(
            "initial factor must be finite and non-negative".into(),
        ));
    }
    let mut w = w0;
    let mut loss = nmf_loss(m, &w);
    let mut trace = vec![loss];
    let mut beta: f64 = 1.0;
    for _ in 0..iters {
        let num = w.matmul(m)?;
        let den = w.matmul(&w.transpose()?)?.matmul(&w)?;
        let mut accepted = None;
        while beta >= 1e-6 {
            let data = w
                .data()
                .iter()
                .zip(num.data().iter().zip(den.data()))
                .map(|(&x, (&p, &q))| x * (1.0 - beta + beta * p / (q + NMF_DELTA)))
                .collect();
            let candidate = Tensor::new(w.shape().to_vec(), data)?;
            let cand_loss = nmf_loss(m, &candidate);
            if cand_loss <= loss {
                accepted = Some((candidate, cand_loss));
                break;
            }
            beta *= 0.5;
        }
        let Some((next, next_loss)) = accepted else {
            break;
        };
        let decrease = loss - next_loss;
        w = next;
        trace.push(next_loss);
        let relative = if loss > 0.0 { decrease / loss } else { 0.0 };
        loss = next_loss;
        beta = (beta * 2.0).min(1.0);
        if relative < tol || loss == 0.0 {
            break;
        }
    }
    let w_normalized = normalize_columns(&w);
    Ok(IterativeDecomposition {
        w,
        w_normalized,
        loss_trace: trace,
    })
}

fn normalize_columns(w: &Tensor) -> Tensor {
    let (r, n) = (w.rows(), w.cols());
    let mut out = w.clone();
    for j in 0..n {
        let total: f64 = (0..r).map(|i| w.get(i, j)).sum();
        if total > 0.0 {
            for i in 0..r {
                out.set(i, j, w.get(i, j) / total);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pairwise_examples() {
        let x = Tensor::from_rows(&[vec![0.0], vec![3.0]]).unwrap();
        let t = pairwise_distance(&x);
        assert_eq!(t.data(), &[0.0, 3.0, 3.0, 0.0]);
        let same = Tensor::full([3, 2], 1.5);
        assert!(pairwise_distance(&same).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_logit_gives_half() {
        let clf = PairClassifier::new(vec![0.7, -0.2], 0.0);
        let m = clf
            .grouping_matrix(&Tensor::full([3, 2], 2.0), false)
            .unwrap();
        assert!(m.as_tensor().data().iter().all(|&v| v == 0.5));
        let m = clf
            .grouping_matrix(&Tensor::full([3, 2], 2.0), true)
            .unwrap();
        assert_eq!(m.as_tensor().get(1, 1), 1.0);
        assert_eq!(m.as_tensor().get(0, 1), 0.5);
    }

    #[test]
    fn three_node_classifier_example() {
        let clf = PairClassifier::new(vec![-1.0], 5.0);
        let x = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![10.0]]).unwrap();
        let m = clf.grouping_matrix(&x, false).unwrap();
        let m = m.as_tensor();
        assert!(close(m.get(0, 1), 0.993_307_149_075_715_2, 1e-15));
        assert!(close(m.get(0, 2), 0.006_692_850_924_284_856, 1e-15));
        assert_eq!(m.get(2, 1), m.get(1, 2));
    }

    #[test]
    fn classifier_dimension_mismatch() {
        let clf = PairClassifier::new(vec![1.0, 1.0], 0.0);
        assert!(clf.grouping_matrix(&Tensor::zeros([2, 3]), false).is_err());
    }

    #[test]
    fn grouping_matrix_validation() {
        assert!(
            GroupingMatrix::new(Tensor::from_rows(&[vec![0.5, 0.2], vec![0.3, 0.5]]).unwrap())
                .is_err()
        );
        assert!(GroupingMatrix::new(Tensor::from_rows(&[vec![1.5]]).unwrap()).is_err());
        assert!(GroupingMatrix::new(Tensor::zeros([2, 3])).is_err());
    }

    #[test]
    fn identity_decomposition() {
        let m = GroupingMatrix::new(Tensor::identity(4)).unwrap();
        let (s, d, _) = gmpool_decompose(&m).unwrap();
        let sts = s.s.transpose().unwrap().matmul(&s.s).unwrap();
        assert!(sts.distance(&Tensor::identity(4)) < 1e-12);
        assert_eq!(d.diagonal, vec![1.0; 4]);
    }

    #[test]
    fn averaging_grouping_matrix() {
        let x = Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let e = Tensor::zeros([2, 2, 1]);
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let m = GroupingMatrix::new(Tensor::full([2, 2], 0.5)).unwrap();
        let c = coarsen_with_grouping(&x, &e, &a, &m).unwrap();
        assert_eq!(c.x.data(), &[3.0, 3.0]);
        assert_eq!(c.ones.data(), &[1.0, 1.0]);
    }

    #[test]
    fn identity_operator_is_a_no_op() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let e = Tensor::new([3, 3, 2], (0..18).map(f64::from).collect()).unwrap();
        let a = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let s = PoolingOperator {
            s: Tensor::identity(3),
            scheme: Scheme::Eigen,
        };
        let c = coarsen_with_operator(&x, &e, &a, &s).unwrap();
        assert_eq!(c.x, x);
        assert_eq!(c.e, e);
        assert_eq!(c.a, a);
        assert_eq!(c.ones.data(), &[1.0; 3]);
        let m = GroupingMatrix::new(Tensor::identity(3)).unwrap();
        assert_eq!(coarsen_with_grouping(&x, &e, &a, &m).unwrap().e, e);
    }

    #[test]
    fn block_operator_sums_groups() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![5.0]]).unwrap();
        let e = Tensor::zeros([3, 3, 1]);
        let a = Tensor::zeros([3, 3]);
        let s = PoolingOperator {
            s: Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
            scheme: Scheme::Eigen,
        };
        let c = coarsen_with_operator(&x, &e, &a, &s).unwrap();
        assert_eq!(c.x.data(), &[3.0, 5.0]);
        assert_eq!(c.ones.data(), &[2.0, 1.0]);
    }

    #[test]
    fn coarsen_shape_mismatch() {
        let s = PoolingOperator {
            s: Tensor::identity(2),
            scheme: Scheme::Eigen,
        };
        let r = coarsen_with_operator(
            &Tensor::zeros([3, 1]),
            &Tensor::zeros([3, 3, 1]),
            &Tensor::zeros([3, 3]),
            &s,
        );
        assert!(r.is_err());
    }

    #[test]
    fn effective_cluster_examples() {
        assert_eq!(effective_clusters(&Tensor::zeros([4, 4]), 1.0).unwrap(), 0);
        assert_eq!(effective_clusters(&Tensor::identity(5), 0.5).unwrap(), 5);
    }

    #[test]
    fn rank_one_all_ones() {
        let m = Tensor::ones([4, 4]);
        let cfg = IterativeConfig {
            rank: 1,
            iters: 500,
            tol: 0.0,
            seed: 3,
        };
        let d = iterative_decompose(&m, &cfg).unwrap();
        assert!(d.reconstruction_error(&m) < 1e-6);
        let w = d.w.row(0);
        assert!(w.iter().all(|&v| (v - w[0]).abs() < 1e-6));
        assert!(d
            .w_normalized
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn exact_root_is_fixed_point() {
        let w = Tensor::from_rows(&[
            vec![1.0, 0.5, 0.0],
            vec![0.0, 0.5, 1.0],
            vec![0.2, 0.0, 0.3],
        ])
        .unwrap();
        let m = w.transpose().unwrap().matmul(&w).unwrap();
        let d = iterative_decompose_from(&m, w.clone(), 10, 0.0).unwrap();
        assert!(d.w.distance(&w) < 1e-10);
        assert!(d.loss_trace.iter().all(|&l| l < 1e-20));
    }

    #[test]
    fn iterative_rejects_bad_input() {
        let m = Tensor::ones([3, 3]);
        let bad_rank = IterativeConfig {
            rank: 4,
            ..IterativeConfig::default()
        };
        assert!(iterative_decompose(&m, &bad_rank).is_err());
        let neg = Tensor::from_rows(&[vec![1.0, -0.1], vec![-0.1, 1.0]]).unwrap();
        assert!(iterative_decompose(&neg, &IterativeConfig::default()).is_err());
    }
}
