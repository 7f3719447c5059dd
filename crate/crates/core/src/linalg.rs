//! Symmetric eigendecomposition and its reverse-mode derivative.
//!
//! The forward solver is cyclic Jacobi: slow for large `n` but unconditionally
//! stable on symmetric input, which is all the pooling path ever produces.
//! The backward rule for `M = O·diag(Λ)·Oᵀ` is
//!
//! ```text
//! ∂L/∂M = O (Kᵀ ⊙ (Oᵀ ∂L/∂O) + diag(∂L/∂Λ)) Oᵀ,   K_ij = 1/(λ_i − λ_j), K_ii = 0
//! ```
//!
//! `K` is unbounded when two eigenvalues meet, so entries are clamped to
//! `±k_cap` whenever the gap drops below `eigengap_floor`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 50;
const CONVERGENCE_RTOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;
/// Components smaller than this are skipped when fixing the eigenvector sign.
const SIGN_EPS: f64 = 1e-10;
const ORIENT_EPS: f64 = 1e-9;

/// Eigenbasis (columns of `basis`) and eigenvalues sorted in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    pub basis: Tensor,
    pub eigenvalues: Vec<f64>,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Same eigensystem with each eigenvector's sign chosen by permutation-invariant
    /// statistics: `Σ_i o_i ≥ 0`, or `Σ_i o_i³ ≥ 0` when the sum vanishes.
    /// Otherwise the [`sym_eig`] convention is kept.
    pub fn oriented_by_mass(mut self) -> SymEig {
        let n = self.dim();
        let o = self.basis.data_mut();
        for a in 0..n {
            let col = (0..n).map(|i| o[i * n + a]);
            let sum: f64 = col.clone().sum();
            let cubes: f64 = col.map(|v| v * v * v).sum();
            let key = if sum.abs() > ORIENT_EPS { sum } else { cubes };
            if key < -ORIENT_EPS {
                for i in 0..n {
                    o[i * n + a] = -o[i * n + a];
                }
            }
        }
        self
    }

    /// `O·diag(Λ)·Oᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.dim();
        let o = self.basis.data();
        let mut out = Tensor::zeros([n, n]);
        let data = out.data_mut();
        for (a, &lam) in self.eigenvalues.iter().enumerate() {
            for i in 0..n {
                let oi = o[i * n + a] * lam;
                if oi == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += oi * o[j * n + a];
                }
            }
        }
        out
    }
}

/// Stabilization parameters for [`sym_eig_backward`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigBackwardConfig {
    pub eigengap_floor: f64,
    pub k_cap: f64,
}

impl Default for EigBackwardConfig {
    fn default() -> Self {
        Self::new(1e-4).expect("default eigengap floor is positive")
    }
}

impl EigBackwardConfig {
    pub fn new(eigengap_floor: f64) -> Result<Self> {
        if !(eigengap_floor > 0.0 && eigengap_floor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eigengap floor must be positive, got {eigengap_floor}"
            )));
        }
        Ok(Self {
            eigengap_floor,
            k_cap: 1.0 / eigengap_floor,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::new(self.eigengap_floor)?;
        if (self.k_cap - expected.k_cap).abs() > 1e-9 * expected.k_cap {
            return Err(Error::InvalidArgument(format!(
                "k_cap must equal 1/eigengap_floor ({}), got {}",
                expected.k_cap, self.k_cap
            )));
        }
        Ok(())
    }

    /// Clamped `1/(λ_i − λ_j)` for `i ≠ j`. Ties follow the descending order,
    /// so `i < j` maps to `+k_cap`.
    pub fn inverse_gap(&self, lambda_i: f64, lambda_j: f64, i: usize, j: usize) -> f64 {
        let gap = lambda_i - lambda_j;
        if gap.abs() >= self.eigengap_floor {
            return 1.0 / gap;
        }
        let positive = gap > 0.0 || (gap == 0.0 && i < j);
        if positive {
            self.k_cap
        } else {
            -self.k_cap
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized first. Eigenvalues come back sorted descending,
/// and each eigenvector's first non-negligible component is non-negative.
pub fn sym_eig(m: &Tensor) -> Result<SymEig> {
    if !m.is_square_matrix() {
        return Err(Error::shape(
            "sym_eig",
            format!("expected square matrix, got {:?}", m.shape()),
        ));
    }
    if !m.all_finite() {
        return Err(Error::NonFinite { op: "sym_eig" });
    }
    let n = m.rows();
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .fold(0.0_f64, |acc, (i, j)| {
            acc.max((m.get(i, j) - m.get(j, i)).abs())
        });
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "sym_eig: matrix is not symmetric (max |M - Mᵀ| = {asym:e})"
        )));
    }

    let mut a = m.symmetrized()?.into_data();
    let mut v = Tensor::identity(n).into_data();
    let tol = CONVERGENCE_RTOL * m.frobenius_norm();

    let mut converged = false;
    let mut residual = max_off_diagonal(&a, n);
    for _ in 0..MAX_SWEEPS {
        if residual <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, n, p, q);
            }
        }
        residual = max_off_diagonal(&a, n);
    }
    if !converged && residual > tol {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original index order for exact ties.
    order.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]));

    let mut basis = vec![0.0; n * n];
    let mut eigenvalues = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        eigenvalues.push(a[src * n + src]);
        let flip = (0..n)
            .map(|i| v[i * n + src])
            .find(|x| x.abs() > SIGN_EPS)
            .is_some_and(|x| x < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        for i in 0..n {
            basis[i * n + col] = sign * v[i * n + src];
        }
    }

    Ok(SymEig {
        basis: Tensor::new([n, n], basis)?,
        eigenvalues,
    })
}

fn max_off_diagonal(a: &[f64], n: usize) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            m = m.max(a[i * n + j].abs());
        }
    }
    m
}

/// One Jacobi rotation zeroing `a[p][q]`, applied as `A ← PᵀAP`, `V ← VP`.
fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

/// Gradient of a loss w.r.t. the symmetric input of [`sym_eig`], given the
/// upstream gradients w.r.t. the eigenbasis and the eigenvalues.
pub fn sym_eig_backward(
    eig: &SymEig,
    d_basis: &Tensor,
    d_eigenvalues: &[f64],
    cfg: &EigBackwardConfig,
) -> Result<Tensor> {
    let n = eig.dim();
    if d_basis.shape() != [n, n] || d_eigenvalues.len() != n {
        return Err(Error::shape(
            "sym_eig_backward",
            format!(
                "eigensystem is {n}x{n}, got dO {:?} and dΛ of length {}",
                d_basis.shape(),
                d_eigenvalues.len()
            ),
        ));
    }
    let u = &eig.basis;
    let lam = &eig.eigenvalues;
    let mut inner = u.transpose()?.matmul(d_basis)?;
    {
        let data = inner.data_mut();
        for i in 0..n {
            for j in 0..n {
                let k_t = if i == j {
                    0.0
                } else {
                    // Kᵀ_ij = K_ji
                    cfg.inverse_gap(lam[j], lam[i], j, i)
                };
                data[i * n + j] *= k_t;
            }
            data[i * n + i] += d_eigenvalues[i];
        }
    }
    let g = u.matmul(&inner)?.matmul(&u.transpose()?)?;
    let g = g.symmetrized()?;
    if !g.all_finite() {
        return Err(Error::NonFinite {
            op: "sym_eig_backward",
        });
    }
    Ok(g)
}

/// Element-wise `sqrt(max(λ, floor))`.
pub fn sqrt_clamped(eigenvalues: &[f64], floor: f64) -> Vec<f64> {
    eigenvalues.iter().map(|&l| l.max(floor).sqrt()).collect()
}

/// Derivative of `sqrt(max(λ, 0))`. Zero on the clamped side; near zero the
/// slope is evaluated at `eigengap_floor` so it stays bounded by `k_cap^{1/2}/2`.
pub fn sqrt_clamped_derivative(lambda: f64, cfg: &EigBackwardConfig) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else {
        0.5 / lambda.max(cfg.eigengap_floor).sqrt()
    }
}

/// Row-convention square-root operator `S = diag(√Λ₊)·Oᵀ`, so that
/// `SᵀS = O·diag(Λ₊)·Oᵀ` and `SSᵀ = diag(Λ₊)`.
pub fn sqrt_operator(eig: &SymEig) -> Tensor {
    let n = eig.dim();
    let roots = sqrt_clamped(&eig.eigenvalues, 0.0);
    let o = eig.basis.data();
    let mut s = vec![0.0; n * n];
    for a in 0..n {
        for i in 0..n {
            s[a * n + i] = roots[a] * o[i * n + a];
        }
    }
    Tensor::new([n, n], s).expect("square buffer")
}

/// Backpropagates `∂L/∂S` through [`sqrt_operator`] and [`sym_eig`].
pub fn sqrt_operator_backward(
    eig: &SymEig,
    d_s: &Tensor,
    cfg: &EigBackwardConfig,
) -> Result<Tensor> {
    let n = eig.dim();
    if d_s.shape() != [n, n] {
        return Err(Error::shape(
            "sqrt_operator_backward",
            format!("expected {n}x{n}, got {:?}", d_s.shape()),
        ));
    }
    let roots = sqrt_clamped(&eig.eigenvalues, 0.0);
    let o = eig.basis.data();
    let g = d_s.data();
    let mut d_basis = vec![0.0; n * n];
    let mut d_vals = vec![0.0; n];
    for a in 0..n {
        let mut ds_a = 0.0;
        for i in 0..n {
            d_basis[i * n + a] = g[a * n + i] * roots[a];
            ds_a += g[a * n + i] * o[i * n + a];
        }
        d_vals[a] = ds_a * sqrt_clamped_derivative(eig.eigenvalues[a], cfg);
    }
    sym_eig_backward(eig, &Tensor::new([n, n], d_basis)?, &d_vals, cfg)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut m = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn orthonormality_error(eig: &SymEig) -> f64 {
        let o = &eig.basis;
        o.transpose()
            .unwrap()
            .matmul(o)
            .unwrap()
            .distance(&Tensor::identity(eig.dim()))
    }

    /// Determinant by cofactor expansion; independent of the Jacobi solver.
    fn det(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        if n == 1 {
            return m[0][0];
        }
        (0..n)
            .map(|c| {
                let minor: Vec<Vec<f64>> = m[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|(j, _)| *j != c)
                            .map(|(_, v)| *v)
                            .collect()
                    })
                    .collect();
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[0][c] * det(&minor)
            })
            .sum()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let eig = sym_eig(&Tensor::identity(3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert!(orthonormality_error(&eig) < 1e-12);
        assert!(eig.reconstruct().distance(&Tensor::identity(3)) < 1e-12);
    }

    #[test]
    fn block_diagonal_spectrum_matches_characteristic_polynomial() {
        let rows = vec![
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let eig = sym_eig(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let expected = [2.0, 1.0, 0.0];
        for (got, want) in eig.eigenvalues.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            let shifted: Vec<Vec<f64>> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r.iter()
                        .enumerate()
                        .map(|(j, v)| if i == j { v - got } else { *v })
                        .collect()
                })
                .collect();
            assert!(det(&shifted).abs() < 1e-10);
        }
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_symmetric(6, &mut rng);
        let eig = sym_eig(&m).unwrap();
        assert!(eig.reconstruct().distance(&m) < 1e-10);
        assert!(orthonormality_error(&eig) < 1e-10);
        assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sign_convention_first_component_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eig = sym_eig(&random_symmetric(5, &mut rng)).unwrap();
        for a in 0..5 {
            let first = (0..5)
                .map(|i| eig.basis.get(i, a))
                .find(|x| x.abs() > SIGN_EPS)
                .unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(sym_eig(&Tensor::zeros([2, 3])).is_err());
        let m = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(sym_eig(&m).is_err());
    }

    #[test]
    fn zero_and_empty_matrices() {
        let eig = sym_eig(&Tensor::zeros([3, 3])).unwrap();
        assert_eq!(eig.eigenvalues, vec![0.0; 3]);
        assert_eq!(sym_eig(&Tensor::zeros([0, 0])).unwrap().dim(), 0);
    }

    #[test]
    fn trace_gradient_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eig = sym_eig(&random_symmetric(4, &mut rng)).unwrap();
        let g = sym_eig_backward(
            &eig,
            &Tensor::zeros([4, 4]),
            &[1.0; 4],
            &EigBackwardConfig::default(),
        )
        .unwrap();
        assert!(g.distance(&Tensor::identity(4)) < 1e-12);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let eig = sym_eig(&Tensor::identity(3)).unwrap();
        let cfg = EigBackwardConfig::default();
        assert!(sym_eig_backward(&eig, &Tensor::zeros([2, 2]), &[0.0; 3], &cfg).is_err());
        assert!(sym_eig_backward(&eig, &Tensor::zeros([3, 3]), &[0.0; 2], &cfg).is_err());
    }

    /// Symmetric central difference: perturbs M_ij and M_ji together.
    fn fd_symmetric(m: &Tensor, loss: &dyn Fn(&Tensor) -> f64, eps: f64) -> Tensor {
        let n = m.rows();
        let mut g = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in i..n {
                let mut plus = m.clone();
                let mut minus = m.clone();
                for (a, b) in [(i, j), (j, i)] {
                    plus.set(a, b, m.get(a, b) + eps);
                    minus.set(a, b, m.get(a, b) - eps);
                    if i == j {
                        break;
                    }
                }
                let d = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let d = if i == j { d } else { d / 2.0 };
                g.set(i, j, d);
                g.set(j, i, d);
            }
        }
        g
    }

    fn well_separated(n: usize, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
        // Q diag(spread-out λ) Qᵀ with a random orthonormal Q.
        let q = sym_eig(&random_symmetric(n, rng)).unwrap().basis;
        let lam: Vec<f64> = (0..n)
            .map(|i| gap * (n - i) as f64 + rng.random_range(0.0..0.1))
            .collect();
        q.matmul(&Tensor::diag(&lam))
            .unwrap()
            .matmul(&q.transpose().unwrap())
            .unwrap()
            .symmetrized()
            .unwrap()
    }

    #[test]
    fn sum_of_squared_eigenvalues_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = well_separated(5, 0.7, &mut rng);
        let eig = sym_eig(&m).unwrap();
        let d_vals: Vec<f64> = eig.eigenvalues.iter().map(|l| 2.0 * l).collect();
        let g = sym_eig_backward(
            &eig,
            &Tensor::zeros([5, 5]),
            &d_vals,
            &EigBackwardConfig::default(),
        )
        .unwrap();
        let fd = fd_symmetric(
            &m,
            &|x| sym_eig(x).unwrap().eigenvalues.iter().map(|l| l * l).sum(),
            1e-5,
        );
        let rel = g.distance(&fd) / fd.frobenius_norm();
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn eigenvector_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = well_separated(5, 0.5, &mut rng);
        let u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Sign-invariant loss: Σ_a c_a (o_a·u)².
        let loss = |x: &Tensor| {
            let e = sym_eig(x).unwrap();
            (0..5)
                .map(|a| {
                    let dot: f64 = (0..5).map(|i| e.basis.get(i, a) * u[i]).sum();
                    c[a] * dot * dot
                })
                .sum::<f64>()
        };
        let eig = sym_eig(&m).unwrap();
        let mut d_basis = Tensor::zeros([5, 5]);
        for a in 0..5 {
            let dot: f64 = (0..5).map(|i| eig.basis.get(i, a) * u[i]).sum();
            for i in 0..5 {
                d_basis.set(i, a, 2.0 * c[a] * dot * u[i]);
            }
        }
        let g = sym_eig_backward(&eig, &d_basis, &[0.0; 5], &EigBackwardConfig::default()).unwrap();
        let fd = fd_symmetric(&m, &loss, 1e-5);
        let rel = g.distance(&fd) / fd.frobenius_norm();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn degenerate_spectrum_gradient_is_bounded() {
        let eig = sym_eig(&Tensor::identity(2)).unwrap();
        let d_basis = Tensor::from_rows(&[vec![0.3, -1.0], vec![0.7, 0.2]]).unwrap();
        let d_vals = [0.5, -0.25];
        let cfg = EigBackwardConfig::default();
        let g = sym_eig_backward(&eig, &d_basis, &d_vals, &cfg).unwrap();
        let upstream = (d_basis.frobenius_norm().powi(2) + 0.5f64.powi(2) + 0.25f64.powi(2)).sqrt();
        assert!(g.all_finite());
        assert!(g.max_abs() <= cfg.k_cap * upstream);
    }

    #[test]
    fn sqrt_clamped_examples() {
        assert_eq!(sqrt_clamped(&[4.0, 1.0, 0.0], 0.0), vec![2.0, 1.0, 0.0]);
        assert_eq!(sqrt_clamped(&[2.0, -0.3], 0.0), vec![2f64.sqrt(), 0.0]);
        let cfg = EigBackwardConfig::default();
        let d = sqrt_clamped_derivative(4.0, &cfg);
        assert_eq!(d, 0.25);
        let h = 1e-6;
        let fd = ((4.0f64 + h).sqrt() - (4.0f64 - h).sqrt()) / (2.0 * h);
        assert!((fd - d).abs() < 1e-9);
        assert_eq!(sqrt_clamped_derivative(-1.0, &cfg), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(EigBackwardConfig::new(0.0).is_err());
        assert_eq!(EigBackwardConfig::default().k_cap, 1e4);
        let bad = EigBackwardConfig {
            eigengap_floor: 1e-4,
            k_cap: 5.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sqrt_operator_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = well_separated(4, 0.6, &mut rng);
        let w = Tensor::new(
            [4, 4],
            (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // Gauge-invariant loss: tr(Wᵀ SᵀS) only depends on O diag(Λ₊) Oᵀ.
        let loss = |x: &Tensor| {
            let s = sqrt_operator(&sym_eig(x).unwrap());
            let sts = s.transpose().unwrap().matmul(&s).unwrap();
            sts.data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let eig = sym_eig(&m).unwrap();
        let s = sqrt_operator(&eig);
        // d tr(Wᵀ SᵀS)/dS = S (W + Wᵀ)
        let wsym = Tensor::new(
            [4, 4],
            w.data()
                .iter()
                .zip(w.transpose().unwrap().data())
                .map(|(a, b)| a + b)
                .collect(),
        )
        .unwrap();
        let d_s = s.matmul(&wsym).unwrap();
        let g = sqrt_operator_backward(&eig, &d_s, &EigBackwardConfig::default()).unwrap();
        let fd = fd_symmetric(&m, &loss, 1e-6);
        let rel = g.distance(&fd) / fd.frobenius_norm();
        assert!(rel < 1e-5, "relative error {rel}");
    }
}
