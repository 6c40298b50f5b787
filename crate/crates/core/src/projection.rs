//! Kronecker-plus-sparse decomposition of an unstructured transition matrix.
//!
//! `Φ` is rearranged so that `B ⊗ A` becomes the rank-one matrix
//! `vec(B) vec(A)ᵀ`; a low-rank plus sparse split of the rearranged matrix is
//! then computed by alternating directions on the augmented Lagrangian.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SigmarError};
use crate::kronlin::{self, BlockShape, Mat};
use crate::model::{self, mat_to_rows};

/// Entries of `S` at or below this magnitude are reported as zero.
pub const SUPPORT_TOL: f64 = 1e-8;

/// `None` fields fall back to the data-driven defaults
/// `λ = 1/√(kn)` and `μ = k²n² / (4‖vec Φ̃‖₁)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            mu: None,
            tol: 1e-7,
            max_iter: 1000,
        }
    }
}

impl AdmmConfig {
    fn validate(&self) -> Result<()> {
        let positive = |x: Option<f64>| x.is_none_or(|v| v > 0.0 && v.is_finite());
        if !positive(self.lambda) || !positive(self.mu) || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(SigmarError::Validation("ADMM settings must be positive".into()));
        }
        Ok(())
    }

    /// `(λ, μ)` for a rearranged input of size `n² x k²`.
    pub fn resolve(&self, phi_tilde: &Mat) -> (f64, f64) {
        let dim = (phi_tilde.nrows() * phi_tilde.ncols()) as f64;
        let lambda = self.lambda.unwrap_or(1.0 / dim.sqrt().sqrt());
        let l1: f64 = phi_tilde.iter().map(|x| x.abs()).sum();
        let mu = self.mu.unwrap_or(dim / (4.0 * l1));
        (lambda, mu)
    }
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub l: Mat,
    pub s: Mat,
    pub y: Mat,
}

impl AdmmState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            l: Mat::zeros(rows, cols),
            s: Mat::zeros(rows, cols),
            y: Mat::zeros(rows, cols),
        }
    }
}

/// One sweep of the three updates. Returns `‖L‖_*` of the new `L`.
pub fn admm_step(phi_tilde: &Mat, state: &mut AdmmState, lambda: f64, mu: f64) -> Result<f64> {
    let inv_mu = 1.0 / mu;
    let target = phi_tilde - &state.s + &state.y * inv_mu;
    let svd = kronlin::svd(&target)?;
    let mut l = Mat::zeros(target.nrows(), target.ncols());
    let mut nuclear = 0.0;
    for (i, &sv) in svd.singular_values.iter().enumerate() {
        let shrunk = sv - inv_mu;
        if shrunk <= 0.0 {
            break;
        }
        nuclear += shrunk;
        l += svd.u.column(i) * svd.v_t.row(i) * shrunk;
    }
    state.l = l;
    let target = phi_tilde - &state.l + &state.y * inv_mu;
    state.s = kronlin::soft_threshold_mat(&target, lambda * inv_mu);
    state.y += (phi_tilde - &state.l - &state.s) * mu;
    Ok(nuclear)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmmDiagnostics {
    pub lambda: f64,
    pub mu: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub converged: bool,
    /// `‖L‖_* + λ‖vec S̃‖₁` after each iteration.
    pub objective: Vec<f64>,
}

/// Split `phi_tilde` into low-rank `L` plus sparse `S̃`.
pub fn admm_lowrank_sparse(phi_tilde: &Mat, cfg: &AdmmConfig) -> Result<(Mat, Mat, AdmmDiagnostics)> {
    cfg.validate()?;
    let (rows, cols) = phi_tilde.shape();
    let (lambda, mu) = cfg.resolve(phi_tilde);
    let mut state = AdmmState::zeros(rows, cols);
    let scale = phi_tilde.norm().max(1.0);

    if phi_tilde.iter().all(|&x| x == 0.0) {
        let diag = AdmmDiagnostics {
            lambda,
            mu,
            iterations: 1,
            primal_residual: 0.0,
            converged: true,
            objective: vec![0.0],
        };
        return Ok((state.l, state.s, diag));
    }

    let mut objective = Vec::new();
    let mut primal = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let prev_l = state.l.clone();
        let prev_s = state.s.clone();
        let nuclear = admm_step(phi_tilde, &mut state, lambda, mu)?;
        iterations += 1;
        let l1: f64 = state.s.iter().map(|x| x.abs()).sum();
        objective.push(nuclear + lambda * l1);

        primal = (phi_tilde - &state.l - &state.s).norm() / scale;
        let change = ((&state.l - prev_l).norm_squared() + (&state.s - prev_s).norm_squared()).sqrt()
            / scale;
        if primal <= cfg.tol && change <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("ADMM stopped after {iterations} iterations with residual {primal:.3e}");
    }
    let diag = AdmmDiagnostics {
        lambda,
        mu,
        iterations,
        primal_residual: primal,
        converged,
        objective,
    };
    Ok((state.l, state.s, diag))
}

/// `(A, B)` from the leading singular triple of `L`, gauge-normalized.
pub fn extract_ab(l: &Mat, k: usize, n: usize) -> Result<(Mat, Mat)> {
    if l.shape() != (n * n, k * k) {
        return Err(SigmarError::Dimension(format!(
            "L must be {}x{}, got {}x{}",
            n * n,
            k * k,
            l.nrows(),
            l.ncols()
        )));
    }
    if l.iter().all(|&x| x == 0.0) {
        return Err(SigmarError::Degenerate("cannot extract factors from a zero L".into()));
    }
    let svd = kronlin::svd(l)?;
    let s1 = svd.singular_values[0];
    let a = Mat::from_fn(k, k, |i, j| svd.v_t[(0, i + j * k)]);
    let b = Mat::from_fn(n, n, |i, j| s1 * svd.u[(i + j * n, 0)]);
    model::normalize_ab(&a, &b)
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub l: Mat,
    pub s_tilde: Mat,
    pub a: Mat,
    pub b: Mat,
    pub s: Mat,
    /// `‖Φ - B ⊗ A - S‖_F`.
    pub residual: f64,
    pub diagnostics: AdmmDiagnostics,
}

impl ProjectionResult {
    pub fn support_size(&self) -> usize {
        self.s.iter().filter(|x| x.abs() > SUPPORT_TOL).count()
    }
}

#[derive(Serialize)]
struct ProjectionDoc<'a> {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    s: Vec<(usize, usize, f64)>,
    #[serde(rename = "L")]
    l: Vec<Vec<f64>>,
    residual: f64,
    diagnostics: &'a AdmmDiagnostics,
}

impl Serialize for ProjectionResult {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = Vec::new();
        for i in 0..self.s.nrows() {
            for j in 0..self.s.ncols() {
                if self.s[(i, j)].abs() > SUPPORT_TOL {
                    s.push((i, j, self.s[(i, j)]));
                }
            }
        }
        ProjectionDoc {
            a: mat_to_rows(&self.a),
            b: mat_to_rows(&self.b),
            s,
            l: mat_to_rows(&self.l),
            residual: self.residual,
            diagnostics: &self.diagnostics,
        }
        .serialize(serializer)
    }
}

/// Project a `kn x kn` transition onto `B ⊗ A + S`.
pub fn project_phi(phi: &Mat, k: usize, n: usize, cfg: &AdmmConfig) -> Result<ProjectionResult> {
    if phi.shape() != (k * n, k * n) {
        return Err(SigmarError::Dimension(format!(
            "Φ must be {0}x{0}, got {1}x{2}",
            k * n,
            phi.nrows(),
            phi.ncols()
        )));
    }
    let shape = BlockShape::kron_square(n, k);
    let phi_tilde = kronlin::rearrange(phi, shape)?;
    let (l, s_tilde, diagnostics) = admm_lowrank_sparse(&phi_tilde, cfg)?;
    let s = kronlin::rearrange_inv(&s_tilde, shape)?;
    let (a, b) = if l.iter().all(|&x| x == 0.0) {
        (Mat::zeros(k, k), Mat::zeros(n, n))
    } else {
        extract_ab(&l, k, n)?
    };
    let residual = (phi - kronlin::kron(&b, &a) - &s).norm();
    Ok(ProjectionResult {
        l,
        s_tilde,
        a,
        b,
        s,
        residual,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn zero_input() {
        let (l, s, d) = admm_lowrank_sparse(&Mat::zeros(16, 9), &AdmmConfig::default()).unwrap();
        assert_eq!(l, Mat::zeros(16, 9));
        assert_eq!(s, Mat::zeros(16, 9));
        assert_eq!(d.iterations, 1);
        let p = project_phi(&Mat::zeros(12, 12), 3, 4, &AdmmConfig::default()).unwrap();
        assert_eq!(p.a, Mat::zeros(3, 3));
        assert_eq!(p.s, Mat::zeros(12, 12));
    }

    #[test]
    fn iterates_satisfy_prox_characterizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let phi_tilde = normal(&mut rng, 16, 9);
        let (lambda, mu) = AdmmConfig::default().resolve(&phi_tilde);
        let mut state = AdmmState::zeros(16, 9);
        for _ in 0..30 {
            let before = state.clone();
            admm_step(&phi_tilde, &mut state, lambda, mu).unwrap();
            let tau = 1.0 / mu;
            // Nuclear-norm prox: ‖M - L‖₂ ≤ τ and ⟨L, M - L⟩ = τ‖L‖_*.
            let m = &phi_tilde - &before.s + &before.y / mu;
            let resid = &m - &state.l;
            let spec = kronlin::svd(&resid).unwrap().singular_values[0];
            assert!(spec <= tau * (1.0 + 1e-10));
            let nuc: f64 = kronlin::svd(&state.l).unwrap().singular_values.iter().sum();
            assert_relative_eq!(state.l.dot(&resid), tau * nuc, epsilon = 1e-9, max_relative = 1e-8);
            // Soft-threshold prox, entrywise.
            let m = &phi_tilde - &state.l + &before.y / mu;
            let t = lambda / mu;
            for (mi, si) in m.iter().zip(state.s.iter()) {
                if *si == 0.0 {
                    assert!(mi.abs() <= t + 1e-12);
                } else {
                    assert_relative_eq!(mi - si, t * si.signum(), epsilon = 1e-12);
                }
            }
            let y = &before.y + (&phi_tilde - &state.l - &state.s) * mu;
            assert_relative_eq!(state.y, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rank_one_with_huge_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = normal(&mut rng, 16, 1);
        let v = normal(&mut rng, 9, 1);
        let phi_tilde = &u * v.transpose();
        let cfg = AdmmConfig {
            lambda: Some(1e6),
            ..AdmmConfig::default()
        };
        let (l, s, d) = admm_lowrank_sparse(&phi_tilde, &cfg).unwrap();
        assert!(d.converged);
        assert_eq!(s, Mat::zeros(16, 9));
        assert!((&l - &phi_tilde).norm() / phi_tilde.norm() <= cfg.tol);
    }

    #[test]
    fn extract_exact_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a0 = normal(&mut rng, 3, 3);
        let a0 = &a0 / a0.norm();
        let b0 = normal(&mut rng, 4, 4);
        let l = kronlin::vec(&b0) * kronlin::vec(&a0).transpose();
        let (a, b) = extract_ab(&l, 3, 4).unwrap();
        assert_relative_eq!(kronlin::kron(&b, &a), kronlin::kron(&b0, &a0), epsilon = 1e-12);
        assert_relative_eq!(a.norm(), 1.0, epsilon = 1e-14);

        let (a2, b2) = extract_ab(&(&l * 3.0), 3, 4).unwrap();
        assert_relative_eq!(a2, a, epsilon = 1e-12);
        assert_relative_eq!(b2, b * 3.0, epsilon = 1e-12);

        assert!(matches!(extract_ab(&Mat::zeros(16, 9), 3, 4), Err(SigmarError::Degenerate(_))));
    }

    #[test]
    fn extract_rank_two_is_best_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let l = normal(&mut rng, 16, 2) * normal(&mut rng, 2, 9);
        let (a, b) = extract_ab(&l, 3, 4).unwrap();
        let rebuilt = kronlin::vec(&b) * kronlin::vec(&a).transpose();
        let svd = kronlin::svd(&l).unwrap();
        let best = svd.u.column(0) * svd.v_t.row(0) * svd.singular_values[0];
        assert_relative_eq!(rebuilt, best, epsilon = 1e-10);
    }

    #[test]
    fn noiseless_kronecker_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a0 = normal(&mut rng, 3, 3);
        let b0 = normal(&mut rng, 4, 4);
        let (a0, b0) = model::normalize_ab(&a0, &b0).unwrap();
        let phi = kronlin::kron(&b0, &a0);
        let p = project_phi(&phi, 3, 4, &AdmmConfig::default()).unwrap();
        assert!(p.s.norm() < 1e-4, "‖S‖ = {}", p.s.norm());
        assert_relative_eq!(kronlin::kron(&p.b, &p.a), phi, epsilon = 1e-5);
        assert_eq!(kronlin::rearrange_inv(&p.s_tilde, BlockShape::kron_square(4, 3)).unwrap(), p.s);

        // Exact zeros in B leave numerically null columns in the iterates.
        let a = nalgebra::dmatrix![0.5, 0.1; -0.2, 0.3];
        let b = nalgebra::dmatrix![0.4, 0.0, 0.1; 0.2, 0.3, 0.0; 0.0, -0.1, 0.5];
        let phi = kronlin::kron(&b, &a);
        let p = project_phi(&phi, 2, 3, &AdmmConfig::default()).unwrap();
        assert_relative_eq!(kronlin::kron(&p.b, &p.a), phi, epsilon = 1e-6);
    }

    #[test]
    fn json_lists_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let phi = normal(&mut rng, 6, 6);
        let p = project_phi(&phi, 2, 3, &AdmmConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["S"].as_array().unwrap().len(), p.support_size());
        assert_eq!(v["A"].as_array().unwrap().len(), 2);
    }
}
