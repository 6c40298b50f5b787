//! Alternating minimization with a bias-corrected network update.
//!
//! Every step only needs the lag-0 and lag-1 second moments of `vec(X_t)`,
//! so the cost of an outer iteration does not grow with the sample length.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SigmarError};
use crate::kronlin::{self, Mat, Vector};
use crate::model::{self, PanelSeries, SigmarParams, WeightMatrix};
use crate::simulate::stream_rng;

/// How the Lasso penalty is chosen at each outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaGrid {
    /// `points` log-spaced values from `λ_max` down to `λ_max * ratio`.
    Auto { points: usize, ratio: f64 },
    /// Explicit descending grid; BIC picks among its entries.
    Values(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto {
            points: 20,
            ratio: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmaConfig {
    pub max_iter: usize,
    /// Stop once the relative Frobenius change of `Φ` falls below this.
    pub tol: f64,
    pub lambda_grid: LambdaGrid,
    pub lasso_tol: f64,
    pub lasso_max_iter: usize,
    pub bias_correction: bool,
}

impl Default for AmaConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
            lambda_grid: LambdaGrid::default(),
            lasso_tol: 1e-8,
            lasso_max_iter: 10_000,
            bias_correction: true,
        }
    }
}

impl AmaConfig {
    pub fn naive() -> Self {
        Self {
            bias_correction: false,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.tol > 0.0) || !(self.lasso_tol > 0.0) || self.lasso_max_iter == 0 {
            return Err(SigmarError::Validation("iteration limits and tolerances must be positive".into()));
        }
        match &self.lambda_grid {
            LambdaGrid::Auto { points, ratio } => {
                if *points == 0 || !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(SigmarError::Validation("invalid automatic lambda grid".into()));
                }
            }
            LambdaGrid::Values(v) => {
                if v.is_empty() || v.iter().any(|x| !(*x >= 0.0)) || v.windows(2).any(|w| w[1] > w[0]) {
                    return Err(SigmarError::Validation(
                        "lambda grid must be nonempty, nonnegative and descending".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Lag-0 and lag-1 second moments of a panel, conditioning on frame 0.
#[derive(Debug, Clone)]
pub struct Moments {
    pub k: usize,
    pub n: usize,
    /// Number of transitions.
    pub m: usize,
    /// `Σ x_t x_tᵀ`.
    pub s00: Mat,
    /// `Σ x_t x_{t-1}ᵀ`.
    pub s01: Mat,
    /// `Σ x_{t-1} x_{t-1}ᵀ`.
    pub s11: Mat,
}

impl Moments {
    pub fn new(data: &PanelSeries) -> Result<Self> {
        data.require_len(2, "estimation")?;
        let kn = data.k() * data.n();
        let x = data.vectors();
        let mut s00 = Mat::zeros(kn, kn);
        let mut s01 = Mat::zeros(kn, kn);
        let mut s11 = Mat::zeros(kn, kn);
        for t in 1..x.len() {
            s00.ger(1.0, &x[t], &x[t], 1.0);
            s01.ger(1.0, &x[t], &x[t - 1], 1.0);
            s11.ger(1.0, &x[t - 1], &x[t - 1], 1.0);
        }
        Ok(Self {
            k: data.k(),
            n: data.n(),
            m: x.len() - 1,
            s00,
            s01,
            s11,
        })
    }

    fn check_weight(&self, w: &WeightMatrix) -> Result<()> {
        if w.n() != self.n {
            return Err(SigmarError::Dimension(format!(
                "panel has n={}, weight matrix has n={}",
                self.n,
                w.n()
            )));
        }
        Ok(())
    }

    /// `Σ_t ‖G x_t − Φ x_{t-1}‖²`.
    pub fn rss(&self, g: &Mat, phi: &Mat) -> f64 {
        (g * &self.s00).dot(g) - 2.0 * (g * &self.s01).dot(phi) + (phi * &self.s11).dot(phi)
    }
}

/// `Σ_t U_t V Y_tᵀ` (a `k x k` matrix) from `M = Σ_t vec(U_t) vec(Y_t)ᵀ`.
fn contract_outer(m: &Mat, v: &Mat, k: usize) -> Mat {
    let n = v.nrows();
    let mut out = Mat::zeros(k, k);
    for i in 0..n {
        for j in 0..n {
            let vij = v[(i, j)];
            if vij != 0.0 {
                out += m.view((i * k, j * k), (k, k)) * vij;
            }
        }
    }
    out
}

/// `Σ_t U_tᵀ V Y_t` (an `n x n` matrix) from `M = Σ_t vec(U_t) vec(Y_t)ᵀ`.
fn contract_inner(m: &Mat, v: &Mat, n: usize) -> Mat {
    let k = v.nrows();
    Mat::from_fn(n, n, |i, j| m.view((i * k, j * k), (k, k)).dot(v))
}

fn wtw(w: &WeightMatrix) -> Mat {
    w.matrix().transpose() * w.matrix()
}

/// Least-squares `C` given `Φ`: `(Σ X^c_t W X_tᵀ)(Σ X_t WᵀW X_tᵀ)⁻¹`.
pub fn update_c_lse_moments(mo: &Moments, w: &WeightMatrix, phi: &Mat) -> Result<Mat> {
    mo.check_weight(w)?;
    let xc_x = &mo.s00 - phi * mo.s01.transpose();
    let num = contract_outer(&xc_x, w.matrix(), mo.k);
    let den = contract_outer(&mo.s00, &wtw(w), mo.k);
    kronlin::right_divide(&num, &den).map_err(|_| SigmarError::Numerical("singular Γ_w in the C update".into()))
}

pub fn update_c_lse(data: &PanelSeries, w: &WeightMatrix, phi: &Mat) -> Result<Mat> {
    update_c_lse_moments(&Moments::new(data)?, w, phi)
}

/// Moment matrices entering the bias correction, all scaled by `1/(T-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMoments {
    pub gamma_w: Mat,
    pub sig_w: Mat,
    pub sig_w2: Mat,
}

/// Moments built from `Ẽ_t = unvec(G⁻¹ ê_t)`, `ê_t = G x_t − Φ x_{t-1}`.
pub fn residual_moments_from(mo: &Moments, w: &WeightMatrix, c: &Mat, phi: &Mat) -> Result<ResidualMoments> {
    mo.check_weight(w)?;
    let g = model::g_matrix(w, c);
    let pi = kronlin::lu_solve(&g, phi)
        .map_err(|_| SigmarError::Numerical("I - W⊗C is singular in the residual moments".into()))?;
    let pi_s10 = &pi * mo.s01.transpose();
    let ee = &mo.s00 - &pi_s10 - pi_s10.transpose() + &pi * &mo.s11 * pi.transpose();
    let scale = 1.0 / mo.m as f64;
    let ww = wtw(w);
    Ok(ResidualMoments {
        gamma_w: contract_outer(&mo.s00, &ww, mo.k) * scale,
        sig_w: contract_outer(&ee, w.matrix(), mo.k) * scale,
        sig_w2: contract_outer(&ee, &ww, mo.k) * scale,
    })
}

pub fn residual_moments(data: &PanelSeries, w: &WeightMatrix, params: &SigmarParams) -> Result<ResidualMoments> {
    model::check_dims(params, w)?;
    residual_moments_from(&Moments::new(data)?, w, &params.c, &model::phi_of(params)?)
}

/// `(Ĉ^{lse} Γ_w − Σ̃_w)(Γ_w − Σ̃_{w²})⁻¹`.
pub fn bias_correct_c(c_lse: &Mat, m: &ResidualMoments) -> Result<Mat> {
    let num = c_lse * &m.gamma_w - &m.sig_w;
    let den = &m.gamma_w - &m.sig_w2;
    let sv = kronlin::svd(&den)?.singular_values;
    let cond = sv[0] / sv[sv.len() - 1];
    if !cond.is_finite() || cond > 1e14 {
        return Err(SigmarError::Numerical(format!(
            "bias-correction denominator is singular (condition number {cond:.3e})"
        )));
    }
    kronlin::right_divide(&num, &den)
}

/// `Σ_t vec(X^{ab}_t) vec(X_{t-1})ᵀ` with `X^{ab}_t = X_t − C X_t Wᵀ − unvec(S x_{t-1})`.
fn ab_cross(mo: &Moments, w: &WeightMatrix, c: &Mat, s: &Mat) -> Mat {
    model::g_matrix(w, c) * &mo.s01 - s * &mo.s11
}

pub fn update_a_moments(mo: &Moments, w: &WeightMatrix, c: &Mat, b: &Mat, s: &Mat) -> Result<Mat> {
    mo.check_weight(w)?;
    a_given_b(mo, &ab_cross(mo, w, c, s), b)
}

/// Least-squares `A` for `Σ ‖Y_t − A X_{t-1} Bᵀ‖²` with `cross = Σ vec(Y_t) vec(X_{t-1})ᵀ`.
pub(crate) fn a_given_b(mo: &Moments, cross: &Mat, b: &Mat) -> Result<Mat> {
    let num = contract_outer(cross, b, mo.k);
    let den = contract_outer(&mo.s11, &(b.transpose() * b), mo.k);
    kronlin::right_divide(&num, &den).map_err(|_| SigmarError::Numerical("singular Gram matrix in the A update".into()))
}

pub fn update_b_moments(mo: &Moments, w: &WeightMatrix, c: &Mat, a: &Mat, s: &Mat) -> Result<Mat> {
    mo.check_weight(w)?;
    b_given_a(mo, &ab_cross(mo, w, c, s), a)
}

pub(crate) fn b_given_a(mo: &Moments, cross: &Mat, a: &Mat) -> Result<Mat> {
    let num = contract_inner(cross, a, mo.n);
    let den = contract_inner(&mo.s11, &(a.transpose() * a), mo.n);
    kronlin::right_divide(&num, &den).map_err(|_| SigmarError::Numerical("singular Gram matrix in the B update".into()))
}

pub fn update_a(data: &PanelSeries, w: &WeightMatrix, c: &Mat, b: &Mat, s: &Mat) -> Result<Mat> {
    update_a_moments(&Moments::new(data)?, w, c, b, s)
}

pub fn update_b(data: &PanelSeries, w: &WeightMatrix, c: &Mat, a: &Mat, s: &Mat) -> Result<Mat> {
    update_b_moments(&Moments::new(data)?, w, c, a, s)
}

/// Sufficient statistics of the Lasso for `S` given `(C, A, B)`.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    /// `Σ x_{t-1} x_{t-1}ᵀ`, shared by every row.
    pub gram: Mat,
    /// `Σ y_t x_{t-1}ᵀ` with `y_t = vec(X^s_t)`.
    pub cross: Mat,
    /// `Σ y_tᵀ y_t`.
    pub yy: f64,
    /// Number of scalar observations `kn(T-1)`.
    pub n_obs: usize,
}

impl LassoProblem {
    pub fn new(mo: &Moments, w: &WeightMatrix, c: &Mat, a: &Mat, b: &Mat) -> Result<Self> {
        mo.check_weight(w)?;
        let g = model::g_matrix(w, c);
        let kab = kronlin::kron(b, a);
        Ok(Self {
            gram: mo.s11.clone(),
            cross: &g * &mo.s01 - &kab * &mo.s11,
            yy: mo.rss(&g, &kab),
            n_obs: mo.k * mo.n * mo.m,
        })
    }

    /// Smallest penalty giving `S = 0`.
    pub fn lambda_max(&self) -> f64 {
        2.0 * self.cross.amax()
    }

    pub fn rss(&self, s: &Mat) -> f64 {
        self.yy - 2.0 * s.dot(&self.cross) + (s * &self.gram).dot(s)
    }

    /// Largest violation of the Lasso optimality conditions at `s`.
    pub fn kkt_violation(&self, s: &Mat, lambda: f64) -> f64 {
        // ∂RSS/∂S = 2(S H − cross).
        let grad = (s * &self.gram - &self.cross) * 2.0;
        let mut worst: f64 = 0.0;
        for (g, v) in grad.iter().zip(s.iter()) {
            let viol = if *v == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g + lambda * v.signum()).abs()
            };
            worst = worst.max(viol);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoInfo {
    pub sweeps: usize,
    pub kkt_violation: f64,
    pub converged: bool,
}

/// Exact solution on the current support and sign pattern:
/// `H_AA z = c_A − (λ/2) sgn(row_A)`. Returns the candidate and its KKT
/// violation when the signs are reproduced.
fn polish_row(h: &Mat, c: &Vector, row: &Vector, half: f64, lambda: f64) -> Option<(Vector, f64)> {
    let active: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let m = active.len();
    let h_aa = Mat::from_fn(m, m, |a, b| h[(active[a], active[b])]);
    let rhs = Vector::from_fn(m, |a, _| c[active[a]] - half * row[active[a]].signum());
    let z = h_aa.cholesky()?.solve(&rhs);
    let mut cand = Vector::zeros(row.len());
    for (a, &j) in active.iter().enumerate() {
        if z[a].signum() != row[j].signum() || z[a] == 0.0 {
            return None;
        }
        cand[j] = z[a];
    }
    let r = c - h * &cand;
    let mut viol = 0.0f64;
    for j in 0..row.len() {
        let g = -2.0 * r[j];
        let v = if cand[j] == 0.0 {
            (g.abs() - lambda).max(0.0)
        } else {
            (g + lambda * cand[j].signum()).abs()
        };
        viol = viol.max(v);
    }
    Some((cand, viol))
}

/// Row-wise cyclic coordinate descent, warm-started at `warm`, with an exact
/// active-set solve once the support settles.
pub fn solve_lasso(prob: &LassoProblem, lambda: f64, warm: &Mat, tol: f64, max_iter: usize) -> (Mat, LassoInfo) {
    let kn = prob.gram.nrows();
    if lambda >= prob.lambda_max() {
        // Zero is optimal; descent from a nonzero warm start can leave rounding residue.
        let info = LassoInfo {
            sweeps: 0,
            kkt_violation: prob.kkt_violation(&Mat::zeros(kn, kn), lambda),
            converged: true,
        };
        return (Mat::zeros(kn, kn), info);
    }
    let h = &prob.gram;
    let half = lambda / 2.0;
    let mut s = warm.clone();
    let mut max_sweeps = 0;
    let mut worst: f64 = 0.0;
    let mut converged = true;
    for i in 0..kn {
        let c = prob.cross.row(i).transpose();
        let mut row = s.row(i).transpose();
        let mut sweeps = 0;
        let mut viol;
        loop {
            let mut r = &c - h * &row;
            // Optimality check on a freshly computed gradient.
            viol = 0.0f64;
            for j in 0..kn {
                let g = -2.0 * r[j];
                let v = if row[j] == 0.0 {
                    (g.abs() - lambda).max(0.0)
                } else {
                    (g + lambda * row[j].signum()).abs()
                };
                viol = viol.max(v);
            }
            if viol <= tol || sweeps >= max_iter {
                break;
            }
            if sweeps > 0 {
                if let Some((polished, v)) = polish_row(h, &c, &row, half, lambda) {
                    if v <= tol {
                        row = polished;
                        viol = v;
                        break;
                    }
                }
            }
            sweeps += 1;
            for j in 0..kn {
                let hjj = h[(j, j)];
                let old = row[j];
                let new = if hjj > 0.0 {
                    kronlin::soft_threshold(r[j] + hjj * old, half) / hjj
                } else {
                    0.0
                };
                if new != old {
                    r.axpy(old - new, &h.column(j), 1.0);
                    row[j] = new;
                }
            }
        }
        if viol > tol {
            converged = false;
        }
        max_sweeps = max_sweeps.max(sweeps);
        worst = worst.max(viol);
        s.set_row(i, &row.transpose());
    }
    if !converged {
        log::warn!("Lasso stopped after {max_sweeps} sweeps with KKT violation {worst:.3e}");
    }
    (
        s,
        LassoInfo {
            sweeps: max_sweeps,
            kkt_violation: worst,
            converged,
        },
    )
}

pub fn update_s_lasso_moments(
    mo: &Moments,
    w: &WeightMatrix,
    c: &Mat,
    a: &Mat,
    b: &Mat,
    lambda: f64,
    cfg: &AmaConfig,
) -> Result<Mat> {
    if !(lambda >= 0.0) {
        return Err(SigmarError::Validation(format!("lambda = {lambda} must be nonnegative")));
    }
    let prob = LassoProblem::new(mo, w, c, a, b)?;
    let kn = mo.k * mo.n;
    Ok(solve_lasso(&prob, lambda, &Mat::zeros(kn, kn), cfg.lasso_tol, cfg.lasso_max_iter).0)
}

pub fn update_s_lasso(
    data: &PanelSeries,
    w: &WeightMatrix,
    c: &Mat,
    a: &Mat,
    b: &Mat,
    lambda: f64,
) -> Result<Mat> {
    update_s_lasso_moments(&Moments::new(data)?, w, c, a, b, lambda, &AmaConfig::default())
}

/// `N ln(RSS/N) + df ln N`.
pub fn bic(rss: f64, df: usize, n_obs: usize) -> f64 {
    let n = n_obs as f64;
    n * (rss / n).ln() + df as f64 * n.ln()
}

#[derive(Debug, Clone)]
pub struct BicSelection {
    pub lambda: f64,
    pub s: Mat,
    pub bic: f64,
    /// `(λ, BIC, support size)` along the path.
    pub path: Vec<(f64, f64, usize)>,
}

fn grid_for(prob: &LassoProblem, grid: &LambdaGrid) -> Vec<f64> {
    match grid {
        LambdaGrid::Values(v) => v.clone(),
        LambdaGrid::Auto { points, ratio } => {
            let top = prob.lambda_max();
            if *points == 1 {
                return vec![top];
            }
            (0..*points)
                .map(|i| top * ratio.powf(i as f64 / (*points - 1) as f64))
                .collect()
        }
    }
}

/// Warm-started Lasso path over the grid; returns the BIC minimizer
/// (earliest on ties).
pub fn select_lambda(prob: &LassoProblem, grid: &LambdaGrid, cfg: &AmaConfig) -> BicSelection {
    let kn = prob.gram.nrows();
    let lambdas = grid_for(prob, grid);
    let mut warm = Mat::zeros(kn, kn);
    let mut best: Option<BicSelection> = None;
    let mut path = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let (s, _) = solve_lasso(prob, lambda, &warm, cfg.lasso_tol, cfg.lasso_max_iter);
        let df = s.iter().filter(|x| **x != 0.0).count();
        let rss = prob.rss(&s).max(f64::MIN_POSITIVE);
        let score = bic(rss, df, prob.n_obs);
        path.push((lambda, score, df));
        if best.as_ref().is_none_or(|b| score < b.bic) {
            best = Some(BicSelection {
                lambda,
                s: s.clone(),
                bic: score,
                path: Vec::new(),
            });
        }
        warm = s;
    }
    let mut best = best.expect("grid is nonempty");
    best.path = path;
    best
}

pub fn bic_select_lambda(
    data: &PanelSeries,
    w: &WeightMatrix,
    c: &Mat,
    a: &Mat,
    b: &Mat,
    grid: &LambdaGrid,
) -> Result<f64> {
    let cfg = AmaConfig {
        lambda_grid: grid.clone(),
        ..AmaConfig::default()
    };
    cfg.validate()?;
    let prob = LassoProblem::new(&Moments::new(data)?, w, c, a, b)?;
    Ok(select_lambda(&prob, grid, &cfg).lambda)
}

/// `Σ‖X_t − C X_t Wᵀ − A X_{t-1} Bᵀ − unvec(S x_{t-1})‖² + λ‖vec S‖₁`.
pub fn surrogate_objective(mo: &Moments, w: &WeightMatrix, p: &SigmarParams, lambda: f64) -> Result<f64> {
    let g = model::g_matrix(w, &p.c);
    let phi = model::phi_of(p)?;
    let l1: f64 = p.s.iter().map(|x| x.abs()).sum();
    Ok(mo.rss(&g, &phi) + lambda * l1)
}

/// Algorithm initialization: standard normal `A`, `B` (normalized), zero `C`, `S`.
pub fn random_init(k: usize, n: usize, seed: u64) -> Result<SigmarParams> {
    let mut rng = stream_rng(seed, 0x1417);
    let a = Mat::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let b = Mat::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let (a, b) = model::normalize_ab(&a, &b)?;
    Ok(SigmarParams {
        a,
        b,
        c: Mat::zeros(k, k),
        s: Mat::zeros(k * n, k * n),
        sigma2: 1.0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmaTraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub rel_change: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct AmaFit {
    pub params: SigmarParams,
    pub trace: Vec<AmaTraceRow>,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations where the corrected `C` was singular or unstable and the
    /// previous `C` was kept.
    pub bc_fallbacks: usize,
}

/// Run the alternating minimization from `init`.
pub fn fit_amabc(data: &PanelSeries, w: &WeightMatrix, init: &SigmarParams, cfg: &AmaConfig) -> Result<AmaFit> {
    cfg.validate()?;
    model::check_dims(init, w)?;
    let mo = Moments::new(data)?;
    if init.k() != mo.k {
        return Err(SigmarError::Dimension("init has the wrong k".into()));
    }
    let kn = mo.k * mo.n;

    let mut a = init.a.clone();
    let mut b = init.b.clone();
    let mut s = init.s.clone();
    let mut phi = model::phi_of(init)?;
    // The network matrix used to form Ẽ_t: the initial C, then the previous
    // corrected estimate.
    let mut c_prev = init.c.clone();
    let mut c = init.c.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut bc_fallbacks = 0;

    for j in 0..cfg.max_iter {
        let ctx = format!("iteration {j}");
        let c_lse = update_c_lse_moments(&mo, w, &phi).map_err(|e| e.context(&ctx))?;
        c = if cfg.bias_correction {
            let rm = residual_moments_from(&mo, w, &c_prev, &phi).map_err(|e| e.context(&ctx))?;
            match bias_correct_c(&c_lse, &rm) {
                Ok(c_bc) if network_radius(w, &c_bc)? < 1.0 - model::STATIONARITY_MARGIN => c_bc,
                outcome => {
                    log::debug!("{ctx}: bias correction rejected ({}); keeping previous C", match outcome {
                        Ok(_) => "corrected C is not stable".to_string(),
                        Err(e) => e.to_string(),
                    });
                    bc_fallbacks += 1;
                    c_prev.clone()
                }
            }
        } else {
            c_lse
        };

        let a_new = update_a_moments(&mo, w, &c, &b, &s).map_err(|e| e.context(&ctx))?;
        let b_new = update_b_moments(&mo, w, &c, &a_new, &s).map_err(|e| e.context(&ctx))?;
        let (a_n, b_n) = model::normalize_ab(&a_new, &b_new).map_err(|e| e.context(&ctx))?;
        a = a_n;
        b = b_n;

        let prob = LassoProblem::new(&mo, w, &c, &a, &b)?;
        let sel = select_lambda(&prob, &cfg.lambda_grid, cfg);
        s = sel.s;

        let phi_new = kronlin::kron(&b, &a) + &s;
        let rel_change = (&phi_new - &phi).norm() / phi.norm().max(f64::MIN_POSITIVE);
        phi = phi_new;
        c_prev = c.clone();
        iterations = j + 1;

        let g = model::g_matrix(w, &c);
        let l1: f64 = s.iter().map(|x| x.abs()).sum();
        trace.push(AmaTraceRow {
            iteration: iterations,
            objective: mo.rss(&g, &phi) + sel.lambda * l1,
            rel_change,
            lambda: sel.lambda,
        });
        if rel_change < cfg.tol {
            converged = true;
            break;
        }
    }

    if bc_fallbacks > 0 {
        log::info!("bias correction rejected in {bc_fallbacks} of {iterations} iterations");
    }
    let g = model::g_matrix(w, &c);
    let sigma2 = mo.rss(&g, &phi) / (kn * mo.m) as f64;
    Ok(AmaFit {
        params: SigmarParams { a, b, c, s, sigma2 },
        trace,
        iterations,
        converged,
        bc_fallbacks,
    })
}

/// `ρ(W ⊗ C) = ρ(W) ρ(C)`.
fn network_radius(w: &WeightMatrix, c: &Mat) -> Result<f64> {
    let rho_w = w.eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    Ok(rho_w * kronlin::spectral_radius(c)?)
}

/// Trace as CSV with columns `iteration,objective,rel_change`.
pub fn write_trace_csv<W: std::io::Write>(trace: &[AmaTraceRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["iteration", "objective", "rel_change"])?;
    for row in trace {
        wtr.write_record(&[
            row.iteration.to_string(),
            row.objective.to_string(),
            row.rel_change.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_coefficients, gen_design, gen_weight, simulate_series, DgpSpec};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn design(k: usize, n: usize, s: usize, t: usize, seed: u64) -> (WeightMatrix, SigmarParams, PanelSeries) {
        let (w, p, _) = gen_design(&DgpSpec::new(k, n, s, t, seed)).unwrap();
        let x = simulate_series(&p, &w, t, 200, seed + 100).unwrap();
        (w, p, x)
    }

    /// Moments of noise-free transition pairs `(x, Π x)` with random `x`.
    fn exact_pair_moments(p: &SigmarParams, w: &WeightMatrix, pairs: usize, seed: u64) -> Moments {
        use rand::SeedableRng;
        let rf = model::reduced_form(p, w).unwrap();
        let kn = p.k() * p.n();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mo = Moments {
            k: p.k(),
            n: p.n(),
            m: pairs,
            s00: Mat::zeros(kn, kn),
            s01: Mat::zeros(kn, kn),
            s11: Mat::zeros(kn, kn),
        };
        for _ in 0..pairs {
            let x0 = kronlin::Vector::from_fn(kn, |_, _| StandardNormal.sample(&mut rng));
            let x1 = &rf.pi * &x0;
            mo.s00.ger(1.0, &x1, &x1, 1.0);
            mo.s01.ger(1.0, &x1, &x0, 1.0);
            mo.s11.ger(1.0, &x0, &x0, 1.0);
        }
        mo
    }

    #[test]
    fn contractions_match_explicit_sums() {
        let (w, _, x) = design(2, 3, 3, 40, 1);
        let mo = Moments::new(&x).unwrap();
        let v = dmatrix![0.3, -1.0, 0.2; 0.5, 0.0, 1.5; -0.7, 0.4, 0.1];
        let a = dmatrix![0.2, -0.4; 1.1, 0.3];
        let mut outer = Mat::zeros(2, 2);
        let mut inner = Mat::zeros(3, 3);
        for t in 1..x.len() {
            outer += x.frame(t) * &v * x.frame(t - 1).transpose();
            inner += x.frame(t).transpose() * &a * x.frame(t - 1);
        }
        assert_relative_eq!(contract_outer(&mo.s01, &v, 2), outer, epsilon = 1e-10);
        assert_relative_eq!(contract_inner(&mo.s01, &a, 3), inner, epsilon = 1e-10);
        let _ = w;
    }

    #[test]
    fn c_lse_exact_without_noise() {
        let w = gen_weight(3, 2).unwrap();
        let p = gen_coefficients(&DgpSpec::new(2, 3, 3, 10, 2), &w).unwrap();
        let mo = exact_pair_moments(&p, &w, 40, 2);
        let c_hat = update_c_lse_moments(&mo, &w, &model::phi_of(&p).unwrap()).unwrap();
        assert_relative_eq!(c_hat, p.c, epsilon = 1e-10);
    }

    #[test]
    fn residual_moments_match_explicit_kronecker() {
        let (w, p, x) = design(2, 3, 3, 80, 3);
        let rm = residual_moments(&x, &w, &p).unwrap();
        let g = model::g_matrix(&w, &p.c);
        let phi = model::phi_of(&p).unwrap();
        let ginv = g.clone().try_inverse().unwrap();
        let m = (x.len() - 1) as f64;
        let mut big = Mat::zeros(4, 9);
        let mut gamma = Mat::zeros(2, 2);
        let wm = w.matrix();
        for t in 1..x.len() {
            let e_hat = &g * kronlin::vec(x.frame(t)) - &phi * kronlin::vec(x.frame(t - 1));
            let e = Mat::from_column_slice(2, 3, (&ginv * e_hat).as_slice());
            big += kronlin::kron(&e, &e);
            gamma += x.frame(t) * wm.transpose() * wm * x.frame(t).transpose();
        }
        big /= m;
        let sig_w = big.clone() * kronlin::vec(wm);
        assert_relative_eq!(kronlin::vec(&rm.sig_w), sig_w, epsilon = 1e-10);
        let ww = wm.transpose() * wm;
        assert_relative_eq!(kronlin::vec(&rm.sig_w2), big * kronlin::vec(&ww), epsilon = 1e-10);
        assert_relative_eq!(rm.gamma_w, gamma / m, epsilon = 1e-10);
    }

    #[test]
    fn identity_network_moments_coincide() {
        let (_, mut p, x) = design(2, 3, 0, 50, 4);
        let w = WeightMatrix::new(Mat::identity(3, 3)).unwrap();
        p.c = dmatrix![0.2, 0.0; 0.1, 0.3];
        let rm = residual_moments(&x, &w, &p).unwrap();
        assert_relative_eq!(rm.sig_w, rm.sig_w2, epsilon = 1e-12);
    }

    #[test]
    fn zero_residuals_give_zero_moments() {
        let w = gen_weight(3, 5).unwrap();
        let p = gen_coefficients(&DgpSpec::new(2, 3, 3, 10, 5), &w).unwrap();
        let rf = model::reduced_form(&p, &w).unwrap();
        let mut frames = vec![Mat::from_fn(2, 3, |i, j| (i + 2 * j) as f64 - 2.0)];
        for _ in 0..20 {
            let v = &rf.pi * kronlin::vec(frames.last().unwrap());
            frames.push(Mat::from_column_slice(2, 3, v.as_slice()));
        }
        let x = PanelSeries::new(frames).unwrap();
        let rm = residual_moments(&x, &w, &p).unwrap();
        assert!(rm.sig_w.amax() < 1e-12 && rm.sig_w2.amax() < 1e-12);
    }

    #[test]
    fn bias_correction_arithmetic() {
        let rm = ResidualMoments {
            gamma_w: dmatrix![2.0],
            sig_w: dmatrix![0.3],
            sig_w2: dmatrix![0.5],
        };
        assert_relative_eq!(bias_correct_c(&dmatrix![0.7], &rm).unwrap()[(0, 0)], 1.1 / 1.5, epsilon = 1e-15);

        let c = dmatrix![0.3, 0.1; -0.2, 0.4];
        let zero = ResidualMoments {
            gamma_w: dmatrix![2.0, 0.3; 0.3, 1.0],
            sig_w: Mat::zeros(2, 2),
            sig_w2: Mat::zeros(2, 2),
        };
        assert_relative_eq!(bias_correct_c(&c, &zero).unwrap(), c, epsilon = 1e-14);

        let singular = ResidualMoments {
            gamma_w: dmatrix![1.0],
            sig_w: dmatrix![0.0],
            sig_w2: dmatrix![1.0],
        };
        assert!(matches!(bias_correct_c(&c.view((0, 0), (1, 1)).into_owned(), &singular), Err(SigmarError::Numerical(_))));
    }

    #[test]
    fn a_and_b_updates_without_noise() {
        let w = gen_weight(3, 6).unwrap();
        let p = gen_coefficients(&DgpSpec::new(2, 3, 3, 10, 6), &w).unwrap();
        let mo = exact_pair_moments(&p, &w, 40, 6);
        let a = update_a_moments(&mo, &w, &p.c, &p.b, &p.s).unwrap();
        assert_relative_eq!(kronlin::kron(&p.b, &a), kronlin::kron(&p.b, &p.a), epsilon = 1e-8);
        let b = update_b_moments(&mo, &w, &p.c, &p.a, &p.s).unwrap();
        assert_relative_eq!(kronlin::kron(&b, &p.a), kronlin::kron(&p.b, &p.a), epsilon = 1e-8);
    }

    #[test]
    fn a_update_reduces_to_stacked_ols() {
        let (w, _, x) = design(2, 3, 0, 60, 7);
        let b = Mat::identity(3, 3);
        let a = update_a(&x, &w, &Mat::zeros(2, 2), &b, &Mat::zeros(6, 6)).unwrap();
        let mut num = Mat::zeros(2, 2);
        let mut den = Mat::zeros(2, 2);
        for t in 1..x.len() {
            num += x.frame(t) * x.frame(t - 1).transpose();
            den += x.frame(t - 1) * x.frame(t - 1).transpose();
        }
        assert_relative_eq!(a, num * den.try_inverse().unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn degenerate_lag_is_an_error() {
        let x = PanelSeries::new(vec![Mat::zeros(2, 3); 10]).unwrap();
        let w = gen_weight(3, 0).unwrap();
        let r = update_a(&x, &w, &Mat::zeros(2, 2), &Mat::identity(3, 3), &Mat::zeros(6, 6));
        assert!(matches!(r, Err(SigmarError::Numerical(_))));
    }

    #[test]
    fn lasso_null_threshold_and_least_squares_limit() {
        let (w, p, x) = design(2, 3, 4, 300, 8);
        let mo = Moments::new(&x).unwrap();
        let prob = LassoProblem::new(&mo, &w, &p.c, &p.a, &p.b).unwrap();
        let lmax = prob.lambda_max();
        let zero = Mat::zeros(6, 6);
        let (s, _) = solve_lasso(&prob, lmax, &zero, 1e-8, 10_000);
        assert!(s.iter().all(|v| *v == 0.0));
        let (s, _) = solve_lasso(&prob, lmax * 1.5, &Mat::identity(6, 6), 1e-8, 10_000);
        assert!(s.iter().all(|v| *v == 0.0));

        let (s, info) = solve_lasso(&prob, 0.0, &zero, 1e-9, 100_000);
        assert!(info.converged);
        let ls = kronlin::right_divide(&prob.cross, &prob.gram).unwrap();
        assert_relative_eq!(s, ls, epsilon = 1e-6);
    }

    #[test]
    fn lasso_kkt_holds() {
        let (w, p, x) = design(3, 4, 10, 500, 9);
        let mo = Moments::new(&x).unwrap();
        let prob = LassoProblem::new(&mo, &w, &p.c, &p.a, &p.b).unwrap();
        for frac in [0.5, 0.1, 0.01] {
            let lambda = prob.lambda_max() * frac;
            let (s, info) = solve_lasso(&prob, lambda, &Mat::zeros(12, 12), 1e-8, 10_000);
            assert!(info.converged);
            assert!(prob.kkt_violation(&s, lambda) <= 1e-6);
        }
    }

    #[test]
    fn single_point_grid_is_returned() {
        let (w, p, x) = design(2, 3, 3, 100, 10);
        let lambda = bic_select_lambda(&x, &w, &p.c, &p.a, &p.b, &LambdaGrid::Values(vec![3.5])).unwrap();
        assert_eq!(lambda, 3.5);
        assert!(bic_select_lambda(&x, &w, &p.c, &p.a, &p.b, &LambdaGrid::Values(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn substeps_do_not_increase_the_surrogate() {
        let (w, _, x) = design(3, 4, 10, 400, 11);
        let mo = Moments::new(&x).unwrap();
        let mut p = random_init(3, 4, 11).unwrap();
        p.c = update_c_lse_moments(&mo, &w, &model::phi_of(&p).unwrap()).unwrap();
        let lambda = 50.0;
        let cfg = AmaConfig::default();
        for _ in 0..5 {
            let before = surrogate_objective(&mo, &w, &p, lambda).unwrap();
            p.a = update_a_moments(&mo, &w, &p.c, &p.b, &p.s).unwrap();
            let after_a = surrogate_objective(&mo, &w, &p, lambda).unwrap();
            p.b = update_b_moments(&mo, &w, &p.c, &p.a, &p.s).unwrap();
            let after_b = surrogate_objective(&mo, &w, &p, lambda).unwrap();
            let (a, b) = model::normalize_ab(&p.a, &p.b).unwrap();
            let kron_before = kronlin::kron(&p.b, &p.a);
            p.a = a;
            p.b = b;
            assert_relative_eq!(kronlin::kron(&p.b, &p.a), kron_before, max_relative = 1e-12, epsilon = 1e-14);
            p.s = update_s_lasso_moments(&mo, &w, &p.c, &p.a, &p.b, lambda, &cfg).unwrap();
            let after_s = surrogate_objective(&mo, &w, &p, lambda).unwrap();
            let slack = 1e-9 * before.abs();
            assert!(after_a <= before + slack);
            assert!(after_b <= after_a + slack);
            assert!(after_s <= after_b + slack);
            p.c = update_c_lse_moments(&mo, &w, &model::phi_of(&p).unwrap()).unwrap();
        }
    }

    #[test]
    fn naive_fit_runs_from_random_start() {
        let (w, p, x) = design(3, 4, 10, 1000, 7);
        let init = random_init(3, 4, 1).unwrap();
        let fit = fit_amabc(&x, &w, &init, &AmaConfig::naive()).unwrap();
        let pi0 = model::reduced_form(&p, &w).unwrap().pi;
        let pi = model::reduced_form(&fit.params, &w).unwrap().pi;
        let err = (&pi - &pi0).norm() / pi0.norm();
        assert!(err < 0.3, "relative Π error {err}");
        assert_eq!(fit.bc_fallbacks, 0);
        assert!(!fit.trace.is_empty());
        let mut buf = Vec::new();
        write_trace_csv(&fit.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,objective,rel_change\n"));
        assert_eq!(text.lines().count(), fit.trace.len() + 1);
    }
}
