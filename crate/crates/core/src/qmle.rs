//! Quasi-maximum likelihood for the network matrix autoregression.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SigmarError};
use crate::kronlin::{self, Mat, Vector};
use crate::model::{self, PanelSeries, SigmarParams, ThetaFlat, WeightMatrix};

/// Second-moment sufficient statistics of a panel, conditioning on frame 0.
#[derive(Debug, Clone)]
pub struct LoglikWorkspace {
    k: usize,
    n: usize,
    m: usize,
    w: WeightMatrix,
    /// `Σ x_t x_tᵀ` over `t = 1..T-1`.
    s00: Mat,
    /// `Σ x_t x_{t-1}ᵀ`.
    s01: Mat,
    /// `Σ x_{t-1} x_{t-1}ᵀ`.
    s11: Mat,
}

impl LoglikWorkspace {
    pub fn new(data: &PanelSeries, w: &WeightMatrix) -> Result<Self> {
        if data.n() != w.n() {
            return Err(SigmarError::Dimension(format!(
                "panel has n={}, weight matrix has n={}",
                data.n(),
                w.n()
            )));
        }
        data.require_len(2, "the likelihood")?;
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
            w: w.clone(),
            s00,
            s01,
            s11,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of transitions `T - 1`.
    pub fn transitions(&self) -> usize {
        self.m
    }

    fn total(&self) -> f64 {
        (self.k * self.n * self.m) as f64
    }

    fn check_theta(&self, theta: &ThetaFlat) -> Result<()> {
        if theta.k != self.k || theta.n != self.n {
            return Err(SigmarError::Dimension(format!(
                "theta is for (k, n) = ({}, {}), data is ({}, {})",
                theta.k, theta.n, self.k, self.n
            )));
        }
        if !(theta.sigma2 > 0.0 && theta.sigma2.is_finite()) {
            return Err(SigmarError::Domain(format!(
                "sigma2 = {} must be positive",
                theta.sigma2
            )));
        }
        Ok(())
    }

    /// `Σ v_tᵀ v_t`, `Σ v_t x_tᵀ` and `Σ v_t x_{t-1}ᵀ`.
    fn residual_products(&self, g: &Mat, phi: &Mat) -> (f64, Mat, Mat) {
        let gs00 = g * &self.s00;
        let gs01 = g * &self.s01;
        let phis11 = phi * &self.s11;
        let ss = gs00.dot(g) - 2.0 * gs01.dot(phi) + phis11.dot(phi);
        let vx0 = gs00 - phi * self.s01.transpose();
        let vx1 = gs01 - phis11;
        (ss, vx0, vx1)
    }

    pub fn loglik(&self, theta: &ThetaFlat) -> Result<f64> {
        self.check_theta(theta)?;
        let c = theta.c();
        let logdet = kronlin::logdet_i_minus_kron(self.w.eigenvalues(), &c)?;
        let g = model::g_matrix(&self.w, &c);
        let (ss, _, _) = self.residual_products(&g, &theta.phi());
        Ok(self.assemble(logdet, ss, theta.sigma2))
    }

    fn assemble(&self, logdet: f64, ss: f64, sigma2: f64) -> f64 {
        let nt = self.total();
        -0.5 * nt * (2.0 * std::f64::consts::PI).ln() - 0.5 * nt * sigma2.ln()
            + self.m as f64 * logdet
            - ss / (2.0 * sigma2)
    }

    /// Gradient in the `[vec C; vec Φ; σ²]` layout.
    pub fn grad(&self, theta: &ThetaFlat) -> Result<Vector> {
        self.check_theta(theta)?;
        let c = theta.c();
        kronlin::logdet_i_minus_kron(self.w.eigenvalues(), &c)?;
        let g = model::g_matrix(&self.w, &c);
        let phi = theta.phi();
        let (ss, vx0, vx1) = self.residual_products(&g, &phi);
        let ginv = kronlin::lu_solve(&g, &Mat::identity(g.nrows(), g.ncols()))
            .map_err(|_| SigmarError::Domain("I - W⊗C is singular".into()))?;
        let s2 = theta.sigma2;

        let gc = self.c_block(&vx0, &ginv, s2);
        let gphi = vx1 / s2;
        let gs = (ss - self.total() * s2) / (2.0 * s2 * s2);

        let mut out = Vec::with_capacity(theta.dim());
        out.extend_from_slice(gc.as_slice());
        out.extend_from_slice(gphi.as_slice());
        out.push(gs);
        Ok(Vector::from_vec(out))
    }

    /// C-block of the gradient given `P = Σ v_t x_tᵀ` and `G⁻¹`.
    fn c_block(&self, p: &Mat, ginv: &Mat, sigma2: f64) -> Mat {
        let k = self.k;
        let w = self.w.matrix();
        let mut out = Mat::zeros(k, k);
        for i in 0..self.n {
            for j in 0..self.n {
                let wij = w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                let pb = p.view((i * k, j * k), (k, k));
                let gb = ginv.view((j * k, i * k), (k, k));
                out += (pb / sigma2 - gb.transpose() * self.m as f64) * wij;
            }
        }
        out
    }

    /// Unrestricted least-squares transition `Σ x_t x_{t-1}ᵀ (Σ x_{t-1} x_{t-1}ᵀ)⁻¹`.
    pub fn ols_transition(&self) -> Result<Mat> {
        kronlin::right_divide(&self.s01, &self.s11).map_err(|_| {
            SigmarError::Degenerate("lagged second-moment matrix is singular".into())
        })
    }
}

pub fn loglik(theta: &ThetaFlat, data: &PanelSeries, w: &WeightMatrix) -> Result<f64> {
    LoglikWorkspace::new(data, w)?.loglik(theta)
}

pub fn grad_loglik(theta: &ThetaFlat, data: &PanelSeries, w: &WeightMatrix) -> Result<Vector> {
    LoglikWorkspace::new(data, w)?.grad(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QmleOptions {
    /// Sup-norm gradient tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub compute_se: bool,
}

impl Default for QmleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            compute_se: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QmleReport {
    pub theta_hat: ThetaFlat,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub se: Option<Vec<f64>>,
    pub se_warning: Option<String>,
    /// Profile log-likelihood after each accepted step, starting at the init.
    pub path: Vec<f64>,
}

/// Likelihood with `Φ` and `σ²` maximized out for a given `C`.
struct Profile<'a> {
    ws: &'a LoglikWorkspace,
    ols: Mat,
    /// `Σ r_t r_tᵀ` and `Σ r_t x_tᵀ` for the OLS residuals `r_t`.
    rr: Mat,
    rx: Mat,
}

impl<'a> Profile<'a> {
    fn new(ws: &'a LoglikWorkspace) -> Result<Self> {
        let ols = ws.ols_transition()?;
        let s10 = ws.s01.transpose();
        let rx = &ws.s00 - &ols * &s10;
        let rr = &rx - &ws.s01 * ols.transpose() + &ols * &ws.s11 * ols.transpose();
        let rr = (&rr + rr.transpose()) * 0.5;
        Ok(Self { ws, ols, rr, rx })
    }

    fn c_of(&self, c: &Vector) -> Mat {
        Mat::from_column_slice(self.ws.k, self.ws.k, c.as_slice())
    }

    fn value(&self, c: &Vector) -> Result<f64> {
        let c = self.c_of(c);
        let logdet = kronlin::logdet_i_minus_kron(self.ws.w.eigenvalues(), &c)?;
        let g = model::g_matrix(&self.ws.w, &c);
        let ss = (&g * &self.rr).dot(&g);
        let s2 = ss / self.ws.total();
        if !(s2 > 0.0) {
            return Err(SigmarError::Degenerate("zero residual variance".into()));
        }
        Ok(self.ws.assemble(logdet, ss, s2))
    }

    fn grad(&self, c: &Vector) -> Result<Vector> {
        let cm = self.c_of(c);
        kronlin::logdet_i_minus_kron(self.ws.w.eigenvalues(), &cm)?;
        let g = model::g_matrix(&self.ws.w, &cm);
        let ss = (&g * &self.rr).dot(&g);
        let s2 = ss / self.ws.total();
        let ginv = kronlin::lu_solve(&g, &Mat::identity(g.nrows(), g.ncols()))?;
        let p = &g * &self.rx;
        Ok(kronlin::vec(&self.ws.c_block(&p, &ginv, s2)))
    }

    fn theta(&self, c: &Vector) -> Result<ThetaFlat> {
        let cm = self.c_of(c);
        let g = model::g_matrix(&self.ws.w, &cm);
        let phi = &g * &self.ols;
        let ss = (&g * &self.rr).dot(&g);
        ThetaFlat::new(&cm, &phi, ss / self.ws.total())
    }

    /// Central-difference Jacobian of the profile gradient, symmetrized.
    fn hessian(&self, c: &Vector) -> Result<Mat> {
        let d = c.len();
        let mut h = Mat::zeros(d, d);
        for j in 0..d {
            let step = 1e-5 * c[j].abs().max(1.0);
            let mut up = c.clone();
            up[j] += step;
            let mut dn = c.clone();
            dn[j] -= step;
            let col = (self.grad(&up)? - self.grad(&dn)?) / (2.0 * step);
            h.set_column(j, &col);
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}

/// Maximize the log quasi-likelihood from `init`.
///
/// The search runs over `vec C` with `Φ` and `σ²` concentrated out, using
/// Newton steps on a finite-difference Hessian of the analytic gradient and
/// a backtracking line search that rejects inadmissible points.
pub fn fit_qmle(
    data: &PanelSeries,
    w: &WeightMatrix,
    init: &SigmarParams,
    opts: &QmleOptions,
) -> Result<QmleReport> {
    model::check_dims(init, w)?;
    let ws = LoglikWorkspace::new(data, w)?;
    if init.k() != ws.k {
        return Err(SigmarError::Dimension("init has the wrong k".into()));
    }
    kronlin::logdet_i_minus_kron(w.eigenvalues(), &init.c)
        .map_err(|e| SigmarError::Domain(format!("inadmissible initial C: {e}")))?;
    let profile = Profile::new(&ws)?;

    let mut c = kronlin::vec(&init.c);
    let mut value = profile.value(&c)?;
    let mut path = vec![value];
    let mut iterations = 0;
    let mut grad_norm = ws.grad(&profile.theta(&c)?)?.amax();

    while grad_norm >= opts.tol && iterations < opts.max_iter {
        let g = profile.grad(&c)?;
        let h = profile.hessian(&c)?;
        let direction = match (-&h).cholesky() {
            Some(chol) => chol.solve(&g),
            None => {
                let scale = h.diagonal().amax().max(1.0);
                &g / scale
            }
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &c + &direction * alpha;
            if let Ok(v) = profile.value(&trial) {
                if v > value {
                    accepted = Some((trial, v));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((next, v)) = accepted else {
            log::debug!("line search stalled at iteration {iterations}");
            break;
        };
        c = next;
        value = v;
        path.push(value);
        iterations += 1;
        grad_norm = ws.grad(&profile.theta(&c)?)?.amax();
    }

    let theta_hat = profile.theta(&c)?;
    let loglik = ws.loglik(&theta_hat)?;
    let mut report = QmleReport {
        theta_hat,
        loglik,
        iterations,
        converged: grad_norm < opts.tol,
        grad_norm,
        se: None,
        se_warning: None,
        path,
    };
    if opts.compute_se {
        let se = numeric_se_with(&ws, &report.theta_hat)?;
        report.se = se.se;
        report.se_warning = se.warning;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeResult {
    pub se: Option<Vec<f64>>,
    pub warning: Option<String>,
}

/// Standard errors from the inverse of the negative numerical Hessian of
/// `grad` at `x`.
pub fn hessian_se<F>(grad: F, x: &Vector) -> Result<SeResult>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let d = x.len();
    let mut h = Mat::zeros(d, d);
    for j in 0..d {
        let step = 1e-5 * x[j].abs().max(1.0);
        let mut up = x.clone();
        up[j] += step;
        let mut dn = x.clone();
        dn[j] -= step;
        let col = (grad(&up)? - grad(&dn)?) / (2.0 * step);
        h.set_column(j, &(-col));
    }
    let h = (&h + h.transpose()) * 0.5;
    let Some(inv) = kronlin::spd_inverse(&h) else {
        log::warn!("negative Hessian is not positive definite; no standard errors");
        return Ok(SeResult {
            se: None,
            warning: Some("Hessian is not negative definite".into()),
        });
    };
    let diag = inv.diagonal();
    if diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Ok(SeResult {
            se: None,
            warning: Some("inverse Hessian has nonpositive diagonal".into()),
        });
    }
    Ok(SeResult {
        se: Some(diag.iter().map(|v| v.sqrt()).collect()),
        warning: None,
    })
}

fn numeric_se_with(ws: &LoglikWorkspace, theta: &ThetaFlat) -> Result<SeResult> {
    let (k, n) = (ws.k, ws.n);
    hessian_se(
        |v| ws.grad(&ThetaFlat::from_vector(v, k, n)?),
        &theta.to_vector(),
    )
}

pub fn numeric_se(theta_hat: &ThetaFlat, data: &PanelSeries, w: &WeightMatrix) -> Result<SeResult> {
    numeric_se_with(&LoglikWorkspace::new(data, w)?, theta_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_coefficients, gen_weight, simulate_series, DgpSpec};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn loglik_of_zero_data() {
        let frames = vec![dmatrix![0.0]; 11];
        let data = PanelSeries::new(frames).unwrap();
        let w = WeightMatrix::new(dmatrix![0.0]).unwrap();
        let theta = ThetaFlat::new(&dmatrix![0.0], &dmatrix![0.0], 1.0).unwrap();
        let ll = loglik(&theta, &data, &w).unwrap();
        assert_relative_eq!(ll, -5.0 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn domain_errors() {
        let data = PanelSeries::new(vec![dmatrix![1.0, 0.0]; 5]).unwrap();
        let w = WeightMatrix::new(dmatrix![0.0, 1.0; 1.0, 0.0]).unwrap();
        let phi = Mat::zeros(2, 2);
        let bad_c = ThetaFlat::new(&dmatrix![2.0], &phi, 1.0).unwrap();
        assert!(matches!(loglik(&bad_c, &data, &w), Err(SigmarError::Domain(_))));
        let mut ok = ThetaFlat::new(&dmatrix![0.1], &phi, 1.0).unwrap();
        ok.sigma2 = -1.0;
        assert!(matches!(loglik(&ok, &data, &w), Err(SigmarError::Domain(_))));
    }

    #[test]
    fn zero_data_gradient_is_logdet_term() {
        let data = PanelSeries::new(vec![Mat::zeros(2, 3); 8]).unwrap();
        let w = gen_weight(3, 1).unwrap();
        let c = dmatrix![0.3, -0.1; 0.2, 0.1];
        let phi = Mat::from_fn(6, 6, |i, j| 0.05 * (i as f64 - j as f64));
        let theta = ThetaFlat::new(&c, &phi, 1.3).unwrap();
        let g = grad_loglik(&theta, &data, &w).unwrap();
        assert!(g.rows(4, 36).amax() == 0.0);
        let ginv = model::g_matrix(&w, &c).try_inverse().unwrap();
        let rect = kronlin::rearrange(&ginv.transpose(), kronlin::BlockShape::kron_square(3, 2)).unwrap();
        let expected = -(rect.transpose() * kronlin::vec(w.matrix())) * 7.0;
        assert_relative_eq!(g.rows(0, 4).into_owned(), expected, epsilon = 1e-12);
    }

    #[test]
    fn zero_network_has_no_logdet_gradient() {
        let data = PanelSeries::new(vec![Mat::zeros(2, 2); 6]).unwrap();
        let w = WeightMatrix::new(Mat::zeros(2, 2)).unwrap();
        let theta = ThetaFlat::new(&dmatrix![0.3, 0.0; 0.1, 0.2], &Mat::zeros(4, 4), 1.0).unwrap();
        let g = grad_loglik(&theta, &data, &w).unwrap();
        assert!(g.rows(0, 4).amax() == 0.0);
    }

    #[test]
    fn concentrated_variance_is_stationary() {
        let w = gen_weight(3, 2).unwrap();
        let p = gen_coefficients(&DgpSpec::new(2, 3, 4, 200, 2), &w).unwrap();
        let data = simulate_series(&p, &w, 200, 200, 5).unwrap();
        let ws = LoglikWorkspace::new(&data, &w).unwrap();
        let phi = model::phi_of(&p).unwrap();
        let g = model::g_matrix(&w, &p.c);
        let (ss, _, _) = ws.residual_products(&g, &phi);
        let s2 = ss / ws.total();
        let theta = ThetaFlat::new(&p.c, &phi, s2).unwrap();
        let grad = ws.grad(&theta).unwrap();
        assert!(grad[grad.len() - 1].abs() < 1e-8);
        let h = 1e-6;
        let mut up = theta.clone();
        up.sigma2 += h;
        let mut dn = theta.clone();
        dn.sigma2 -= h;
        let fd = (ws.loglik(&up).unwrap() - ws.loglik(&dn).unwrap()) / (2.0 * h);
        assert!(fd.abs() < 1e-4);
    }

    #[test]
    fn fit_from_truth_converges_fast() {
        let w = gen_weight(4, 3).unwrap();
        let p = gen_coefficients(&DgpSpec::new(3, 4, 10, 2000, 3), &w).unwrap();
        let data = simulate_series(&p, &w, 2000, 200, 9).unwrap();
        let rep = fit_qmle(&data, &w, &p, &QmleOptions::default()).unwrap();
        assert!(rep.converged, "grad norm {}", rep.grad_norm);
        assert!(rep.iterations <= 3, "iterations {}", rep.iterations);
        let c_err = (rep.theta_hat.c() - &p.c).norm() / p.c.norm();
        assert!(c_err < 0.3, "C error {c_err}");
        for pair in rep.path.windows(2) {
            assert!(pair[1] > pair[0]);
        }
        // Profile identity for the variance.
        let ws = LoglikWorkspace::new(&data, &w).unwrap();
        let g = model::g_matrix(&w, &rep.theta_hat.c());
        let (ss, _, _) = ws.residual_products(&g, &rep.theta_hat.phi());
        assert_relative_eq!(rep.theta_hat.sigma2, ss / ws.total(), max_relative = 1e-10);
    }

    #[test]
    fn gauge_leaves_loglik_unchanged() {
        let w = gen_weight(3, 4).unwrap();
        let p = gen_coefficients(&DgpSpec::new(2, 3, 4, 60, 4), &w).unwrap();
        let data = simulate_series(&p, &w, 60, 200, 1).unwrap();
        let theta = ThetaFlat::from_params(&p).unwrap();
        let mut q = p.clone();
        q.a *= 4.0;
        q.b *= 0.25;
        q.s = model::phi_of(&p).unwrap() - kronlin::kron(&q.b, &q.a);
        let theta2 = ThetaFlat::new(&q.c, &model::phi_of(&p).unwrap(), q.sigma2).unwrap();
        assert_eq!(loglik(&theta, &data, &w).unwrap(), loglik(&theta2, &data, &w).unwrap());
    }

    #[test]
    fn singular_hessian_is_flagged() {
        // The last two coordinates only enter through their sum.
        let grad = |v: &Vector| -> Result<Vector> {
            let s = v[1] + v[2];
            Ok(Vector::from_vec(vec![-2.0 * v[0], -2.0 * s, -2.0 * s]))
        };
        let out = hessian_se(grad, &Vector::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        assert!(out.se.is_none());
        assert!(out.warning.is_some());

        let good = |v: &Vector| -> Result<Vector> { Ok(-v * 4.0) };
        let out = hessian_se(good, &Vector::from_vec(vec![1.0, 2.0])).unwrap();
        let se = out.se.unwrap();
        assert_relative_eq!(se[0], 0.5, epsilon = 1e-8);
    }
}
