//! Comparator VAR-type estimators, each reduced to a `kn x kn` transition for
//! one-step forecasting. All regressions are without intercepts.

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};

use crate::amabc::{a_given_b, b_given_a, Moments};
use crate::error::{Result, SigmarError};
use crate::kronlin::{self, BlockShape, Mat, Vector};
use crate::model::{self, mat_to_rows, PanelSeries, WeightMatrix};
use crate::projection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Iar,
    Ivar,
    Ivarx,
    Svar,
    Mar,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Iar => "iar",
            Self::Ivar => "ivar",
            Self::Ivarx => "ivarx",
            Self::Svar => "svar",
            Self::Mar => "mar",
        }
    }
}

/// Kind-specific coefficient blocks.
#[derive(Debug, Clone)]
pub enum Components {
    /// AR(1) coefficient per entry of `vec X`.
    Iar(Vector),
    /// One `k x k` block per country.
    Ivar(Vec<Mat>),
    /// Per country, the lag block `Φ_i` and the star block `Ψ_i`.
    Ivarx { phi: Vec<Mat>, psi: Vec<Mat> },
    Svar,
    Mar { a: Mat, b: Mat, iterations: usize, converged: bool, objective: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct LinearForecaster {
    pub kind: BaselineKind,
    pub k: usize,
    pub n: usize,
    pub transition: Mat,
    pub components: Components,
    pub warnings: Vec<String>,
}

impl LinearForecaster {
    fn new(kind: BaselineKind, k: usize, n: usize, transition: Mat, components: Components, warnings: Vec<String>) -> Result<Self> {
        if transition.iter().any(|x| !x.is_finite()) {
            return Err(SigmarError::Numerical(format!("{} transition is not finite", kind.name())));
        }
        for w in &warnings {
            log::warn!("{}: {w}", kind.name());
        }
        Ok(Self { kind, k, n, transition, components, warnings })
    }

    /// `unvec(transition · vec X_t)`.
    pub fn predict(&self, x_t: &Mat) -> Result<Mat> {
        if x_t.shape() != (self.k, self.n) {
            return Err(SigmarError::Dimension("frame shape does not match the forecaster".into()));
        }
        kronlin::unvec(&(&self.transition * kronlin::vec(x_t)), self.k, self.n)
    }

    /// In-sample `Σ ‖x_t − transition · x_{t-1}‖²`.
    pub fn rss(&self, data: &PanelSeries) -> Result<f64> {
        let mo = Moments::new(data)?;
        Ok(mo.rss(&Mat::identity(self.k * self.n, self.k * self.n), &self.transition))
    }
}

impl Serialize for LinearForecaster {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let blocks = |v: &[Mat]| v.iter().map(mat_to_rows).collect::<Vec<_>>();
        let mut st = serializer.serialize_struct("LinearForecaster", 6)?;
        st.serialize_field("kind", &self.kind)?;
        st.serialize_field("k", &self.k)?;
        st.serialize_field("n", &self.n)?;
        st.serialize_field("transition", &mat_to_rows(&self.transition))?;
        match &self.components {
            Components::Iar(c) => st.serialize_field("components", &serde_json::json!({ "coefficients": c.as_slice() }))?,
            Components::Ivar(p) => st.serialize_field("components", &serde_json::json!({ "phi": blocks(p) }))?,
            Components::Ivarx { phi, psi } => {
                st.serialize_field("components", &serde_json::json!({ "phi": blocks(phi), "psi": blocks(psi) }))?
            }
            Components::Svar => st.serialize_field("components", &serde_json::json!({}))?,
            Components::Mar { a, b, iterations, converged, objective } => st.serialize_field(
                "components",
                &serde_json::json!({
                    "A": mat_to_rows(a),
                    "B": mat_to_rows(b),
                    "iterations": iterations,
                    "converged": converged,
                    "objective": objective,
                }),
            )?,
        }
        st.serialize_field("warnings", &self.warnings)?;
        st.end()
    }
}

fn country_name(data: &PanelSeries, j: usize) -> String {
    match &data.country_labels {
        Some(l) => format!("country {} ({})", j, l[j]),
        None => format!("country {j}"),
    }
}

fn block(m: &Mat, j: usize, k: usize) -> Mat {
    m.view((j * k, j * k), (k, k)).into_owned()
}

pub fn fit_iar(data: &PanelSeries) -> Result<LinearForecaster> {
    data.require_len(3, "iAR")?;
    let mo = Moments::new(data)?;
    let kn = mo.k * mo.n;
    let mut coef = Vector::zeros(kn);
    let mut warnings = Vec::new();
    for r in 0..kn {
        let den = mo.s11[(r, r)];
        if den > 0.0 {
            coef[r] = mo.s01[(r, r)] / den;
        } else {
            warnings.push(format!("series {r} (variable {}, {}) has zero variance; coefficient set to 0", r % mo.k, country_name(data, r / mo.k)));
        }
    }
    LinearForecaster::new(BaselineKind::Iar, mo.k, mo.n, Mat::from_diagonal(&coef), Components::Iar(coef), warnings)
}

pub fn fit_ivar(data: &PanelSeries) -> Result<LinearForecaster> {
    let k = data.k();
    data.require_len(k + 2, "iVAR")?;
    let mo = Moments::new(data)?;
    let kn = k * mo.n;
    let mut transition = Mat::zeros(kn, kn);
    let mut blocks = Vec::with_capacity(mo.n);
    for j in 0..mo.n {
        let phi = kronlin::right_divide(&block(&mo.s01, j, k), &block(&mo.s11, j, k))
            .map_err(|_| SigmarError::Numerical(format!("singular Gram matrix for {}", country_name(data, j))))?;
        transition.view_mut((j * k, j * k), (k, k)).copy_from(&phi);
        blocks.push(phi);
    }
    LinearForecaster::new(BaselineKind::Ivar, k, mo.n, transition, Components::Ivar(blocks), Vec::new())
}

/// Foreign counterparts `X Wᵀ`: column `i` is the `W`-weighted average of the
/// other countries' columns.
pub fn star_variables(x: &Mat, w: &WeightMatrix) -> Mat {
    x * w.matrix().transpose()
}

/// Country-by-country VARX with contemporaneous star variables `X_t Wᵀ`
/// treated as exogenous; the joint system is solved for forecasting.
pub fn fit_ivarx(data: &PanelSeries, w: &WeightMatrix) -> Result<LinearForecaster> {
    let (k, n) = (data.k(), data.n());
    if w.n() != n {
        return Err(SigmarError::Dimension(format!("panel has n={n}, weight matrix has n={}", w.n())));
    }
    data.require_len(2 * k + 2, "iVARX")?;
    let frames = data.frames();
    let mut phi = Vec::with_capacity(n);
    let mut psi = Vec::with_capacity(n);
    let mut lag_sel = Mat::zeros(k * n, k * n);
    let mut star_sel = Mat::zeros(k * n, k * n);
    let stars: Vec<Mat> = frames.iter().map(|x| star_variables(x, w)).collect();
    for i in 0..n {
        let mut gram = Mat::zeros(2 * k, 2 * k);
        let mut cross = Mat::zeros(k, 2 * k);
        for t in 1..frames.len() {
            let mut z = Vector::zeros(2 * k);
            z.rows_mut(0, k).copy_from(&frames[t - 1].column(i));
            z.rows_mut(k, k).copy_from(&stars[t].column(i));
            let y = frames[t].column(i).into_owned();
            gram.ger(1.0, &z, &z, 1.0);
            cross.ger(1.0, &y, &z, 1.0);
        }
        let coef = kronlin::right_divide(&cross, &gram)
            .map_err(|_| SigmarError::Numerical(format!("singular Gram matrix for {}", country_name(data, i))))?;
        let p = coef.columns(0, k).into_owned();
        let q = coef.columns(k, k).into_owned();
        lag_sel.view_mut((i * k, i * k), (k, k)).copy_from(&p);
        star_sel.view_mut((i * k, i * k), (k, k)).copy_from(&q);
        phi.push(p);
        psi.push(q);
    }
    let link = Mat::identity(k * n, k * n) - &star_sel * kronlin::kron(w.matrix(), &Mat::identity(k, k));
    let transition = kronlin::lu_solve(&link, &lag_sel)
        .map_err(|_| SigmarError::Numerical("iVARX joint system matrix is singular".into()))?;
    LinearForecaster::new(BaselineKind::Ivarx, k, n, transition, Components::Ivarx { phi, psi }, Vec::new())
}

/// Unrestricted OLS of `vec X_t` on `vec X_{t-1}`, with a small ridge when the
/// design has fewer transitions than regressors.
pub fn fit_svar(data: &PanelSeries) -> Result<LinearForecaster> {
    fit_svar_with(data, true)
}

pub fn fit_svar_with(data: &PanelSeries, ridge_fallback: bool) -> Result<LinearForecaster> {
    let mo = Moments::new(data)?;
    let kn = mo.k * mo.n;
    let mut warnings = Vec::new();
    let direct = if mo.m > kn { kronlin::right_divide(&mo.s01, &mo.s11).ok() } else { None };
    let transition = match direct {
        Some(t) => t,
        None if !ridge_fallback => {
            return Err(SigmarError::Numerical(format!(
                "sVAR design is rank deficient ({} transitions, {kn} regressors)",
                mo.m
            )));
        }
        None => {
            let penalty = 1e-4 * mo.s11.trace() / kn as f64;
            let penalty = if penalty > 0.0 { penalty } else { 1e-4 };
            let gram = &mo.s11 + Mat::identity(kn, kn) * penalty;
            warnings.push(format!("ridge fallback with penalty {penalty:.3e} ({} transitions, {kn} regressors)", mo.m));
            kronlin::right_divide(&mo.s01, &gram).map_err(|_| SigmarError::Numerical("sVAR ridge system is singular".into()))?
        }
    };
    LinearForecaster::new(BaselineKind::Svar, mo.k, mo.n, transition, Components::Svar, warnings)
}

/// Bilinear `X_t = A X_{t-1} Bᵀ + E_t` by alternating least squares from the
/// nearest Kronecker product to the OLS transition.
pub fn fit_mar(data: &PanelSeries) -> Result<LinearForecaster> {
    data.require_len(3, "MAR")?;
    let (k, n) = (data.k(), data.n());
    let mo = Moments::new(data)?;
    let ols = fit_svar(data)?.transition;
    let rearranged = kronlin::rearrange(&ols, BlockShape::kron_square(n, k))?;
    let (mut a, mut b) = projection::extract_ab(&rearranged, k, n)
        .or_else(|_| model::normalize_ab(&Mat::identity(k, k), &Mat::identity(n, n)))?;
    let eye = Mat::identity(k * n, k * n);
    let mut phi = kronlin::kron(&b, &a);
    let mut objective = vec![mo.rss(&eye, &phi)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < 200 {
        let a_new = a_given_b(&mo, &mo.s01, &b)?;
        let b_new = b_given_a(&mo, &mo.s01, &a_new)?;
        let (a_n, b_n) = model::normalize_ab(&a_new, &b_new)?;
        a = a_n;
        b = b_n;
        let phi_new = kronlin::kron(&b, &a);
        let change = (&phi_new - &phi).norm() / phi.norm().max(f64::MIN_POSITIVE);
        phi = phi_new;
        objective.push(mo.rss(&eye, &phi));
        iterations += 1;
        if change < 1e-8 {
            converged = true;
            break;
        }
    }
    LinearForecaster::new(
        BaselineKind::Mar,
        k,
        n,
        phi,
        Components::Mar { a, b, iterations, converged, objective },
        Vec::new(),
    )
}
