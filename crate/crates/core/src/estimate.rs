//! Method dispatch: the SIGMAR estimators and the comparator baselines behind
//! one entry point, each yielding a one-step transition.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::amabc::{self, AmaConfig, AmaFit};
use crate::baselines::{self, LinearForecaster};
use crate::error::{Result, SigmarError};
use crate::kronlin::{self, Mat};
use crate::model::{self, PanelSeries, SigmarParams, WeightMatrix};
use crate::projection::{self, AdmmConfig, ProjectionResult};
use crate::qmle::{self, QmleOptions, QmleReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Qmle,
    Bc,
    AmaNaive,
    Iar,
    Ivar,
    Ivarx,
    Svar,
    Mar,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Qmle,
        Method::Bc,
        Method::AmaNaive,
        Method::Iar,
        Method::Ivar,
        Method::Ivarx,
        Method::Svar,
        Method::Mar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Qmle => "qmle",
            Self::Bc => "bc",
            Self::AmaNaive => "ama-naive",
            Self::Iar => "iar",
            Self::Ivar => "ivar",
            Self::Ivarx => "ivarx",
            Self::Svar => "svar",
            Self::Mar => "mar",
        }
    }

    /// Whether the fit produces structural SIGMAR parameters.
    pub fn is_sigmar(self) -> bool {
        matches!(self, Self::Qmle | Self::Bc | Self::AmaNaive)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SigmarError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SigmarError::Validation(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Seed of the random `A`, `B` start of the naive alternating pass.
    pub seed: u64,
    pub qmle: QmleOptions,
    pub ama: AmaConfig,
    pub admm: AdmmConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            qmle: QmleOptions::default(),
            ama: AmaConfig::default(),
            admm: AdmmConfig::default(),
        }
    }
}

/// QMLE of `(C, Φ, σ²)` and the projection of `Φ̂` onto `B ⊗ A + S`.
#[derive(Debug, Clone)]
pub struct QmleFit {
    pub naive: AmaFit,
    pub report: QmleReport,
    pub projection: ProjectionResult,
    /// `Ĉ` and `σ̂²` from the likelihood with `(A, B, S)` from the projection.
    pub params: SigmarParams,
}

/// Naive alternating pass from a random start, then the likelihood ascent
/// from its output, then the Kronecker-plus-sparse projection of `Φ̂`.
pub fn fit_qmle_pipeline(data: &PanelSeries, w: &WeightMatrix, opts: &FitOptions) -> Result<QmleFit> {
    let init = amabc::random_init(data.k(), data.n(), opts.seed)?;
    let naive_cfg = AmaConfig {
        bias_correction: false,
        ..opts.ama.clone()
    };
    let naive = amabc::fit_amabc(data, w, &init, &naive_cfg).map_err(|e| e.context("naive alternating pass"))?;
    let report = qmle::fit_qmle(data, w, &admissible_start(&naive.params, w), &opts.qmle).map_err(|e| e.context("QMLE"))?;
    let projection = projection::project_phi(&report.theta_hat.phi(), data.k(), data.n(), &opts.admm)
        .map_err(|e| e.context("projection"))?;
    let params = SigmarParams {
        a: projection.a.clone(),
        b: projection.b.clone(),
        c: report.theta_hat.c(),
        s: projection.s.clone(),
        sigma2: report.theta_hat.sigma2,
    };
    Ok(QmleFit {
        naive,
        report,
        projection,
        params,
    })
}

/// Halves `C` until `det(I − W ⊗ C) > 0`; `C = 0` always qualifies.
fn admissible_start(p: &SigmarParams, w: &WeightMatrix) -> SigmarParams {
    let mut start = p.clone();
    let mut halvings = 0;
    while halvings < 60 && kronlin::logdet_i_minus_kron(w.eigenvalues(), &start.c).is_err() {
        start.c *= 0.5;
        halvings += 1;
    }
    if halvings == 60 {
        start.c.fill(0.0);
    }
    if halvings > 0 {
        log::debug!("naive C inadmissible; QMLE starts from it scaled by 2^-{halvings}");
    }
    start
}

#[derive(Debug, Clone)]
pub enum Fitted {
    Qmle(Box<QmleFit>),
    Bc { start: Box<QmleFit>, fit: AmaFit },
    AmaNaive(AmaFit),
    Baseline(LinearForecaster),
}

impl Fitted {
    pub fn params(&self) -> Option<&SigmarParams> {
        match self {
            Fitted::Qmle(q) => Some(&q.params),
            Fitted::Bc { fit, .. } | Fitted::AmaNaive(fit) => Some(&fit.params),
            Fitted::Baseline(_) => None,
        }
    }

    /// The reduced-form one-step transition.
    pub fn transition(&self, w: &WeightMatrix) -> Result<Mat> {
        match self {
            Fitted::Baseline(f) => Ok(f.transition.clone()),
            other => {
                let p = other.params().expect("structural fit");
                Ok(model::reduced_form(p, w)?.pi)
            }
        }
    }

    pub fn predict(&self, w: &WeightMatrix, x_t: &Mat) -> Result<Mat> {
        let pi = self.transition(w)?;
        kronlin::unvec(&(pi * kronlin::vec(x_t)), x_t.nrows(), x_t.ncols())
    }
}

/// Bias-corrected alternating minimization started from a finished QMLE pipeline.
pub fn fit_bc_from(start: QmleFit, data: &PanelSeries, w: &WeightMatrix, opts: &FitOptions) -> Result<Fitted> {
    let cfg = AmaConfig {
        bias_correction: true,
        ..opts.ama.clone()
    };
    let fit = amabc::fit_amabc(data, w, &start.params, &cfg).map_err(|e| e.context("bias-corrected alternating minimization"))?;
    Ok(Fitted::Bc {
        start: Box::new(start),
        fit,
    })
}

pub fn fit(method: Method, data: &PanelSeries, w: &WeightMatrix, opts: &FitOptions) -> Result<Fitted> {
    Ok(match method {
        Method::Qmle => Fitted::Qmle(Box::new(fit_qmle_pipeline(data, w, opts)?)),
        Method::Bc => fit_bc_from(fit_qmle_pipeline(data, w, opts)?, data, w, opts)?,
        Method::AmaNaive => {
            let init = amabc::random_init(data.k(), data.n(), opts.seed)?;
            let cfg = AmaConfig {
                bias_correction: false,
                ..opts.ama.clone()
            };
            Fitted::AmaNaive(amabc::fit_amabc(data, w, &init, &cfg)?)
        }
        Method::Iar => Fitted::Baseline(baselines::fit_iar(data)?),
        Method::Ivar => Fitted::Baseline(baselines::fit_ivar(data)?),
        Method::Ivarx => Fitted::Baseline(baselines::fit_ivarx(data, w)?),
        Method::Svar => Fitted::Baseline(baselines::fit_svar(data)?),
        Method::Mar => Fitted::Baseline(baselines::fit_mar(data)?),
    })
}
