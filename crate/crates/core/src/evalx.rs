//! Estimation metrics and rolling-window one-step forecast evaluation.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SigmarError};
use crate::estimate::{self, FitOptions, Method};
use crate::kronlin::Mat;
use crate::model::{self, PanelSeries, SigmarParams, WeightMatrix};

/// `‖est − truth‖_F / ‖truth‖_F`.
pub fn relative_error(est: &Mat, truth: &Mat) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(SigmarError::Dimension(format!(
            "estimate is {}x{}, truth is {}x{}",
            est.nrows(),
            est.ncols(),
            truth.nrows(),
            truth.ncols()
        )));
    }
    let den = truth.norm();
    if den == 0.0 {
        return Err(SigmarError::Domain("relative error against a zero truth".into()));
    }
    Ok((est - truth).norm() / den)
}

/// Rates are `None` when their denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportMetrics {
    pub fpr: Option<f64>,
    pub tpr: Option<f64>,
}

pub const ZERO_TOL: f64 = 1e-8;

pub fn support_metrics(s_hat: &Mat, s0: &Mat, zero_tol: f64) -> Result<SupportMetrics> {
    if s_hat.shape() != s0.shape() {
        return Err(SigmarError::Dimension("support matrices differ in shape".into()));
    }
    let (mut tp, mut fp, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&e, &t) in s_hat.iter().zip(s0.iter()) {
        let selected = e.abs() > zero_tol;
        if t.abs() > zero_tol {
            pos += 1;
            tp += selected as usize;
        } else {
            neg += 1;
            fp += selected as usize;
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(SupportMetrics {
        fpr: rate(fp, neg),
        tpr: rate(tp, pos),
    })
}

/// Per-variable `(1/T) Σ_t (1/n) ‖X_{t+1}[i,:] − X̂_{t+1}[i,:]‖²`.
pub fn msfe(forecasts: &[Mat], actuals: &[Mat]) -> Result<Vec<f64>> {
    Ok(squared_errors(forecasts, actuals)?.0)
}

/// Means and standard errors of the per-period squared errors.
fn squared_errors(forecasts: &[Mat], actuals: &[Mat]) -> Result<(Vec<f64>, Vec<f64>)> {
    if forecasts.len() != actuals.len() {
        return Err(SigmarError::Dimension(format!(
            "{} forecasts for {} actuals",
            forecasts.len(),
            actuals.len()
        )));
    }
    let Some(first) = actuals.first() else {
        return Err(SigmarError::Validation("no forecasts to score".into()));
    };
    let (k, n) = first.shape();
    let len = actuals.len() as f64;
    let mut per_period = vec![Vec::with_capacity(actuals.len()); k];
    for (f, a) in forecasts.iter().zip(actuals) {
        if f.shape() != (k, n) || a.shape() != (k, n) {
            return Err(SigmarError::Dimension("forecast and actual frames differ in shape".into()));
        }
        let err = a - f;
        for (i, store) in per_period.iter_mut().enumerate() {
            store.push(err.row(i).norm_squared() / n as f64);
        }
    }
    let mut means = Vec::with_capacity(k);
    let mut ses = Vec::with_capacity(k);
    for v in &per_period {
        let mean = v.iter().sum::<f64>() / len;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (len - 1.0)
        } else {
            0.0
        };
        means.push(mean);
        ses.push((var / len).sqrt());
    }
    Ok((means, ses))
}

/// Noise part of the one-step error under the true model:
/// `σ² tr(G⁻¹G⁻ᵀ) / (kn)`, the mean over variables of the oracle MSFE.
pub fn oracle_msfe(params: &SigmarParams, w: &WeightMatrix) -> Result<f64> {
    let rf = model::reduced_form(params, w)?;
    let kn = params.k() * params.n();
    Ok(params.sigma2 * rf.ginv.norm_squared() / kn as f64)
}

#[derive(Debug, Clone)]
pub enum ForecastMethod {
    Estimated { method: Method, opts: FitOptions },
    /// Known parameters, never refit.
    Oracle(SigmarParams),
}

impl ForecastMethod {
    pub fn estimated(method: Method) -> Self {
        Self::Estimated {
            method,
            opts: FitOptions::default(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Estimated { method, .. } => method.name().to_string(),
            Self::Oracle(_) => "oracle".to_string(),
        }
    }

    fn forecast(&self, data: &PanelSeries, w: &WeightMatrix) -> Result<Mat> {
        let last = data.frame(data.len() - 1);
        match self {
            Self::Estimated { method, opts } => estimate::fit(*method, data, w, opts)?.predict(w, last),
            Self::Oracle(p) => model::one_step_forecast(p, w, last),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastEval {
    pub method: String,
    pub window: usize,
    /// Forecasts scored.
    pub t_test: usize,
    /// Windows whose fit failed; excluded from the averages.
    pub missing: usize,
    pub msfe_per_variable: Vec<f64>,
    /// Standard error of each per-period squared-error mean (our convention).
    pub msfe_se: Vec<f64>,
    pub variables: Vec<String>,
}

impl ForecastEval {
    /// Sum of the per-variable MSFEs.
    pub fn total(&self) -> f64 {
        self.msfe_per_variable.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.msfe_per_variable.len() as f64
    }

    /// Rows `method,variable,msfe`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["method", "variable", "msfe"])?;
        for (name, value) in self.variables.iter().zip(&self.msfe_per_variable) {
            wtr.write_record([self.method.as_str(), name.as_str(), &value.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Refit on each window `[t−window+1, t]` and score the forecast of `t+1`.
/// `weights(t)` gives the network valid at period `t`.
pub fn rolling_forecast<F>(series: &PanelSeries, weights: F, method: &ForecastMethod, window: usize) -> Result<ForecastEval>
where
    F: Fn(usize) -> Result<WeightMatrix> + Sync,
{
    let len = series.len();
    if window < 2 || len <= window {
        return Err(SigmarError::Validation(format!(
            "rolling forecast needs 2 <= window < T (window {window}, T {len})"
        )));
    }
    let outcomes: Vec<Result<Mat>> = (window - 1..len - 1)
        .into_par_iter()
        .map(|t| {
            let w = weights(t)?;
            let sample = series.slice(t + 1 - window, t + 1)?;
            method.forecast(&sample, &w).map_err(|e| e.context(&format!("window ending at {t}")))
        })
        .collect();

    let mut forecasts = Vec::new();
    let mut actuals = Vec::new();
    let mut missing = 0;
    for (t, outcome) in (window - 1..len - 1).zip(outcomes) {
        match outcome {
            Ok(f) => {
                forecasts.push(f);
                actuals.push(series.frame(t + 1).clone());
            }
            Err(e) => {
                log::warn!("{}: {e}; window excluded", method.name());
                missing += 1;
            }
        }
    }
    if forecasts.is_empty() {
        return Err(SigmarError::Numerical(format!("every window fit failed for {}", method.name())));
    }
    let (msfe_per_variable, msfe_se) = squared_errors(&forecasts, &actuals)?;
    let variables = series
        .variable_labels
        .clone()
        .unwrap_or_else(|| (0..series.k()).map(|i| format!("v{i}")).collect());
    Ok(ForecastEval {
        method: method.name(),
        window,
        t_test: forecasts.len(),
        missing,
        msfe_per_variable,
        msfe_se,
        variables,
    })
}
