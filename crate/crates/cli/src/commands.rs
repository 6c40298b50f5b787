use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};
use sigmar_core::config::{Calendar, ExperimentConfig};
use sigmar_core::estimate::{self, FitOptions, Fitted, Method};
use sigmar_core::evalx::{self, ForecastEval, ForecastMethod, ZERO_TOL};
use sigmar_core::io::{self, TradeFlowPanel};
use sigmar_core::model::{self, mat_to_rows};
use sigmar_core::replicate::{self, ReplicateOptions};
use sigmar_core::{amabc, projection, simulate, PanelSeries, Result, SigmarError, SigmarParams, WeightMatrix};

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let mut out = create(dir, name)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn simulated_design(cfg: &ExperimentConfig) -> Result<(WeightMatrix, SigmarParams, u64, PanelSeries)> {
    let (w, p, design_seed) = simulate::gen_design(&cfg.dgp)?;
    let x = simulate::simulate_series(&p, &w, cfg.dgp.t, cfg.dgp.burn_in, cfg.seed)?;
    Ok((w, p, design_seed, x))
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let (w, p, design_seed, x) = simulated_design(cfg)?;
    io::write_panel_csv(&x, create(&cfg.out, "series.csv")?)?;
    io::write_matrix_csv(w.matrix(), create(&cfg.out, "weights.csv")?)?;
    write_json(&cfg.out, "params.json", &p)?;
    write_json(&cfg.out, "design.json", &json!({ "dgp": cfg.dgp, "design_seed": design_seed }))?;
    println!("simulated {} frames of {}x{} into {}", x.len(), x.k(), x.n(), cfg.out.display());
    Ok(())
}

/// A loaded panel plus the weight matrix valid at each of its periods.
struct Observed {
    data: PanelSeries,
    weights: WeightSource,
}

enum WeightSource {
    Fixed(WeightMatrix),
    Trade {
        panel: TradeFlowPanel,
        calendar: Calendar,
        /// Raw-panel period of the first frame (1 after differencing).
        offset: usize,
    },
}

impl WeightSource {
    fn at(&self, t: usize) -> Result<WeightMatrix> {
        match self {
            WeightSource::Fixed(w) => Ok(w.clone()),
            WeightSource::Trade { panel, calendar, offset } => {
                io::build_weight_from_trade(panel, calendar.year_of(t + offset), calendar.trade_window)
            }
        }
    }
}

fn load_observed(cfg: &ExperimentConfig) -> Result<Observed> {
    let path = cfg.inputs.data.as_ref().expect("validated");
    let raw = io::load_panel_csv(path)?;
    let (data, offset) = if cfg.preprocess {
        (io::preprocess(&raw)?, 1)
    } else {
        (raw, 0)
    };
    let weights = if let Some(wp) = &cfg.inputs.weights {
        WeightSource::Fixed(WeightMatrix::new(io::load_matrix_csv(wp)?)?)
    } else {
        let tp = cfg.inputs.trade.as_ref().expect("validated");
        let panel = io::load_trade_csv(tp, data.country_labels.as_deref())?;
        WeightSource::Trade {
            panel,
            calendar: cfg.calendar,
            offset,
        }
    };
    Ok(Observed { data, weights })
}

fn fit_document(method: Method, fitted: &Fitted, data: &PanelSeries, w: &WeightMatrix) -> Result<Value> {
    let mut doc = json!({
        "method": method.name(),
        "k": data.k(),
        "n": data.n(),
        "T": data.len(),
        "transition": mat_to_rows(&fitted.transition(w)?),
    });
    let ama = |f: &amabc::AmaFit| {
        json!({ "iterations": f.iterations, "converged": f.converged, "bc_fallbacks": f.bc_fallbacks })
    };
    match fitted {
        Fitted::Qmle(q) => {
            doc["params"] = serde_json::to_value(&q.params)?;
            doc["qmle"] = serde_json::to_value(&q.report)?;
            doc["projection"] = serde_json::to_value(&q.projection)?;
        }
        Fitted::Bc { start, fit } => {
            doc["params"] = serde_json::to_value(&fit.params)?;
            doc["qmle"] = serde_json::to_value(&start.report)?;
            doc["ama"] = ama(fit);
        }
        Fitted::AmaNaive(fit) => {
            doc["params"] = serde_json::to_value(&fit.params)?;
            doc["ama"] = ama(fit);
        }
        Fitted::Baseline(f) => doc["forecaster"] = serde_json::to_value(f)?,
    }
    Ok(doc)
}

fn fit_options(cfg: &ExperimentConfig) -> FitOptions {
    FitOptions {
        seed: cfg.seed,
        ..cfg.fit.clone()
    }
}

pub fn fit(cfg: &ExperimentConfig) -> Result<()> {
    let &[method] = cfg.methods.as_slice() else {
        return Err(SigmarError::Validation("fit takes exactly one method".into()));
    };
    let obs = load_observed(cfg)?;
    let w = obs.weights.at(obs.data.len() - 1)?;
    let fitted = estimate::fit(method, &obs.data, &w, &fit_options(cfg))?;
    write_json(&cfg.out, &format!("fit_{}.json", method.name()), &fit_document(method, &fitted, &obs.data, &w)?)?;
    if let Fitted::Bc { fit, .. } | Fitted::AmaNaive(fit) = &fitted {
        amabc::write_trace_csv(&fit.trace, create(&cfg.out, &format!("trace_{}.csv", method.name()))?)?;
    }
    println!("{} fit on {} frames written to {}", method, obs.data.len(), cfg.out.display());
    Ok(())
}

pub fn project(cfg: &ExperimentConfig) -> Result<()> {
    let phi = io::load_matrix_csv(cfg.inputs.phi.as_ref().expect("validated"))?;
    let result = projection::project_phi(&phi, cfg.dgp.k, cfg.dgp.n, &cfg.fit.admm)?;
    write_json(&cfg.out, "projection.json", &result)?;
    println!(
        "projection: {} sparse entries, residual {:.3e}, {} ADMM iterations",
        result.support_size(),
        result.residual,
        result.diagnostics.iterations
    );
    Ok(())
}

fn methods_or_all(cfg: &ExperimentConfig) -> Vec<Method> {
    if cfg.methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        cfg.methods.clone()
    }
}

pub fn forecast(cfg: &ExperimentConfig) -> Result<()> {
    let window = cfg.window.expect("validated");
    let mut methods: Vec<ForecastMethod> = methods_or_all(cfg)
        .into_iter()
        .map(|m| ForecastMethod::Estimated {
            method: m,
            opts: fit_options(cfg),
        })
        .collect();
    let (data, weights) = if cfg.inputs.data.is_some() {
        let obs = load_observed(cfg)?;
        (obs.data, obs.weights)
    } else {
        let (w, p, _, x) = simulated_design(cfg)?;
        methods.push(ForecastMethod::Oracle(p));
        (x, WeightSource::Fixed(w))
    };

    let mut evals: Vec<ForecastEval> = Vec::new();
    for m in &methods {
        log::info!("rolling forecasts: {}", m.name());
        let eval = evalx::rolling_forecast(&data, |t| weights.at(t), m, window)?;
        evals.push(eval);
    }
    let mut csv_out = create(&cfg.out, "forecast.csv")?;
    let mut wtr = csv::Writer::from_writer(&mut csv_out);
    wtr.write_record(["method", "variable", "msfe"])?;
    for e in &evals {
        for (v, msfe) in e.variables.iter().zip(&e.msfe_per_variable) {
            wtr.write_record([e.method.as_str(), v.as_str(), &msfe.to_string()])?;
        }
    }
    wtr.flush()?;
    drop(wtr);
    csv_out.flush()?;
    write_json(&cfg.out, "forecast.json", &evals)?;
    for e in &evals {
        println!("{:<10} mean MSFE {:.4} ({} forecasts, {} failed windows)", e.method, e.mean(), e.t_test, e.missing);
    }
    Ok(())
}

pub fn benchmark(cfg: &ExperimentConfig) -> Result<()> {
    let (w, truth, _, x) = simulated_design(cfg)?;
    let pi0 = model::reduced_form(&truth, &w)?.pi;
    let mut wtr = csv::Writer::from_writer(create(&cfg.out, "benchmark.csv")?);
    wtr.write_record(["method", "pi_err", "c_err", "fpr", "tpr", "status"])?;
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for method in methods_or_all(cfg) {
        let start = std::time::Instant::now();
        let row = estimate::fit(method, &x, &w, &fit_options(cfg)).and_then(|f| {
            let pi_err = evalx::relative_error(&f.transition(&w)?, &pi0)?;
            let (c_err, support) = match f.params() {
                Some(p) => (
                    Some(evalx::relative_error(&p.c, &truth.c)?),
                    Some(evalx::support_metrics(&p.s, &truth.s, ZERO_TOL)?),
                ),
                None => (None, None),
            };
            Ok((pi_err, c_err, support))
        });
        eprintln!("{method}: {:.2}s", start.elapsed().as_secs_f64());
        match row {
            Ok((pi, c, s)) => {
                println!("{:<10} Π error {pi:.4}", method.name());
                wtr.write_record([
                    method.name().to_string(),
                    format!("{pi:.6}"),
                    fmt(c),
                    fmt(s.and_then(|s| s.fpr)),
                    fmt(s.and_then(|s| s.tpr)),
                    "ok".into(),
                ])?;
            }
            Err(e) => {
                println!("{:<10} failed: {e}", method.name());
                wtr.write_record([method.name(), "", "", "", "", &format!("failed: {e}")])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn replicate(cfg: &ExperimentConfig) -> Result<()> {
    let opts = ReplicateOptions {
        cells: cfg.cells.clone(),
        reps: cfg.reps,
        seed: cfg.seed,
        burn_in: cfg.dgp.burn_in,
        fit: cfg.fit.clone(),
    };
    let report = replicate::replicate_table1(&opts)?;
    let comparison = replicate::compare_with_paper(&report);
    replicate::write_table_csv(&report, create(&cfg.out, "table1.csv")?)?;
    replicate::write_comparison_csv(&comparison, create(&cfg.out, "table1_comparison.csv")?)?;
    write_json(&cfg.out, "table1.json", &json!({ "report": report, "comparison": comparison }))?;
    for c in &comparison {
        println!(
            "{}x{} T={:<5} {:<5} {:<7} ours {:>8} band [{:.3}, {:.3}] {}",
            c.k,
            c.n,
            c.t,
            c.method.name(),
            c.metric.name(),
            c.ours.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
            c.lo,
            c.hi,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    for cell in report.cells.iter().filter(|c| c.flagged) {
        println!("cell {}x{}x{}: more than 10% of replications failed", cell.k, cell.n, cell.t);
    }
    Ok(())
}
