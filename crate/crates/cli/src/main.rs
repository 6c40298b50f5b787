use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sigmar_core::config::{ExperimentConfig, Mode};
use sigmar_core::SigmarError;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "sigmar", version, about = "Matrix autoregression with a network spillover term")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Key-value configuration file; flags override its entries.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    reps: Option<usize>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Any configuration entry, e.g. `--set k=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Long-format panel CSV (t,variable,country,value).
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Weight matrix as headerless CSV rows.
    #[arg(long, value_name = "PATH")]
    weights: Option<PathBuf>,
    /// Bilateral trade CSV (year,reporter,partner,value).
    #[arg(long, value_name = "PATH")]
    trade: Option<PathBuf>,
    /// Difference and standardize the panel before fitting.
    #[arg(long)]
    preprocess: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a design and simulate a panel from it.
    Simulate,
    /// Fit one method to a panel.
    Fit {
        #[arg(long)]
        method: String,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Split a transition matrix into B ⊗ A plus a sparse part.
    Project {
        #[arg(long, value_name = "PATH")]
        phi: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Rolling one-step forecasts on a panel or on simulated data.
    Forecast {
        #[arg(long)]
        window: Option<usize>,
        /// Comma-separated methods; defaults to all.
        #[arg(long)]
        methods: Option<String>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fit several methods to one simulated panel and score them.
    Benchmark {
        #[arg(long)]
        methods: Option<String>,
    },
    /// Monte Carlo replication of the simulation table.
    #[command(name = "replicate-table1")]
    ReplicateTable1 {
        /// Comma-separated KxNxT[xS] cells.
        #[arg(long)]
        cells: Option<String>,
    },
}

fn build_config(cli: &Cli) -> Result<(Mode, ExperimentConfig), SigmarError> {
    let mut cfg = match &cli.global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut set = |key: &str, value: String| cfg.set(key, &value);
    let g = &cli.global;
    if let Some(v) = g.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = &g.out {
        set("out", v.display().to_string())?;
    }
    if let Some(v) = g.reps {
        set("reps", v.to_string())?;
    }
    if let Some(v) = g.jobs {
        set("jobs", v.to_string())?;
    }
    let apply_data = |d: &DataArgs, set: &mut dyn FnMut(&str, String) -> Result<(), SigmarError>| {
        for (key, path) in [("data", &d.data), ("weights", &d.weights), ("trade", &d.trade)] {
            if let Some(p) = path {
                set(key, p.display().to_string())?;
            }
        }
        if d.preprocess {
            set("preprocess", "true".into())?;
        }
        Ok::<_, SigmarError>(())
    };
    let mode = match &cli.command {
        Command::Simulate => Mode::Simulate,
        Command::Fit { method, data } => {
            set("methods", method.clone())?;
            apply_data(data, &mut set)?;
            Mode::Fit
        }
        Command::Project { phi, k, n } => {
            if let Some(p) = phi {
                set("phi", p.display().to_string())?;
            }
            if let Some(k) = k {
                set("k", k.to_string())?;
            }
            if let Some(n) = n {
                set("n", n.to_string())?;
            }
            Mode::Project
        }
        Command::Forecast { window, methods, data } => {
            if let Some(w) = window {
                set("window", w.to_string())?;
            }
            if let Some(m) = methods {
                set("methods", m.clone())?;
            }
            apply_data(data, &mut set)?;
            Mode::Forecast
        }
        Command::Benchmark { methods } => {
            if let Some(m) = methods {
                set("methods", m.clone())?;
            }
            Mode::Benchmark
        }
        Command::ReplicateTable1 { cells } => {
            if let Some(c) = cells {
                set("cells", c.clone())?;
            }
            Mode::Replicate
        }
    };
    for entry in &g.set {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| SigmarError::Validation(format!("--set expects KEY=VALUE, got '{entry}'")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(m) = cfg.mode {
        if m != mode {
            log::warn!("config mode '{}' ignored; running {}", m.name(), mode.name());
        }
    }
    cfg.mode = Some(mode);
    cfg.validate_for(mode)?;
    Ok((mode, cfg))
}

fn run(cli: &Cli) -> Result<(), SigmarError> {
    let (mode, cfg) = build_config(cli)?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| SigmarError::Validation(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cfg.out)?;
    match mode {
        Mode::Simulate => commands::simulate(&cfg),
        Mode::Fit => commands::fit(&cfg),
        Mode::Project => commands::project(&cfg),
        Mode::Forecast => commands::forecast(&cfg),
        Mode::Benchmark => commands::benchmark(&cfg),
        Mode::Replicate => commands::replicate(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
