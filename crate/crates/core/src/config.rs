//! Experiment configuration.
//!
//! The file format is flat `key = value` text, one entry per line. Blank
//! lines and lines starting with `#` are ignored, as is anything after a `#`
//! in a value. Keys are case-sensitive; a repeated key overrides the earlier
//! value, which is also how command-line flags are layered on top of a file.
//!
//! ```text
//! mode = replicate
//! cells = 3x4x2000, 5x10x1000   # k x n x T, optionally x s
//! reps = 50
//! seed = 7
//! ```
//!
//! Recognized keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `mode` | `simulate`, `fit`, `project`, `forecast`, `benchmark`, `replicate` |
//! | `k`, `n`, `s`, `t`, `burn_in` | simulated design dimensions and length |
//! | `rho_ar`, `rho_sp`, `s_mag`, `sigma` | simulated design magnitudes |
//! | `seed` | design, noise and initialization seed |
//! | `methods` | comma-separated method names |
//! | `cells` | comma-separated `KxNxT[xS]` replication cells |
//! | `reps` | replications per cell |
//! | `window` | rolling estimation window |
//! | `jobs` | worker threads |
//! | `data`, `weights`, `trade`, `params`, `phi` | input files |
//! | `out` | output directory |
//! | `preprocess` | difference and standardize loaded panels (`true`/`false`) |
//! | `first_year`, `periods_per_year`, `trade_window` | period-to-year map for trade weights |
//! | `qmle_tol`, `qmle_max_iter`, `ama_tol`, `ama_max_iter`, `lasso_tol`, `admm_tol`, `admm_max_iter`, `admm_lambda`, `admm_mu` | solver overrides |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, SigmarError};
use crate::estimate::{FitOptions, Method};
use crate::simulate::DgpSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Fit,
    Project,
    Forecast,
    Benchmark,
    Replicate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Fit => "fit",
            Mode::Project => "project",
            Mode::Forecast => "forecast",
            Mode::Benchmark => "benchmark",
            Mode::Replicate => "replicate",
        }
    }
}

impl FromStr for Mode {
    type Err = SigmarError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Mode::Simulate,
            Mode::Fit,
            Mode::Project,
            Mode::Forecast,
            Mode::Benchmark,
            Mode::Replicate,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| SigmarError::Validation(format!("unknown mode '{s}'")))
    }
}

/// One `(k, n, T)` design of the simulation table, with `s` nonzeros in `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub s: usize,
}

impl Cell {
    /// Sparsity used by the published table for its three dimension pairs.
    pub fn default_s(k: usize, n: usize) -> Option<usize> {
        match (k, n) {
            (3, 4) => Some(10),
            (4, 6) => Some(20),
            (5, 10) => Some(30),
            _ => None,
        }
    }

    pub fn new(k: usize, n: usize, t: usize) -> Result<Self> {
        let s = Self::default_s(k, n)
            .ok_or_else(|| SigmarError::Validation(format!("no default sparsity for {k}x{n}; write {k}x{n}x{t}xS")))?;
        Ok(Self { k, n, t, s })
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.k, self.n, self.t, self.s)
    }
}

impl FromStr for Cell {
    type Err = SigmarError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| SigmarError::Validation(format!("bad cell '{s}', expected KxNxT or KxNxTxS")))?;
        match parts[..] {
            [k, n, t] => Cell::new(k, n, t),
            [k, n, t, s] => Ok(Cell { k, n, t, s }),
            _ => Err(SigmarError::Validation(format!("bad cell '{s}', expected KxNxT or KxNxTxS"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub trade: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub phi: Option<PathBuf>,
}

/// Maps panel period `t` to the calendar year whose trade defines `W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calendar {
    pub first_year: i64,
    pub periods_per_year: usize,
    pub trade_window: usize,
}

impl Default for Calendar {
    fn default() -> Self {
        Self {
            first_year: 0,
            periods_per_year: 1,
            trade_window: 3,
        }
    }
}

impl Calendar {
    pub fn year_of(&self, t: usize) -> i64 {
        self.first_year + (t / self.periods_per_year) as i64
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub dgp: DgpSpec,
    pub methods: Vec<Method>,
    pub cells: Vec<Cell>,
    pub reps: usize,
    pub seed: u64,
    pub window: Option<usize>,
    pub jobs: Option<usize>,
    pub inputs: Inputs,
    pub out: PathBuf,
    pub preprocess: bool,
    pub calendar: Calendar,
    pub fit: FitOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            dgp: DgpSpec::new(3, 4, 10, 500, 0),
            methods: Vec::new(),
            cells: vec![Cell { k: 3, n: 4, t: 2000, s: 10 }],
            reps: 50,
            seed: 0,
            window: None,
            jobs: None,
            inputs: Inputs::default(),
            out: PathBuf::from("out"),
            preprocess: false,
            calendar: Calendar::default(),
            fit: FitOptions::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SigmarError::Validation(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list<T: FromStr<Err = SigmarError>>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| SigmarError::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SigmarError::Validation(format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| SigmarError::Validation(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "mode" => self.mode = Some(value.parse()?),
            "k" => self.dgp.k = parse_value(key, value)?,
            "n" => self.dgp.n = parse_value(key, value)?,
            "s" => self.dgp.s = parse_value(key, value)?,
            "t" => self.dgp.t = parse_value(key, value)?,
            "burn_in" => self.dgp.burn_in = parse_value(key, value)?,
            "rho_ar" => self.dgp.rho_ar = parse_value(key, value)?,
            "rho_sp" => self.dgp.rho_sp = parse_value(key, value)?,
            "s_mag" => self.dgp.s_mag = parse_value(key, value)?,
            "sigma" => self.dgp.sigma = parse_value(key, value)?,
            "seed" => {
                self.seed = parse_value(key, value)?;
                self.dgp.seed = self.seed;
            }
            "methods" => self.methods = parse_list(value)?,
            "cells" => self.cells = parse_list(value)?,
            "reps" => self.reps = parse_value(key, value)?,
            "window" => self.window = Some(parse_value(key, value)?),
            "jobs" => self.jobs = Some(parse_value(key, value)?),
            "data" => self.inputs.data = path(),
            "weights" => self.inputs.weights = path(),
            "trade" => self.inputs.trade = path(),
            "params" => self.inputs.params = path(),
            "phi" => self.inputs.phi = path(),
            "out" => self.out = PathBuf::from(value),
            "preprocess" => self.preprocess = parse_value(key, value)?,
            "first_year" => self.calendar.first_year = parse_value(key, value)?,
            "periods_per_year" => self.calendar.periods_per_year = parse_value(key, value)?,
            "trade_window" => self.calendar.trade_window = parse_value(key, value)?,
            "qmle_tol" => self.fit.qmle.tol = parse_value(key, value)?,
            "qmle_max_iter" => self.fit.qmle.max_iter = parse_value(key, value)?,
            "ama_tol" => self.fit.ama.tol = parse_value(key, value)?,
            "ama_max_iter" => self.fit.ama.max_iter = parse_value(key, value)?,
            "lasso_tol" => self.fit.ama.lasso_tol = parse_value(key, value)?,
            "admm_tol" => self.fit.admm.tol = parse_value(key, value)?,
            "admm_max_iter" => self.fit.admm.max_iter = parse_value(key, value)?,
            "admm_lambda" => self.fit.admm.lambda = Some(parse_value(key, value)?),
            "admm_mu" => self.fit.admm.mu = Some(parse_value(key, value)?),
            _ => return Err(SigmarError::Validation(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Checks that everything `mode` needs is present.
    pub fn validate_for(&self, mode: Mode) -> Result<()> {
        let missing = |what: &str| Err(SigmarError::Validation(format!("{} needs {what}", mode.name())));
        if self.calendar.periods_per_year == 0 {
            return missing("periods_per_year >= 1");
        }
        if self.jobs == Some(0) {
            return missing("jobs >= 1");
        }
        match mode {
            Mode::Simulate | Mode::Benchmark => self.dgp.validate()?,
            Mode::Fit => {
                if self.inputs.data.is_none() {
                    return missing("a data file");
                }
                if self.inputs.weights.is_none() && self.inputs.trade.is_none() {
                    return missing("a weights or trade file");
                }
            }
            Mode::Project => {
                if self.inputs.phi.is_none() {
                    return missing("a phi file");
                }
            }
            Mode::Forecast => {
                if self.window.is_none() {
                    return missing("a window");
                }
                if self.inputs.data.is_some() {
                    if self.inputs.weights.is_none() && self.inputs.trade.is_none() {
                        return missing("a weights or trade file");
                    }
                } else {
                    self.dgp.validate()?;
                }
            }
            Mode::Replicate => {
                if self.cells.is_empty() {
                    return missing("at least one cell");
                }
                if self.reps == 0 {
                    return missing("reps >= 1");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_grammar() {
        let text = "# experiment\nmode = replicate\n\ncells = 3x4x2000, 5x10x1000 ,4x4x50x3  # trailing\nreps=20\nseed = 7\nmethods = bc,mar\nqmle_tol = 1e-8\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.mode, Some(Mode::Replicate));
        assert_eq!(cfg.cells, [
            Cell { k: 3, n: 4, t: 2000, s: 10 },
            Cell { k: 5, n: 10, t: 1000, s: 30 },
            Cell { k: 4, n: 4, t: 50, s: 3 },
        ]);
        assert_eq!((cfg.reps, cfg.seed, cfg.dgp.seed), (20, 7, 7));
        assert_eq!(cfg.methods, [Method::Bc, Method::Mar]);
        assert_eq!(cfg.fit.qmle.tol, 1e-8);
        cfg.validate_for(Mode::Replicate).unwrap();
    }

    #[test]
    fn later_values_override() {
        let mut cfg = ExperimentConfig::parse("seed = 1\nwindow = 10\n").unwrap();
        cfg.set("seed", "9").unwrap();
        assert_eq!((cfg.seed, cfg.window), (9, Some(10)));
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["mode = plot", "colour = red", "reps = -1", "just words", "cells = 3x4", "cells = 7x7x10", "methods = lasso"] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(err, SigmarError::Validation(_)), "{text}: {err}");
            assert!(err.to_string().contains("line 1"), "{err}");
        }
    }

    #[test]
    fn mode_requirements() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate_for(Mode::Fit).is_err());
        assert!(cfg.validate_for(Mode::Project).is_err());
        assert!(cfg.validate_for(Mode::Forecast).is_err());
        cfg.validate_for(Mode::Simulate).unwrap();
        let mut fit = ExperimentConfig::parse("data = x.csv\n").unwrap();
        assert!(fit.validate_for(Mode::Fit).is_err());
        fit.set("trade", "flows.csv").unwrap();
        fit.validate_for(Mode::Fit).unwrap();
    }

    #[test]
    fn calendar_maps_quarters_to_years() {
        let cal = Calendar { first_year: 1980, periods_per_year: 4, trade_window: 3 };
        assert_eq!((cal.year_of(0), cal.year_of(3), cal.year_of(4), cal.year_of(163)), (1980, 1980, 1981, 2020));
    }
}
