//! Matrix autoregression for panels of countries and variables with a
//! contemporaneous spillover term driven by a known network.

pub mod amabc;
pub mod baselines;
pub mod config;
pub mod error;
pub mod estimate;
pub mod evalx;
pub mod io;
pub mod kronlin;
pub mod model;
pub mod projection;
pub mod qmle;
pub mod replicate;
pub mod simulate;

pub use error::{Result, SigmarError};
pub use kronlin::{Mat, Vector};
pub use model::{PanelSeries, SigmarParams, WeightMatrix};
