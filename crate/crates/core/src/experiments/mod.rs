//! Experiment drivers. Each command validates its config, writes a run
//! directory (resolved config, manifest with seeds and content hash, CSVs,
//! `summary.json`) and returns the summary.

mod config;
mod express;
mod rundir;
mod scaling;
mod spectrum;
mod sweep;

use std::path::Path;

pub use config::{
    ExperimentConfig, ExperimentKind, ExpressivityConfig, Fig1Config, Preset, R1Config, ScalingConfig, SpectrumConfig,
};
pub use express::{cmd_expressivity, ExpressivitySummary, WidthRow, REPORT_HEADER, WIDTH_HEADER};
pub use rundir::{
    content_hash, mean_std, median, moving_average, ols, loglog_slope, parallel_map, thread_count, Manifest, RunDir,
    CONFIG_FILE, MANIFEST_FILE, SUMMARY_FILE, THREADS_ENV,
};
pub use scaling::{cmd_scaling, search_n_star, Attempt, ScalingPoint, ScalingSummary, Search, ATTEMPTS_HEADER, NSTAR_HEADER, NSTAR_SUMMARY_HEADER};
pub use spectrum::{cmd_spectrum, SpectrumSummary, MC_SPECTRUM_HEADER, SUMMARY_ROWS};
pub use sweep::{cmd_fig1, cmd_r1, SweepRow, SweepSummary, CURVES_HEADER, R1_TRACE_HEADER, SUMMARY_HEADER, TRIALS_HEADER};

use crate::error::Result;

/// Runs `cfg` into `out` and returns its summary as JSON.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value> {
    cfg.validate()?;
    let dir = RunDir::create(out, cfg)?;
    let value = match cfg {
        ExperimentConfig::Fig1(c) => serde_json::to_value(cmd_fig1(c, &dir)?)?,
        ExperimentConfig::R1Implicit(c) => serde_json::to_value(cmd_r1(c, &dir)?)?,
        ExperimentConfig::Scaling(c) => serde_json::to_value(cmd_scaling(c, &dir)?)?,
        ExperimentConfig::Spectrum(c) => serde_json::to_value(cmd_spectrum(c, &dir)?)?,
        ExperimentConfig::Expressivity(c) => serde_json::to_value(cmd_expressivity(c, &dir)?)?,
    };
    Ok(value)
}
