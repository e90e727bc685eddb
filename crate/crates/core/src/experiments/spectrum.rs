use serde::Serialize;

use super::config::SpectrumConfig;
use super::rundir::{RunDir, SUMMARY_FILE};
use crate::error::Result;
use crate::harmonics::{monte_carlo_covariance, sigma_from_coeffs, HarmonicsContext, DEFAULT_DENSE_CAP};
use crate::linalg::{sym_eigen_desc, sym_op_norm};
use crate::model::{init_symmetric, Activation};
use crate::optimizer::fmt;
use crate::spectral::{sigma_partition, GapSummary, SPECTRUM_HEADER};

pub const MC_SPECTRUM_HEADER: [&str; 2] = ["index", "value"];

/// Names of the rows appended after the eigenvalues of `spectrum.csv`.
pub const SUMMARY_ROWS: [&str; 7] =
    ["gap_k", "gap_2k", "largest_gap_index", "largest_gap_ratio", "op_distance", "op_std_err", "weyl_max"];

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumSummary {
    pub gaps: GapSummary,
    pub truncation: usize,
    pub tail_mass: f64,
    pub mc_samples: usize,
    pub mc_batches: usize,
    /// `|Sigma_analytic - Sigma_mc|_op` with the batch-mean estimate.
    pub op_distance: f64,
    /// `sqrt(sum_b |Sigma_b - Sigma_mc|_op^2 / (B (B - 1)))`.
    pub op_std_err: f64,
    pub op_distance_over_se: f64,
    /// `max_i |lambda_i - lambda_i^mc|`, bounded by `op_distance`.
    pub weyl_max: f64,
}

fn batch_seed(seed: u64, b: usize) -> u64 {
    seed ^ ((b as u64 + 1) << 32)
}

pub fn cmd_spectrum(cfg: &SpectrumConfig, dir: &RunDir) -> Result<SpectrumSummary> {
    cfg.validate()?;
    let md = cfg.d * cfg.m;
    if md > DEFAULT_DENSE_CAP {
        return Err(crate::error::Error::DenseCap { dim: md, cap: DEFAULT_DENSE_CAP });
    }
    let act = Activation { shift: cfg.shift };
    let init = init_symmetric(cfg.d, cfg.m, cfg.init_seed)?;
    let ctx = match cfg.truncation {
        Some(t) => HarmonicsContext::new(cfg.d, t)?,
        None => HarmonicsContext::for_task(cfg.d, cfg.k)?,
    };
    let sigma = sigma_from_coeffs(&init, &act, &ctx)?;
    let part = sigma_partition(&sigma, cfg.k)?;
    let gaps = part.summary();
    let tail_mass = match &sigma.provenance {
        crate::harmonics::Provenance::Analytic { tail_mass, .. } => *tail_mass,
        _ => f64::NAN,
    };

    log::info!("monte-carlo covariance: {} samples in {} batches", cfg.mc_samples, cfg.mc_batches);
    let per = cfg.mc_samples / cfg.mc_batches;
    let batches: Vec<_> = (0..cfg.mc_batches)
        .map(|b| monte_carlo_covariance(&init, &act, per, batch_seed(cfg.mc_seed, b), false).matrix)
        .collect();
    let bn = batches.len() as f64;
    let mut mean = batches[0].clone();
    for b in &batches[1..] {
        mean += b;
    }
    mean /= bn;
    let op_distance = sym_op_norm((&mean - &sigma.matrix).view());
    let spread: f64 = batches.iter().map(|b| sym_op_norm((b - &mean).view()).powi(2)).sum();
    let op_std_err = (spread / (bn * (bn - 1.0))).sqrt();
    let mc_values = sym_eigen_desc(mean.view()).values;
    let weyl_max = part.values.iter().zip(mc_values.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rows: Vec<Vec<String>> = part
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| vec![(i + 1).to_string(), fmt(*v), part.block_of(i).to_string()])
        .collect();
    let opt = |v: Option<f64>| fmt(v.unwrap_or(f64::NAN));
    let extra = [
        opt(gaps.gap_k),
        opt(gaps.gap_2k),
        gaps.largest_gap.as_ref().map_or("NaN".into(), |g| g.index.to_string()),
        opt(gaps.largest_gap.as_ref().map(|g| g.ratio)),
        fmt(op_distance),
        fmt(op_std_err),
        fmt(weyl_max),
    ];
    for (name, value) in SUMMARY_ROWS.iter().zip(extra) {
        rows.push(vec![name.to_string(), value, "summary".into()]);
    }
    dir.write_table("spectrum.csv", &SPECTRUM_HEADER, &rows)?;
    let mc_rows: Vec<Vec<String>> = mc_values.iter().enumerate().map(|(i, v)| vec![(i + 1).to_string(), fmt(*v)]).collect();
    dir.write_table("spectrum_mc.csv", &MC_SPECTRUM_HEADER, &mc_rows)?;

    let summary = SpectrumSummary {
        gaps,
        truncation: ctx.truncation,
        tail_mass,
        mc_samples: per * cfg.mc_batches,
        mc_batches: cfg.mc_batches,
        op_distance,
        op_std_err,
        op_distance_over_se: op_distance / op_std_err,
        weyl_max,
    };
    dir.write_json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}
