//! Sample complexity of the full network on a dense quadratic plus sparse cubic.

use serde::Serialize;

use super::config::ScalingConfig;
use super::rundir::{mean_std, ols, parallel_map, RunDir, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::model::{check_hermite_assumption, init_symmetric, Activation};
use crate::objective::{LossSpec, RegWeights};
use crate::optimizer::{fmt, train, StopReason, TrainConfig};
use crate::tasks::{build_dataset, make_dense_quad_sparse_cubic};

pub const ATTEMPTS_HEADER: [&str; 10] =
    ["d", "seed", "n", "final_step", "final_train_loss", "final_test_loss", "final_test_mse", "zero_test_loss", "stop", "success"];
pub const NSTAR_HEADER: [&str; 5] = ["d", "seed", "n_star", "censored", "attempts"];
pub const NSTAR_SUMMARY_HEADER: [&str; 6] = ["d", "trials", "censored", "n_star_mean", "n_star_std", "d3_reference"];

#[derive(Debug, Clone, Serialize)]
pub struct Attempt {
    pub n: usize,
    pub final_step: usize,
    pub train_loss: f64,
    /// Square loss in the 1/2 convention; the zero predictor scores about 1.
    pub test_loss: f64,
    pub zero_test_loss: f64,
    pub stop: StopReason,
    pub success: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Search {
    pub d: usize,
    pub seed: u64,
    /// Smallest successful `n`, or `n_max` when censored.
    pub n_star: usize,
    pub censored: bool,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub d: usize,
    pub trials: usize,
    pub censored: usize,
    pub n_star_mean: f64,
    pub n_star_std: f64,
    /// `n_star(d0) (d / d0)^3` for the smallest dimension `d0`.
    pub d3_reference: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingSummary {
    pub m: usize,
    pub lr: f64,
    pub threshold: f64,
    pub points: Vec<ScalingPoint>,
    /// Log-log least-squares slope of mean `n_star` against `d` (uncensored points).
    pub slope: f64,
    pub intercept: f64,
    /// Every point above the anchor lies strictly below the `d^3` line.
    pub below_d3: bool,
    pub any_censored: bool,
}

fn attempt(cfg: &ScalingConfig, d: usize, seed: u64, n: usize) -> Result<Attempt> {
    let act = Activation { shift: cfg.shift };
    let init = init_symmetric(d, cfg.m, seed)?;
    let target = make_dense_quad_sparse_cubic(d, seed)?;
    let data = build_dataset(&target, n, cfg.n_test, seed);
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let zero_test_loss = 0.5 * data.y_test.mapv(|v| v * v).mean().unwrap_or(f64::NAN);
    let out = match train(&init, &act, &data, LossSpec::square(), RegWeights::default(), &tcfg) {
        Ok(rec) => {
            let last = rec.last().ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
            Attempt {
                n,
                final_step: last.step,
                train_loss: last.train_loss,
                test_loss: last.test_loss,
                zero_test_loss,
                stop: rec.stop,
                success: rec.stop != StopReason::Diverged && last.test_loss < cfg.threshold,
            }
        }
        Err(Error::NonFiniteGradient { step }) => Attempt {
            n,
            final_step: step,
            train_loss: f64::NAN,
            test_loss: f64::NAN,
            zero_test_loss,
            stop: StopReason::Diverged,
            success: false,
        },
        Err(e) => return Err(e),
    };
    log::info!("d={d} seed={seed} n={n}: test {:.4} ({}) after {} steps", out.test_loss, if out.success { "pass" } else { "fail" }, out.final_step);
    Ok(out)
}

/// Doubling from `n_start` until success, then bisection between the last
/// failure and the first success.
pub fn search_n_star(cfg: &ScalingConfig, d: usize, seed: u64) -> Result<Search> {
    let mut attempts = Vec::new();
    let mut n = cfg.n_start.unwrap_or(d);
    let mut lo: Option<usize> = None;
    let hi = loop {
        let a = attempt(cfg, d, seed, n)?;
        let ok = a.success;
        attempts.push(a);
        if ok {
            break Some(n);
        }
        lo = Some(n);
        if n >= cfg.n_max {
            break None;
        }
        n = (2 * n).min(cfg.n_max);
    };
    let Some(mut hi) = hi else {
        return Ok(Search { d, seed, n_star: cfg.n_max, censored: true, attempts });
    };
    if let Some(mut lo) = lo {
        while hi - lo > 1 && (hi - lo) as f64 > cfg.resolution * hi as f64 {
            let mid = lo + (hi - lo) / 2;
            let a = attempt(cfg, d, seed, mid)?;
            if a.success {
                hi = mid;
            } else {
                lo = mid;
            }
            attempts.push(a);
        }
    }
    Ok(Search { d, seed, n_star: hi, censored: false, attempts })
}

pub fn cmd_scaling(cfg: &ScalingConfig, dir: &RunDir) -> Result<ScalingSummary> {
    cfg.validate()?;
    let report = check_hermite_assumption(&Activation { shift: cfg.shift }, 2);
    if !report.satisfied() {
        return Err(Error::Config(format!("activation shift {} leaves Hermite coefficients {:?} at zero", cfg.shift, report.flagged)));
    }
    let jobs: Vec<(usize, u64)> = cfg.dims.iter().flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s))).collect();
    let searches = parallel_map(&jobs, |&(d, s)| search_n_star(cfg, d, s)).into_iter().collect::<Result<Vec<_>>>()?;

    let mut attempt_rows = Vec::new();
    let mut nstar_rows = Vec::new();
    for s in &searches {
        for a in &s.attempts {
            attempt_rows.push(vec![
                s.d.to_string(),
                s.seed.to_string(),
                a.n.to_string(),
                a.final_step.to_string(),
                fmt(a.train_loss),
                fmt(a.test_loss),
                fmt(2.0 * a.test_loss),
                fmt(a.zero_test_loss),
                a.stop.name().into(),
                a.success.to_string(),
            ]);
        }
        nstar_rows.push(vec![s.d.to_string(), s.seed.to_string(), s.n_star.to_string(), s.censored.to_string(), s.attempts.len().to_string()]);
    }
    dir.write_table("attempts.csv", &ATTEMPTS_HEADER, &attempt_rows)?;
    dir.write_table("nstar.csv", &NSTAR_HEADER, &nstar_rows)?;

    let mut points: Vec<ScalingPoint> = cfg
        .dims
        .iter()
        .map(|&d| {
            let group: Vec<&Search> = searches.iter().filter(|s| s.d == d).collect();
            let vals: Vec<f64> = group.iter().map(|s| s.n_star as f64).collect();
            let (mean, std) = mean_std(&vals);
            ScalingPoint {
                d,
                trials: group.len(),
                censored: group.iter().filter(|s| s.censored).count(),
                n_star_mean: mean,
                n_star_std: std,
                d3_reference: f64::NAN,
            }
        })
        .collect();
    points.sort_by_key(|p| p.d);
    let anchor = points[0].n_star_mean;
    let d0 = points[0].d as f64;
    for p in &mut points {
        p.d3_reference = anchor * (p.d as f64 / d0).powi(3);
    }
    let table: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![p.d.to_string(), p.trials.to_string(), p.censored.to_string(), fmt(p.n_star_mean), fmt(p.n_star_std), fmt(p.d3_reference)]
        })
        .collect();
    dir.write_table("nstar_summary.csv", &NSTAR_SUMMARY_HEADER, &table)?;

    let fit: Vec<&ScalingPoint> = points.iter().filter(|p| p.censored == 0).collect();
    let xs: Vec<f64> = fit.iter().map(|p| p.d as f64).collect();
    let ys: Vec<f64> = fit.iter().map(|p| p.n_star_mean).collect();
    let (slope, intercept) = if fit.len() >= 2 {
        let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
        ols(&lx, &ly)
    } else {
        (f64::NAN, f64::NAN)
    };
    let summary = ScalingSummary {
        m: cfg.m,
        lr: cfg.train.lr,
        threshold: cfg.threshold,
        below_d3: points.iter().skip(1).all(|p| p.n_star_mean < p.d3_reference),
        any_censored: points.iter().any(|p| p.censored > 0),
        points,
        slope,
        intercept,
    };
    dir.write_json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}
