//! λ sweeps of the Taylor model: the λ3 study and the λ1 study at fixed λ3.

use serde::Serialize;

use super::config::{Fig1Config, R1Config};
use super::rundir::{mean_std, moving_average, parallel_map, RunDir};
use crate::error::{Error, Result};
use crate::model::{check_hermite_assumption, init_symmetric, Activation};
use crate::objective::{LossSpec, RegWeights};
use crate::optimizer::{fmt, train, StopReason, TrainConfig, TrajectoryRecord};
use crate::tasks::{build_dataset, make_fig1_target};

pub const TRIALS_HEADER: [&str; 9] =
    ["value", "seed", "final_step", "final_train_loss", "final_test_loss", "final_r1", "final_r1_ma", "final_r3", "stop"];
pub const SUMMARY_HEADER: [&str; 12] = [
    "value",
    "trials",
    "diverged",
    "train_loss_mean",
    "train_loss_std",
    "test_loss_mean",
    "test_loss_std",
    "r1_ma_mean",
    "r1_ma_std",
    "r3_mean",
    "r3_std",
    "r1_ma_peak_mean",
];
pub const CURVES_HEADER: [&str; 9] =
    ["value", "step", "trials", "train_loss_mean", "train_loss_std", "test_loss_mean", "test_loss_std", "r3_mean", "r3_std"];
pub const R1_TRACE_HEADER: [&str; 3] = ["step", "r1", "r1_ma"];

/// One grid value aggregated over the non-diverged trials.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub trials: usize,
    pub diverged: usize,
    pub train_loss: (f64, f64),
    pub test_loss: (f64, f64),
    pub r1_ma: (f64, f64),
    pub r3: (f64, f64),
    pub r1_ma_peak: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    /// Name of the swept weight, `lambda3` or `lambda1`.
    pub parameter: String,
    pub fixed_lambda3: Option<f64>,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    pub optimizer: String,
    pub lr: f64,
    pub max_steps: usize,
    pub rows: Vec<SweepRow>,
    /// Largest final train loss over every trial of every grid value.
    pub max_final_train_loss: f64,
    /// Mean final test loss at the largest value over that at zero.
    pub test_ratio_largest_vs_zero: Option<f64>,
    /// Mean final R3 at zero over that at the largest value.
    pub r3_ratio_zero_vs_largest: Option<f64>,
    /// Mean final test loss at zero over the best mean in the grid.
    pub test_ratio_zero_vs_best: Option<f64>,
    /// Mean final R1 moving average at zero over that at the largest value.
    pub r1_ma_ratio_zero_vs_largest: Option<f64>,
}

struct Trial {
    value: f64,
    seed: u64,
    record: Option<TrajectoryRecord>,
}

impl Trial {
    fn stop(&self) -> StopReason {
        self.record.as_ref().map_or(StopReason::Diverged, |r| r.stop)
    }

    fn r1_trace(&self, window: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let Some(rec) = &self.record else { return Default::default() };
        let steps: Vec<usize> = rec.rows.iter().map(|r| r.step).collect();
        let raw: Vec<f64> = rec.rows.iter().map(|r| r.r1).collect();
        let ma = moving_average(&raw, window);
        (steps, raw, ma)
    }
}

struct SweepSpec<'a> {
    parameter: &'static str,
    d: usize,
    n: usize,
    n_test: usize,
    m: usize,
    rank: Option<usize>,
    shift: f64,
    grid: &'a [f64],
    seeds: &'a [u64],
    train: &'a TrainConfig,
    weights: &'a (dyn Fn(f64) -> RegWeights + Sync),
    fixed_lambda3: Option<f64>,
    /// Moving-average window for R1, when it is tracked.
    ma_window: Option<usize>,
}

fn run_trial(spec: &SweepSpec<'_>, value: f64, seed: u64) -> Result<Trial> {
    let act = Activation { shift: spec.shift };
    let init = init_symmetric(spec.d, spec.m, seed)?;
    let target = make_fig1_target(spec.d, seed)?;
    let data = build_dataset(&target, spec.n, spec.n_test, seed);
    let cfg = TrainConfig { seed, ..spec.train.clone() };
    let label = format!("{}={} seed={seed}", spec.parameter, fmt(value));
    log::info!("training {label}");
    match train(&init, &act, &data, LossSpec::square(), (spec.weights)(value), &cfg) {
        Ok(record) => {
            if let Some(last) = record.last() {
                log::info!("{label}: step {} train {:.4} test {:.4} r3 {:.3e}", last.step, last.train_loss, last.test_loss, last.r3);
            }
            Ok(Trial { value, seed, record: Some(record) })
        }
        Err(Error::NonFiniteGradient { step }) => {
            log::warn!("{label}: non-finite gradient at step {step}");
            Ok(Trial { value, seed, record: None })
        }
        Err(e) => Err(e),
    }
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

fn run_sweep(spec: SweepSpec<'_>, dir: &RunDir) -> Result<SweepSummary> {
    let report = check_hermite_assumption(&Activation { shift: spec.shift }, 1);
    if !report.satisfied() {
        return Err(Error::Config(format!("activation shift {} leaves Hermite coefficients {:?} at zero", spec.shift, report.flagged)));
    }
    let jobs: Vec<(f64, u64)> = spec.grid.iter().flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s))).collect();
    let trials = parallel_map(&jobs, |&(v, s)| run_trial(&spec, v, s)).into_iter().collect::<Result<Vec<_>>>()?;
    let window = spec.ma_window.unwrap_or(1);

    let mut trial_rows = Vec::new();
    for t in &trials {
        let tag = format!("{}_{}_seed_{}", spec.parameter, fmt(t.value), t.seed);
        if let Some(rec) = &t.record {
            rec.write_csv(dir.file(&format!("trajectories/{tag}.csv"))?)?;
        }
        let (steps, raw, ma) = t.r1_trace(window);
        if spec.ma_window.is_some() {
            let rows: Vec<Vec<String>> =
                (0..steps.len()).map(|i| vec![steps[i].to_string(), fmt(raw[i]), fmt(ma[i])]).collect();
            dir.write_table(&format!("r1_trace/{tag}.csv"), &R1_TRACE_HEADER, &rows)?;
        }
        let last = t.record.as_ref().and_then(|r| r.last());
        let get = |f: fn(&crate::optimizer::TrajectoryRow) -> f64| last.map_or(f64::NAN, f);
        trial_rows.push(vec![
            fmt(t.value),
            t.seed.to_string(),
            last.map_or("NaN".into(), |r| r.step.to_string()),
            fmt(get(|r| r.train_loss)),
            fmt(get(|r| r.test_loss)),
            fmt(get(|r| r.r1)),
            fmt(ma.last().copied().unwrap_or(f64::NAN)),
            fmt(get(|r| r.r3)),
            t.stop().name().into(),
        ]);
    }
    dir.write_table("trials.csv", &TRIALS_HEADER, &trial_rows)?;

    let mut rows = Vec::new();
    let mut curve_rows = Vec::new();
    let mut max_train = f64::NEG_INFINITY;
    for &value in spec.grid {
        let group: Vec<&Trial> = trials.iter().filter(|t| t.value == value).collect();
        let ok: Vec<&TrajectoryRecord> = group
            .iter()
            .filter(|t| t.stop() != StopReason::Diverged)
            .filter_map(|t| t.record.as_ref())
            .collect();
        let finals = |f: fn(&crate::optimizer::TrajectoryRow) -> f64| -> Vec<f64> {
            ok.iter().filter_map(|r| r.last()).map(f).collect()
        };
        let train_f = finals(|r| r.train_loss);
        max_train = train_f.iter().copied().fold(max_train, f64::max);
        let ok_trials: Vec<&&Trial> = group.iter().filter(|t| t.stop() != StopReason::Diverged && t.record.is_some()).collect();
        let ma_final: Vec<f64> = ok_trials.iter().filter_map(|t| t.r1_trace(window).2.last().copied()).collect();
        let ma_peak: Vec<f64> =
            ok_trials.iter().map(|t| t.r1_trace(window).2.into_iter().fold(f64::NEG_INFINITY, f64::max)).collect();
        rows.push(SweepRow {
            value,
            trials: ok.len(),
            diverged: group.len() - ok.len(),
            train_loss: mean_std(&train_f),
            test_loss: mean_std(&finals(|r| r.test_loss)),
            r1_ma: mean_std(&ma_final),
            r3: mean_std(&finals(|r| r.r3)),
            r1_ma_peak: mean_std(&ma_peak).0,
        });

        // Per-step aggregates over the trials that logged that step.
        let mut steps: Vec<usize> = ok.iter().flat_map(|r| r.rows.iter().map(|x| x.step)).collect();
        steps.sort_unstable();
        steps.dedup();
        for step in steps {
            let at: Vec<&crate::optimizer::TrajectoryRow> =
                ok.iter().filter_map(|r| r.rows.iter().find(|x| x.step == step)).collect();
            let col = |f: fn(&crate::optimizer::TrajectoryRow) -> f64| mean_std(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (tr, te, r3) = (col(|r| r.train_loss), col(|r| r.test_loss), col(|r| r.r3));
            curve_rows.push(vec![
                fmt(value),
                step.to_string(),
                at.len().to_string(),
                fmt(tr.0),
                fmt(tr.1),
                fmt(te.0),
                fmt(te.1),
                fmt(r3.0),
                fmt(r3.1),
            ]);
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt(r.value),
                r.trials.to_string(),
                r.diverged.to_string(),
                fmt(r.train_loss.0),
                fmt(r.train_loss.1),
                fmt(r.test_loss.0),
                fmt(r.test_loss.1),
                fmt(r.r1_ma.0),
                fmt(r.r1_ma.1),
                fmt(r.r3.0),
                fmt(r.r3.1),
                fmt(r.r1_ma_peak),
            ]
        })
        .collect();
    dir.write_table("summary.csv", &SUMMARY_HEADER, &table)?;
    dir.write_table("curves.csv", &CURVES_HEADER, &curve_rows)?;

    let zero = rows.iter().find(|r| r.value == 0.0 && r.trials > 0);
    let largest = rows.iter().filter(|r| r.trials > 0).max_by(|a, b| a.value.total_cmp(&b.value)).filter(|r| r.value > 0.0);
    let best = rows.iter().filter(|r| r.trials > 0).map(|r| r.test_loss.0).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
    let tracked = spec.ma_window.is_some();
    let rank = match spec.rank {
        Some(r) => r,
        None => spec.d + 1,
    };
    Ok(SweepSummary {
        parameter: spec.parameter.into(),
        fixed_lambda3: spec.fixed_lambda3,
        d: spec.d,
        n: spec.n,
        m: spec.m,
        rank,
        optimizer: if spec.train.noise_var > 0.0 { "full-batch perturbed gradient descent" } else { "full-batch gradient descent" }.into(),
        lr: spec.train.lr,
        max_steps: spec.train.max_steps,
        max_final_train_loss: max_train,
        test_ratio_largest_vs_zero: ratio(largest.map(|r| r.test_loss.0), zero.map(|r| r.test_loss.0)),
        r3_ratio_zero_vs_largest: ratio(zero.map(|r| r.r3.0), largest.map(|r| r.r3.0)),
        test_ratio_zero_vs_best: ratio(zero.map(|r| r.test_loss.0), best),
        r1_ma_ratio_zero_vs_largest: if tracked { ratio(zero.map(|r| r.r1_ma.0), largest.map(|r| r.r1_ma.0)) } else { None },
        rows,
    })
}

pub fn cmd_fig1(cfg: &Fig1Config, dir: &RunDir) -> Result<SweepSummary> {
    cfg.validate()?;
    let rank = cfg.rank;
    let weights = move |l3: f64| RegWeights { l3, rank, ..RegWeights::default() };
    let summary = run_sweep(
        SweepSpec {
            parameter: "lambda3",
            d: cfg.d,
            n: cfg.n_train()?,
            n_test: cfg.n_test,
            m: cfg.m,
            rank,
            shift: cfg.shift,
            grid: &cfg.lambda3,
            seeds: &cfg.seeds,
            train: &cfg.train,
            weights: &weights,
            fixed_lambda3: None,
            ma_window: None,
        },
        dir,
    )?;
    dir.write_json(super::rundir::SUMMARY_FILE, &summary)?;
    Ok(summary)
}

pub fn cmd_r1(cfg: &R1Config, dir: &RunDir) -> Result<SweepSummary> {
    cfg.validate()?;
    let (rank, l3) = (cfg.rank, cfg.lambda3);
    let weights = move |l1: f64| RegWeights { l1, l3, rank, ..RegWeights::default() };
    let summary = run_sweep(
        SweepSpec {
            parameter: "lambda1",
            d: cfg.d,
            n: cfg.n_train()?,
            n_test: cfg.n_test,
            m: cfg.m,
            rank,
            shift: cfg.shift,
            grid: &cfg.lambda1,
            seeds: &cfg.seeds,
            train: &cfg.train,
            weights: &weights,
            fixed_lambda3: Some(l3),
            ma_window: Some(cfg.ma_window),
        },
        dir,
    )?;
    dir.write_json(super::rundir::SUMMARY_FILE, &summary)?;
    Ok(summary)
}
