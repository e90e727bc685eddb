use serde::Serialize;

use super::config::ExpressivityConfig;
use super::rundir::{loglog_slope, mean_std, median, RunDir, SUMMARY_FILE};
use crate::error::Result;
use crate::expressivity::{
    construct_wl, construct_wq, expressivity_report, randomized_combine, ExpressivityReport, ReportInputs, ReportPopulation,
    SignReport,
};
use crate::harmonics::{sigma_from_coeffs, HarmonicsContext, DEFAULT_DENSE_CAP};
use crate::model::{init_symmetric, Activation, BatchCache};
use crate::objective::CovarianceSplit;
use crate::optimizer::fmt;
use crate::rng::{self, streams};
use crate::spectral::{top_right_singular, FeatureMatrix};
use crate::tasks::{build_dataset, make_fig1_target, sample_sphere_with};

pub const REPORT_HEADER: [&str; 29] = [
    "d",
    "m",
    "n",
    "seed",
    "population",
    "wq_residual_max",
    "wl_rmse",
    "wq_norm24_4",
    "wq_norm2inf",
    "wl_frob_sq",
    "wstar_frob",
    "wstar_2inf",
    "taylor_loss",
    "zero_loss",
    "r1_wstar",
    "r2_wstar",
    "r3_wstar",
    "r4_wstar",
    "r1_wl",
    "r2_wl",
    "r3_wl",
    "r4_wl",
    "r1_wq",
    "r2_wq",
    "r3_wq",
    "r4_wq",
    "sign_energy",
    "sign_reference",
    "sign_ratio",
];
pub const WIDTH_HEADER: [&str; 8] =
    ["m", "seeds", "wq_residual_mean", "wq_residual_std", "wq_norm2inf_mean", "r3_wstar_median", "taylor_loss_mean", "sign_ratio_max"];

#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub m: usize,
    pub seed: u64,
    pub exact_population: bool,
    pub report: ExpressivityReport,
    pub signs: SignReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct WidthRow {
    pub m: usize,
    pub seeds: usize,
    pub wq_residual: (f64, f64),
    pub wq_norm2inf_mean: f64,
    pub r3_wstar_median: f64,
    pub taylor_loss_mean: f64,
    pub zero_loss_mean: f64,
    pub sign_ratio_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpressivitySummary {
    pub d: usize,
    pub n: usize,
    pub widths: Vec<WidthRow>,
    /// Log-log slope of the seed-averaged `W_Q` residual against `m`.
    pub residual_slope: f64,
    /// Log-log slope of the seed-averaged `|W_Q|_{2,inf}` against `m`.
    pub norm2inf_slope: f64,
    pub r3_decreasing: bool,
    /// Largest `E_S E_n[f_L(x; W_Q S)^2] / (|W_Q|_F^2 / m)` over all cells.
    pub sign_ratio_max: f64,
    /// Seed-averaged `L^Q(W*) / L(0)` at the largest width.
    pub taylor_over_zero_at_largest: f64,
    pub triangle_ok: bool,
}

fn cell(cfg: &ExpressivityConfig, m: usize, seed: u64) -> Result<Cell> {
    let d = cfg.d;
    let act = Activation { shift: cfg.shift };
    let init = init_symmetric(d, m, seed)?;
    let target = make_fig1_target(d, seed)?;
    let ctx = HarmonicsContext::for_task(d, target.k)?;
    let data = build_dataset(&target, cfg.n_train(), 1, seed);
    let x = data.x_train;
    let y_low = target.eval_low_batch(x.view());
    let y_sparse = target.eval_sparse_batch(x.view());
    let rank = d + 1;
    let part = top_right_singular(FeatureMatrix::new(x, &init, &act)?, rank)?;
    let w_l = construct_wl(&part, y_low.view())?;
    let w_q = construct_wq(&target, &init, &act, &ctx)?;
    let (w_star, signs) = randomized_combine(w_l.view(), w_q.view(), &part.features.cache, seed, cfg.sign_trials)?;

    let exact = d * m <= DEFAULT_DENSE_CAP;
    let split;
    let fresh;
    let population = if exact {
        split = CovarianceSplit::new(&sigma_from_coeffs(&init, &act, &ctx)?, rank)?;
        ReportPopulation::Exact(&split)
    } else {
        let mut rng = rng::stream(seed, streams::FRESH);
        fresh = BatchCache::new(sample_sphere_with(cfg.n_fresh, d, &mut rng), &init, &act)?;
        ReportPopulation::Sampled { projector: &part, fresh: &fresh }
    };
    let inputs = ReportInputs { part: &part, y: data.y_train.view(), y_low: y_low.view(), y_sparse: y_sparse.view(), population };
    let report = expressivity_report(w_l.view(), w_q.view(), w_star.view(), &inputs)?;
    log::info!("m={m} seed={seed}: W_Q residual {:.4e}, sign ratio {:.3}", report.wq_residual_max, signs.ratio);
    Ok(Cell { m, seed, exact_population: exact, report, signs })
}

fn report_row(cfg: &ExpressivityConfig, c: &Cell) -> Vec<String> {
    let r = &c.report;
    let mut row = vec![
        cfg.d.to_string(),
        c.m.to_string(),
        cfg.n_train().to_string(),
        c.seed.to_string(),
        if c.exact_population { "exact" } else { "sampled" }.to_string(),
    ];
    row.extend(
        [r.wq_residual_max, r.wl_rmse, r.wq_norm24_4, r.wq_norm2inf, r.wl_frob_sq, r.wstar_frob, r.wstar_2inf, r.taylor_loss, r.zero_loss]
            .map(fmt),
    );
    for v in [r.at_wstar, r.at_wl, r.at_wq] {
        row.extend([v.r1, v.r2, v.r3, v.r4].map(fmt));
    }
    row.extend([c.signs.mean_linear_energy, c.signs.reference, c.signs.ratio].map(fmt));
    row
}

pub fn cmd_expressivity(cfg: &ExpressivityConfig, dir: &RunDir) -> Result<ExpressivitySummary> {
    cfg.validate()?;
    let mut widths_sorted = cfg.widths.clone();
    widths_sorted.sort_unstable();
    let jobs: Vec<(usize, u64)> = widths_sorted.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let cells = super::rundir::parallel_map(&jobs, |&(m, s)| cell(cfg, m, s)).into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<String>> = cells.iter().map(|c| report_row(cfg, c)).collect();
    dir.write_table("report.csv", &REPORT_HEADER, &rows)?;

    let widths: Vec<WidthRow> = widths_sorted
        .iter()
        .map(|&m| {
            let g: Vec<&Cell> = cells.iter().filter(|c| c.m == m).collect();
            let col = |f: fn(&Cell) -> f64| g.iter().map(|c| f(c)).collect::<Vec<f64>>();
            WidthRow {
                m,
                seeds: g.len(),
                wq_residual: mean_std(&col(|c| c.report.wq_residual_max)),
                wq_norm2inf_mean: mean_std(&col(|c| c.report.wq_norm2inf)).0,
                r3_wstar_median: median(&col(|c| c.report.at_wstar.r3)),
                taylor_loss_mean: mean_std(&col(|c| c.report.taylor_loss)).0,
                zero_loss_mean: mean_std(&col(|c| c.report.zero_loss)).0,
                sign_ratio_max: col(|c| c.signs.ratio).into_iter().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let table: Vec<Vec<String>> = widths
        .iter()
        .map(|w| {
            vec![
                w.m.to_string(),
                w.seeds.to_string(),
                fmt(w.wq_residual.0),
                fmt(w.wq_residual.1),
                fmt(w.wq_norm2inf_mean),
                fmt(w.r3_wstar_median),
                fmt(w.taylor_loss_mean),
                fmt(w.sign_ratio_max),
            ]
        })
        .collect();
    dir.write_table("widths.csv", &WIDTH_HEADER, &table)?;

    let ms: Vec<f64> = widths.iter().map(|w| w.m as f64).collect();
    let largest = widths.last().expect("validated nonempty");
    let summary = ExpressivitySummary {
        d: cfg.d,
        n: cfg.n_train(),
        residual_slope: loglog_slope(&ms, &widths.iter().map(|w| w.wq_residual.0).collect::<Vec<_>>()),
        norm2inf_slope: loglog_slope(&ms, &widths.iter().map(|w| w.wq_norm2inf_mean).collect::<Vec<_>>()),
        r3_decreasing: widths.windows(2).all(|p| p[1].r3_wstar_median < p[0].r3_wstar_median),
        sign_ratio_max: widths.iter().map(|w| w.sign_ratio_max).fold(f64::NEG_INFINITY, f64::max),
        taylor_over_zero_at_largest: largest.taylor_loss_mean / largest.zero_loss_mean,
        triangle_ok: cells.iter().all(|c| c.signs.triangle_ok),
        widths,
    };
    dir.write_json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}
