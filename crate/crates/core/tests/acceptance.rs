//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Criteria 9 to 11 run the desk presets and take about an hour and a half on
//! one core. `QNTK_ACCEPTANCE_ONLY=1,7` restricts the run to a subset.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use qntk_core::experiments::{
    cmd_expressivity, cmd_fig1, cmd_r1, cmd_scaling, run, ExperimentConfig, ExperimentKind, Preset, RunDir,
    ScalingSummary, SweepSummary,
};
use qntk_core::harmonics::{dim_harmonics, gegenbauer_all, sigma_from_coeffs, sigma_monte_carlo, HarmonicsContext};
use qntk_core::linalg::{inner, sym_eigen_desc};
use qntk_core::model::{forward_full, forward_linear, forward_quadratic, grad_model, init_symmetric, BatchCache};
use qntk_core::objective::{r3_grad, r4, r4_grad, CovarianceSplit, Objective, Population};
use qntk_core::optimizer::{check_first_order, min_hessian_eig};
use qntk_core::spectral::{sigma_partition, top_right_singular, FeatureMatrix};
use qntk_core::tasks::sample_sphere;
use qntk_core::{Activation, LossSpec, ModelKind, RegWeights};

use common::{bounded_columns, fd_grad, gaussian, rel_err, sphere_point, Quadratic};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn workdir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("tempdir")).path()
}

fn desk(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig::preset(kind, Preset::Desk)
}

fn run_dir(name: &str, cfg: &ExperimentConfig) -> RunDir {
    RunDir::create(&workdir().join(name), cfg).expect("run dir")
}

fn fig1_desk() -> &'static SweepSummary {
    static S: OnceLock<SweepSummary> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = desk(ExperimentKind::Fig1);
        let ExperimentConfig::Fig1(c) = &cfg else { unreachable!() };
        cmd_fig1(c, &run_dir("fig1", &cfg)).expect("fig1 run")
    })
}

fn r1_desk() -> &'static SweepSummary {
    static S: OnceLock<SweepSummary> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = desk(ExperimentKind::R1Implicit);
        let ExperimentConfig::R1Implicit(c) = &cfg else { unreachable!() };
        cmd_r1(c, &run_dir("r1", &cfg)).expect("r1 run")
    })
}

fn scaling_desk() -> &'static ScalingSummary {
    static S: OnceLock<ScalingSummary> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = desk(ExperimentKind::Scaling);
        let ExperimentConfig::Scaling(c) = &cfg else { unreachable!() };
        cmd_scaling(c, &run_dir("scaling", &cfg)).expect("scaling run")
    })
}

fn gegenbauer_orthogonality() -> Outcome {
    let mut worst = 0.0f64;
    for d in [5usize, 10, 25] {
        let ctx = HarmonicsContext::new(d, 8).unwrap();
        let root = (d as f64).sqrt();
        let mut buf = Vec::new();
        let mut gram = [[0.0f64; 9]; 9];
        for (&t, &w) in ctx.nodes.iter().zip(&ctx.weights) {
            gegenbauer_all(d, 8, root * t, &mut buf);
            for j in 0..9 {
                for k in 0..9 {
                    gram[j][k] += w * buf[j] * buf[k];
                }
            }
        }
        for j in 0..9 {
            for k in 0..9 {
                let want = if j == k { 1.0 / dim_harmonics(d, k).unwrap() as f64 } else { 0.0 };
                worst = worst.max((gram[j][k] - want).abs());
            }
        }
    }
    Outcome::new(worst < 1e-8, format!("max |<Q_j,Q_k> - delta_jk/B(d,k)| = {worst:.2e} (tol 1e-8)"))
}

fn sigma_cross_validation() -> Outcome {
    let act = Activation::default();
    let init = init_symmetric(6, 8, 0).unwrap();
    let ctx = HarmonicsContext::for_task(6, 1).unwrap();
    let exact = sigma_from_coeffs(&init, &act, &ctx).unwrap();
    let mc = sigma_monte_carlo(&init, &act, 1_000_000, 1);
    let se = mc.std_err().expect("standard errors");
    let mut outside = 0usize;
    let mut worst = 0.0f64;
    for ((a, b), s) in exact.matrix.iter().zip(mc.matrix.iter()).zip(se.iter()) {
        let z = if *s > 0.0 { (a - b).abs() / s } else if a == b { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
        if z > 3.0 {
            outside += 1;
        }
    }
    let psd = |m: &Array2<f64>| sym_eigen_desc(m.view()).values.iter().all(|&v| v >= -1e-12);
    let symmetric = exact.asymmetry() == 0.0 && mc.asymmetry() == 0.0;
    let psd_ok = psd(&exact.matrix) && psd(&mc.matrix);
    let blocks = exact.has_symmetric_block_layout() && mc.has_symmetric_block_layout();
    let pass = outside == 0 && symmetric && psd_ok && blocks;
    Outcome::new(
        pass,
        format!(
            "{outside}/{} entries beyond 3 SE (worst z {worst:.2}); symmetric {symmetric}, PSD {psd_ok}, block layout {blocks}",
            exact.matrix.len()
        ),
    )
}

fn spectral_gap() -> Outcome {
    let act = Activation::default();
    let gap = |d: usize| {
        let init = init_symmetric(d, 30, 0).unwrap();
        let sigma = sigma_from_coeffs(&init, &act, &HarmonicsContext::for_task(d, 1).unwrap()).unwrap();
        sigma_partition(&sigma, 1).unwrap().gap_k.unwrap_or(f64::NAN)
    };
    let gaps: Vec<f64> = [12usize, 20, 32].iter().map(|&d| gap(d)).collect();
    let grows = gaps.windows(2).all(|w| w[1] > w[0]);
    let pass = gaps[1] > 3.0 && grows;
    Outcome::new(
        pass,
        format!("gap at d=20: {:.3} (need > 3); d=12,20,32: {:.3}, {:.3}, {:.3} (increasing {grows})", gaps[1], gaps[0], gaps[1], gaps[2]),
    )
}

fn gradient_correctness() -> Outcome {
    let act = Activation::default();
    let mut worst = [0.0f64; 3];
    for inst in 0..50u64 {
        let mut r = common::rng(1000 + inst);
        let d = 3 + (inst % 4) as usize;
        let m = 2 * (1 + (inst % 3) as usize);
        let init = init_symmetric(d, m, inst).unwrap();
        let x = sphere_point(d, &mut r);
        let w = gaussian((d, m), &mut r) * 0.5;
        for (slot, kind) in [(0usize, ModelKind::Full), (1, ModelKind::Taylor)] {
            let g = grad_model(x.view(), &init, &act, w.view(), kind).unwrap();
            let f = |v: ndarray::ArrayView2<'_, f64>| match kind {
                ModelKind::Full => forward_full(x.view(), &init, &act, v).unwrap(),
                _ => forward_linear(x.view(), &init, &act, v).unwrap() + forward_quadratic(x.view(), &init, &act, v).unwrap(),
            };
            worst[slot] = worst[slot].max(rel_err(g.view(), fd_grad(f, w.view(), 1e-5).view(), 1e-8));
        }

        let n = 10;
        let sigma = sigma_from_coeffs(&init, &act, &HarmonicsContext::for_task(d, 1).unwrap()).unwrap();
        let split = CovarianceSplit::new(&sigma, d + 1).unwrap();
        let batch = BatchCache::new(sample_sphere(n, d, 2000 + inst), &init, &act).unwrap();
        let part = top_right_singular(FeatureMatrix::from_cache(batch.clone()), d + 1).unwrap();
        let y = gaussian((n, 1), &mut r).column(0).to_owned();
        let weights = RegWeights { l1: 0.3, l2: 0.2, l3: 0.5, l4: 0.1, rank: None };
        let obj = Objective::new(&batch, y.view(), LossSpec::square(), ModelKind::Taylor, weights)
            .unwrap()
            .with_partition(&part)
            .with_population(Population::Exact(&split));
        let (_, g) = obj.evaluate(w.view()).unwrap();
        let fd = fd_grad(|v| obj.evaluate(v).unwrap().0.total, w.view(), 1e-5);
        worst[2] = worst[2].max(rel_err(g.view(), fd.view(), 1e-8));
    }
    let pass = worst.iter().all(|&e| e < 1e-5);
    Outcome::new(
        pass,
        format!("max relative error: f {:.2e}, f_L + f_Q {:.2e}, L_lambda {:.2e} (tol 1e-5)", worst[0], worst[1], worst[2]),
    )
}

fn coupling_inequalities() -> Outcome {
    let act = Activation::default();
    let (mut value_viol, mut grad_viol) = (0usize, 0usize);
    for draw in 0..1000u64 {
        let mut r = common::rng(5000 + draw);
        let d = 3 + (draw % 6) as usize;
        let m = 2 * (1 + (draw % 6) as usize);
        let init = init_symmetric(d, m, draw).unwrap();
        let x = sphere_point(d, &mut r);
        let w = bounded_columns(d, m, 1.0, &mut r);
        let dir = bounded_columns(d, m, 1.0, &mut r);
        let sm = (m as f64).sqrt();
        let full = forward_full(x.view(), &init, &act, w.view()).unwrap();
        let taylor = forward_linear(x.view(), &init, &act, w.view()).unwrap() + forward_quadratic(x.view(), &init, &act, w.view()).unwrap();
        let bound: f64 = w.columns().into_iter().map(|c| c.dot(&x).abs().powi(3)).sum::<f64>() / sm;
        if (full - taylor).abs() > bound + 1e-14 {
            value_viol += 1;
        }
        let gf = grad_model(x.view(), &init, &act, w.view(), ModelKind::Full).unwrap();
        let gt = grad_model(x.view(), &init, &act, w.view(), ModelKind::Taylor).unwrap();
        let lhs = inner((&gt - &gf).view(), dir.view()).abs();
        let gbound: f64 =
            w.columns().into_iter().zip(dir.columns()).map(|(c, t)| t.dot(&x).abs() * c.dot(&x).powi(2)).sum::<f64>() / sm;
        if lhs > gbound + 1e-14 {
            grad_viol += 1;
        }
    }
    Outcome::new(value_viol == 0 && grad_viol == 0, format!("violations over 1000 draws: value {value_viol}, gradient {grad_viol}"))
}

fn regularizer_identities() -> Outcome {
    let act = Activation::default();
    let mut worst_rel = 0.0f64;
    let mut worst_quad = 0.0f64;
    for inst in 0..20u64 {
        let d = 4 + (inst % 4) as usize;
        let m = 4 + 2 * (inst % 3) as usize;
        let init = init_symmetric(d, m, inst).unwrap();
        let sigma = sigma_from_coeffs(&init, &act, &HarmonicsContext::for_task(d, 1).unwrap()).unwrap();
        let split = CovarianceSplit::new(&sigma, d + 1).unwrap();
        let w = gaussian((d, m), &mut common::rng(7000 + inst));
        let (r1, g1, r2, g2) = split.r1_r2_grad(w.view()).unwrap();
        let part = top_right_singular(FeatureMatrix::new(sample_sphere(20, d, inst), &init, &act).unwrap(), d + 1).unwrap();
        let (r3, g3) = r3_grad(w.view(), &part);
        let r4v = r4(w.view());
        for (lhs, rhs) in [
            (inner(g1.view(), w.view()), 2.0 * r1),
            (inner(g2.view(), w.view()), 2.0 * r2),
            (inner(g3.view(), w.view()), 2.0 * r3),
            (inner(r4_grad(w.view()).view(), w.view()), 8.0 * r4v),
        ] {
            worst_rel = worst_rel.max((lhs - rhs).abs() / rhs.abs());
        }
        let quad = split.full(w.view()).unwrap();
        worst_quad = worst_quad.max((r1 + r2 - quad).abs());
    }
    Outcome::new(
        worst_rel < 1e-10 && worst_quad < 1e-8,
        format!("max relative identity error {worst_rel:.2e} (tol 1e-10); max |R1 + R2 - w.Sigma.w| {worst_quad:.2e} (tol 1e-8)"),
    )
}

fn sosp_diagnostics() -> Outcome {
    let gamma = 0.5;
    let mut r = common::rng(12);
    let g = gaussian((12, 12), &mut r);
    let convex = Quadratic { a: g.t().dot(&g) / 12.0 + Array2::<f64>::eye(12) * 0.1, shape: (3, 4) };
    let origin = Array2::zeros((3, 4));
    let accepted = check_first_order(origin.view(), &convex, 1e-12).unwrap()
        && min_hessian_eig(origin.view(), &convex, 1e-9, 5000).unwrap().value >= -gamma;
    let mut s = Array2::<f64>::eye(12);
    s[[5, 5]] = -1.0;
    let saddle = Quadratic { a: s, shape: (3, 4) };
    let rejected = check_first_order(origin.view(), &saddle, 1e-12).unwrap()
        && min_hessian_eig(origin.view(), &saddle, 1e-9, 5000).unwrap().value < -gamma;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let a = common::random_symmetric(50, &mut r);
        let oracle = *sym_eigen_desc(a.view()).values.iter().last().unwrap();
        let q = Quadratic { a, shape: (5, 10) };
        let w = gaussian((5, 10), &mut r);
        worst = worst.max((min_hessian_eig(w.view(), &q, 1e-9, 20_000).unwrap().value - oracle).abs());
    }
    Outcome::new(
        accepted && rejected && worst < 1e-6,
        format!("convex accepted {accepted}, saddle rejected {rejected}; max |lambda_min - dense| {worst:.2e} (tol 1e-6)"),
    )
}

fn expressivity_scaling() -> Outcome {
    let cfg = desk(ExperimentKind::Expressivity);
    let ExperimentConfig::Expressivity(c) = &cfg else { unreachable!() };
    let s = cmd_expressivity(c, &run_dir("expressivity", &cfg)).expect("expressivity run");
    let slope_ok = (-0.75..=-0.25).contains(&s.residual_slope);
    let sign_ok = s.sign_ratio_max <= 1.5;
    Outcome::new(
        slope_ok && sign_ok,
        format!(
            "W_Q residual slope {:.3} (need [-0.75, -0.25]); max sign ratio {:.3} over {} draws (need <= 1.5)",
            s.residual_slope, s.sign_ratio_max, c.sign_trials
        ),
    )
}

fn figure1_desk() -> Outcome {
    let s = fig1_desk();
    let test = s.test_ratio_largest_vs_zero.unwrap_or(f64::NAN);
    let r3 = s.r3_ratio_zero_vs_largest.unwrap_or(f64::NAN);
    let pass = s.max_final_train_loss < 0.05 && test <= 0.5 && r3 >= 10.0;
    Outcome::new(
        pass,
        format!(
            "max train {:.4} (need < 0.05); test largest/zero {test:.3} (need <= 0.5); R3 zero/largest {r3:.2} (need >= 10)",
            s.max_final_train_loss
        ),
    )
}

fn scaling_law_desk() -> Outcome {
    let s = scaling_desk();
    let points: Vec<String> =
        s.points.iter().map(|p| format!("d={} n*={}{}", p.d, p.n_star_mean, if p.censored > 0 { " (censored)" } else { "" })).collect();
    let slope_ok = !s.any_censored && (1.4..=2.6).contains(&s.slope);
    let pass = slope_ok && s.below_d3;
    Outcome::new(
        pass,
        format!("slope {:.3} (need [1.4, 2.6], uncensored); below d^3 {}; {}", s.slope, s.below_d3, points.join(", ")),
    )
}

fn r1_desk_check() -> Outcome {
    let s = r1_desk();
    let test = s.test_ratio_zero_vs_best.unwrap_or(f64::NAN);
    let ma = s.r1_ma_ratio_zero_vs_largest.unwrap_or(f64::NAN);
    Outcome::new(
        test <= 1.5 && ma <= 10.0,
        format!("test zero/best {test:.3} (need <= 1.5); R1 MA zero/largest {ma:.3} (need <= 10)"),
    )
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Compares every CSV under `a` with its counterpart under `b`.
fn identical(a: &Path, b: &Path) -> Result<usize, String> {
    let files = csv_files(a);
    if files != csv_files(b) {
        return Err("file sets differ".into());
    }
    for f in &files {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            return Err(format!("{} differs", f.display()));
        }
    }
    Ok(files.len())
}

fn determinism() -> Outcome {
    let reduced_scaling = ExperimentConfig::resolve(
        ExperimentKind::Scaling,
        Preset::Desk,
        Some("dims = [10, 14]\nn_max = 160\n[train]\nmax_steps = 2000\n"),
    )
    .unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, cfg, first) in [
        ("fig1", desk(ExperimentKind::Fig1), Some(workdir().join("fig1"))),
        ("r1", desk(ExperimentKind::R1Implicit), Some(workdir().join("r1"))),
        ("spectrum", desk(ExperimentKind::Spectrum), None),
        ("expressivity", desk(ExperimentKind::Expressivity), Some(workdir().join("expressivity"))),
        ("scaling", reduced_scaling, None),
    ] {
        let first = match first.filter(|p| p.join("summary.json").is_file()) {
            Some(p) => p,
            None => {
                let p = workdir().join(format!("{name}-a"));
                run(&cfg, &p).expect("first run");
                p
            }
        };
        let again = workdir().join(format!("{name}-rerun"));
        run(&cfg, &again).expect("rerun");
        match identical(&first, &again) {
            Ok(n) => notes.push(format!("{name} {n} CSVs identical")),
            Err(e) => {
                pass = false;
                notes.push(format!("{name}: {e}"));
            }
        }
    }
    Outcome::new(pass, notes.join("; "))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "Gegenbauer orthogonality", gegenbauer_orthogonality),
    (2, "Sigma analytic vs Monte Carlo", sigma_cross_validation),
    (3, "spectral gap", spectral_gap),
    (4, "gradient correctness", gradient_correctness),
    (5, "coupling inequalities", coupling_inequalities),
    (6, "regularizer identities", regularizer_identities),
    (7, "SOSP diagnostics", sosp_diagnostics),
    (8, "expressivity scaling", expressivity_scaling),
    (9, "lambda3 sweep desk run", figure1_desk),
    (10, "sample-complexity scaling desk run", scaling_law_desk),
    (11, "R1 implicit regularization desk run", r1_desk_check),
    (12, "determinism", determinism),
];

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("QNTK_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] criterion {id:>2} {name}: {} ({:.1} s)", outcome.detail, start.elapsed().as_secs_f64());
        if !outcome.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
