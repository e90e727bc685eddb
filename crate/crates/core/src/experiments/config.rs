use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, ModelKind};
use crate::optimizer::{PopulationMode, TrainConfig};

fn default_shift() -> f64 {
    Activation::default().shift
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    /// Paper-scale sizes. Long-running.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Fig1,
    Scaling,
    R1Implicit,
    Spectrum,
    Expressivity,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Fig1,
        ExperimentKind::Scaling,
        ExperimentKind::R1Implicit,
        ExperimentKind::Spectrum,
        ExperimentKind::Expressivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Fig1 => "fig1",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::R1Implicit => "r1-implicit",
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::Expressivity => "expressivity",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r1" => Ok(ExperimentKind::R1Implicit),
            _ => ExperimentKind::ALL
                .into_iter()
                .find(|k| k.name() == s)
                .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}"))),
        }
    }
}

/// Sample count given either directly or as `ceil(d^rho)`.
fn resolve_n(d: usize, n: Option<usize>, rho: Option<f64>, what: &str) -> Result<usize> {
    match (n, rho) {
        (Some(n), None) => Ok(n),
        (None, Some(rho)) if rho > 0.0 => Ok((d as f64).powf(rho).ceil() as usize),
        (Some(_), Some(_)) => Err(Error::Config(format!("{what}: give n or rho, not both"))),
        _ => Err(Error::Config(format!("{what}: one of n or rho (> 0) is required"))),
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!("{name} grid is empty")));
    }
    if grid.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("{name} values must be finite and nonnegative")));
    }
    Ok(())
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("seeds list is empty".into()));
    }
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != seeds.len() {
        return Err(Error::Config("seeds must be distinct".into()));
    }
    Ok(())
}

fn check_sizes(d: usize, n: usize, n_test: usize, m: usize) -> Result<()> {
    if d < 3 {
        return Err(Error::Config(format!("d must be at least 3, got {d}")));
    }
    if n == 0 || n_test == 0 {
        return Err(Error::Config("n and n_test must be positive".into()));
    }
    if m < 2 || m % 2 != 0 {
        return Err(Error::Config(format!("m must be even and at least 2, got {m}")));
    }
    Ok(())
}

/// λ3 sweep of the Taylor model with only R3 active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig1Config {
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub n_test: usize,
    pub m: usize,
    pub lambda3: Vec<f64>,
    pub seeds: Vec<u64>,
    /// R3 basis size; defaults to `n_1 = d + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default = "default_shift")]
    pub shift: f64,
    /// `seed` and `model` are overridden per trial.
    #[serde(default)]
    pub train: TrainConfig,
}

impl Fig1Config {
    pub fn n_train(&self) -> Result<usize> {
        resolve_n(self.d, self.n, self.rho, "fig1")
    }

    pub fn validate(&self) -> Result<()> {
        check_sizes(self.d, self.n_train()?, self.n_test, self.m)?;
        check_grid("lambda3", &self.lambda3)?;
        check_seeds(&self.seeds)?;
        self.train.validate()?;
        if self.train.model != ModelKind::Taylor {
            return Err(Error::Config("fig1 trains the Taylor model f_L + f_Q".into()));
        }
        Ok(())
    }
}

/// λ1 sweep at fixed λ3 with the fresh-sample R1 estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct R1Config {
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub n_test: usize,
    pub m: usize,
    pub lambda3: f64,
    pub lambda1: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default = "default_shift")]
    pub shift: f64,
    /// Moving-average window, in logged steps.
    pub ma_window: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

impl R1Config {
    pub fn n_train(&self) -> Result<usize> {
        resolve_n(self.d, self.n, self.rho, "r1-implicit")
    }

    pub fn validate(&self) -> Result<()> {
        check_sizes(self.d, self.n_train()?, self.n_test, self.m)?;
        check_grid("lambda1", &self.lambda1)?;
        check_grid("lambda3", &[self.lambda3])?;
        check_seeds(&self.seeds)?;
        self.train.validate()?;
        if self.ma_window == 0 {
            return Err(Error::Config("ma_window must be at least 1".into()));
        }
        if self.train.model != ModelKind::Taylor {
            return Err(Error::Config("r1-implicit trains the Taylor model f_L + f_Q".into()));
        }
        if self.train.population != PopulationMode::Fresh || self.train.n_fresh == 0 {
            return Err(Error::Config("r1-implicit needs population = \"fresh\" and n_fresh > 0".into()));
        }
        Ok(())
    }
}

/// Smallest sample size reaching a test-loss threshold, per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub dims: Vec<usize>,
    /// Network width.
    pub m: usize,
    pub n_test: usize,
    /// Success means final test loss (square loss, 1/2 convention) below this.
    pub threshold: f64,
    /// First `n` of the doubling schedule; defaults to `d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_start: Option<usize>,
    /// Largest `n` tried; beyond it `n_star` is censored.
    pub n_max: usize,
    /// Bisection stops once `hi - lo <= resolution * hi`.
    pub resolution: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("dims is empty".into()));
        }
        for &d in &self.dims {
            check_sizes(d, self.n_start.unwrap_or(d).max(1), self.n_test, self.m)?;
        }
        check_seeds(&self.seeds)?;
        if !(self.threshold > 0.0) {
            return Err(Error::Config("threshold must be positive".into()));
        }
        if !(self.resolution > 0.0 && self.resolution < 1.0) {
            return Err(Error::Config("resolution must lie in (0, 1)".into()));
        }
        if self.n_start == Some(0) {
            return Err(Error::Config("n_start must be positive".into()));
        }
        self.train.validate()?;
        if self.train.model != ModelKind::Full {
            return Err(Error::Config("scaling trains the full network".into()));
        }
        Ok(())
    }
}

/// Analytic vs Monte-Carlo covariance and its eigenvalue gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub init_seed: u64,
    pub mc_samples: usize,
    /// Batches for the standard error of the operator distance.
    pub mc_batches: usize,
    pub mc_seed: u64,
    /// Gegenbauer truncation; defaults to `4k + 4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<usize>,
    #[serde(default = "default_shift")]
    pub shift: f64,
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<()> {
        check_sizes(self.d, 1, 1, self.m)?;
        if self.mc_batches < 2 || self.mc_samples < self.mc_batches {
            return Err(Error::Config("need mc_batches >= 2 and mc_samples >= mc_batches".into()));
        }
        Ok(())
    }
}

/// Explicit `W_L`, `W_Q`, `W*` across widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressivityConfig {
    pub d: usize,
    pub widths: Vec<usize>,
    /// Training size as a multiple of `n_1 = d + 1`.
    pub n_factor: usize,
    pub seeds: Vec<u64>,
    pub sign_trials: usize,
    /// Fresh samples for R1/R2 when the dense covariance exceeds its cap.
    pub n_fresh: usize,
    #[serde(default = "default_shift")]
    pub shift: f64,
}

impl ExpressivityConfig {
    pub fn n_train(&self) -> usize {
        self.n_factor * (self.d + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("widths is empty".into()));
        }
        for &m in &self.widths {
            check_sizes(self.d, self.n_train(), 1, m)?;
        }
        check_seeds(&self.seeds)?;
        if self.sign_trials == 0 || self.n_fresh == 0 {
            return Err(Error::Config("sign_trials and n_fresh must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Fig1(Fig1Config),
    Scaling(ScalingConfig),
    R1Implicit(R1Config),
    Spectrum(SpectrumConfig),
    Expressivity(ExpressivityConfig),
}

fn fig1_train(preset: Preset) -> TrainConfig {
    TrainConfig {
        lr: 20.0,
        max_steps: match preset {
            Preset::Desk => 5000,
            Preset::Paper => 20000,
        },
        eval_every: 50,
        model: ModelKind::Taylor,
        population: PopulationMode::Off,
        track_r3: true,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            ExperimentConfig::Fig1(_) => ExperimentKind::Fig1,
            ExperimentConfig::Scaling(_) => ExperimentKind::Scaling,
            ExperimentConfig::R1Implicit(_) => ExperimentKind::R1Implicit,
            ExperimentConfig::Spectrum(_) => ExperimentKind::Spectrum,
            ExperimentConfig::Expressivity(_) => ExperimentKind::Expressivity,
        }
    }

    pub fn preset(kind: ExperimentKind, preset: Preset) -> Self {
        let desk = preset == Preset::Desk;
        match kind {
            ExperimentKind::Fig1 => ExperimentConfig::Fig1(Fig1Config {
                d: if desk { 30 } else { 100 },
                n: None,
                rho: Some(1.5),
                n_test: if desk { 2000 } else { 10000 },
                m: if desk { 2000 } else { 10000 },
                lambda3: vec![0.0, 0.003, 0.01, 0.03, 0.1],
                seeds: (0..5).collect(),
                rank: None,
                shift: default_shift(),
                train: fig1_train(preset),
            }),
            ExperimentKind::R1Implicit => ExperimentConfig::R1Implicit(R1Config {
                d: if desk { 30 } else { 100 },
                n: None,
                rho: Some(1.5),
                n_test: if desk { 2000 } else { 10000 },
                m: if desk { 2000 } else { 10000 },
                lambda3: 0.01,
                lambda1: vec![0.0, 0.01, 0.1, 1.0],
                seeds: (0..if desk { 3 } else { 5 }).collect(),
                rank: None,
                shift: default_shift(),
                ma_window: 10,
                train: TrainConfig {
                    population: PopulationMode::Fresh,
                    n_fresh: 256,
                    max_steps: if desk { 2000 } else { 20000 },
                    ..fig1_train(preset)
                },
            }),
            ExperimentKind::Scaling => ExperimentConfig::Scaling(ScalingConfig {
                dims: if desk { vec![10, 14, 20, 28] } else { vec![10, 14, 20, 28, 40, 56] },
                m: 100,
                n_test: if desk { 2000 } else { 10000 },
                threshold: 0.1,
                n_start: None,
                n_max: if desk { 16384 } else { 131072 },
                resolution: 0.1,
                seeds: if desk { vec![0] } else { (0..3).collect() },
                shift: default_shift(),
                train: TrainConfig {
                    lr: 4.0,
                    max_steps: 20000,
                    eval_every: 100,
                    model: ModelKind::Full,
                    population: PopulationMode::Off,
                    track_r3: false,
                    converge_rtol: 1e-3,
                    ..TrainConfig::default()
                },
            }),
            ExperimentKind::Spectrum => ExperimentConfig::Spectrum(SpectrumConfig {
                d: 20,
                m: 30,
                k: 1,
                init_seed: 0,
                mc_samples: if desk { 100_000 } else { 1_000_000 },
                mc_batches: 10,
                mc_seed: 0,
                truncation: None,
                shift: default_shift(),
            }),
            ExperimentKind::Expressivity => ExperimentConfig::Expressivity(ExpressivityConfig {
                d: 8,
                widths: if desk { vec![256, 1024, 4096] } else { vec![256, 1024, 4096, 16384] },
                n_factor: 20,
                seeds: (0..10).collect(),
                sign_trials: 200,
                n_fresh: 4096,
                shift: default_shift(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::Fig1(c) => c.validate(),
            ExperimentConfig::Scaling(c) => c.validate(),
            ExperimentConfig::R1Implicit(c) => c.validate(),
            ExperimentConfig::Spectrum(c) => c.validate(),
            ExperimentConfig::Expressivity(c) => c.validate(),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            ExperimentConfig::Fig1(c) => c.seeds.clone(),
            ExperimentConfig::Scaling(c) => c.seeds.clone(),
            ExperimentConfig::R1Implicit(c) => c.seeds.clone(),
            ExperimentConfig::Spectrum(c) => vec![c.init_seed, c.mc_seed],
            ExperimentConfig::Expressivity(c) => c.seeds.clone(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Preset values overlaid with a partial TOML document. Tables merge key
    /// by key; any other value replaces the preset's.
    pub fn resolve(kind: ExperimentKind, preset: Preset, overrides: Option<&str>) -> Result<Self> {
        let base = Self::preset(kind, preset).to_toml_string()?;
        let mut merged: toml::Table = toml::from_str(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = overrides {
            let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(tag) = over.get("experiment") {
                let named = tag
                    .as_str()
                    .ok_or_else(|| Error::Config("experiment must be a string".into()))?
                    .parse::<ExperimentKind>()?;
                if named != kind {
                    return Err(Error::Config(format!("config is for {named}, command is {kind}")));
                }
            }
            // `n` and `rho` are alternatives; naming one drops the preset's other.
            for (given, other) in [("n", "rho"), ("rho", "n")] {
                if over.contains_key(given) {
                    merged.remove(other);
                }
            }
            merge_tables(&mut merged, over);
            merged.insert("experiment".into(), toml::Value::String(kind.name().into()));
        }
        let text = toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for kind in ExperimentKind::ALL {
            for preset in [Preset::Desk, Preset::Paper] {
                let cfg = ExperimentConfig::preset(kind, preset);
                cfg.validate().unwrap();
                let text = cfg.to_toml_string().unwrap();
                assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg, "{kind} {preset:?}");
            }
        }
    }

    #[test]
    fn fig1_desk_sizes() {
        let ExperimentConfig::Fig1(c) = ExperimentConfig::preset(ExperimentKind::Fig1, Preset::Desk) else {
            unreachable!()
        };
        assert_eq!((c.d, c.n_train().unwrap(), c.m), (30, 165, 2000));
        assert_eq!(c.lambda3, vec![0.0, 0.003, 0.01, 0.03, 0.1]);
        assert_eq!(c.seeds.len(), 5);
    }

    #[test]
    fn overrides_merge_nested_tables() {
        let cfg = ExperimentConfig::resolve(
            ExperimentKind::Fig1,
            Preset::Desk,
            Some("seeds = [7]\n[train]\nmax_steps = 3\n"),
        )
        .unwrap();
        let ExperimentConfig::Fig1(c) = cfg else { unreachable!() };
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.train.max_steps, 3);
        assert_eq!(c.train.lr, 20.0);
    }

    #[test]
    fn mismatched_or_unknown_keys_rejected() {
        let wrong = ExperimentConfig::resolve(ExperimentKind::Fig1, Preset::Desk, Some("experiment = \"scaling\""));
        assert!(matches!(wrong, Err(Error::Config(_))));
        let unknown = ExperimentConfig::resolve(ExperimentKind::Fig1, Preset::Desk, Some("lambda9 = 1.0"));
        assert!(matches!(unknown, Err(Error::Config(_))));
        let both = ExperimentConfig::from_toml_str(
            &ExperimentConfig::preset(ExperimentKind::Fig1, Preset::Desk).to_toml_string().unwrap().replace("rho = 1.5", "rho = 1.5\nn = 10"),
        );
        assert!(matches!(both, Err(Error::Config(_))));
    }

    #[test]
    fn explicit_n_replaces_rho() {
        let ExperimentConfig::Fig1(c) = ExperimentConfig::resolve(ExperimentKind::Fig1, Preset::Desk, Some("n = 40")).unwrap() else {
            unreachable!()
        };
        assert_eq!((c.n, c.rho, c.n_train().unwrap()), (Some(40), None, 40));
    }

    #[test]
    fn full_model_rejected_for_fig1() {
        let r = ExperimentConfig::resolve(ExperimentKind::Fig1, Preset::Desk, Some("[train]\nmodel = \"full\""));
        assert!(r.is_err());
    }

    #[test]
    fn kind_names_parse() {
        for kind in ExperimentKind::ALL {
            assert_eq!(kind.name().parse::<ExperimentKind>().unwrap(), kind);
        }
        assert_eq!("r1".parse::<ExperimentKind>().unwrap(), ExperimentKind::R1Implicit);
        assert!("fig2".parse::<ExperimentKind>().is_err());
    }
}
