//! Experiment configuration (TOML) and its validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spde_reflect::coupling::{CouplingConfig, C0_EST, DEFAULT_ZETA};
use spde_reflect::ergodics::MollifiedDynamics;
use spde_reflect::{CircleGrid, Field, MixingOrder, PenalizedParams, PropagatorKind, ScalarFn, Scheme, WallPair};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WallPreset {
    /// `(-1, 1)`
    #[default]
    Constant,
    /// `(-1 + 0.3 sin x, 1 + 0.3 cos x)`
    Sinusoidal,
}

impl WallPreset {
    pub fn build(self, grid: CircleGrid) -> spde_reflect::Result<WallPair> {
        match self {
            WallPreset::Constant => WallPair::constant(grid, -1.0, 1.0),
            WallPreset::Sinusoidal => WallPair::from_fns(grid, |x| -1.0 + 0.3 * x.sin(), |x| 1.0 + 0.3 * x.cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialData {
    Constant { value: f64 },
    Cosine { amplitude: f64 },
    Midpoint,
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData::Constant { value: 0.0 }
    }
}

impl InitialData {
    pub fn build(self, walls: &WallPair) -> Field {
        let grid = walls.grid();
        match self {
            InitialData::Constant { value } => Field::constant(grid, value),
            InitialData::Cosine { amplitude } => Field::from_fn(grid, |x| amplitude * x.cos()),
            InitialData::Midpoint => walls.midpoint(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Penalty at level 0; each further level halves both penalties.
    pub start: f64,
    pub levels: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { start: 0.1, levels: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleSection {
    pub pairs: u64,
    pub steps: usize,
}

impl Default for ObstacleSection {
    fn default() -> Self {
        Self { pairs: 100, steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingSection {
    pub upper: f64,
    pub lower: f64,
    pub horizons: Vec<f64>,
    pub zeta: f64,
    pub order: MixingOrder,
    pub tilt: Option<f64>,
    pub c0_est: f64,
    /// Replicas whose per-step diagnostics feed the QV check.
    pub qv_replicas: u64,
}

impl Default for CouplingSection {
    fn default() -> Self {
        Self {
            upper: 0.9,
            lower: -0.9,
            horizons: vec![5.0, 10.0, 20.0],
            zeta: DEFAULT_ZETA,
            order: MixingOrder::Infinite,
            tilt: None,
            c0_est: C0_EST,
            qv_replicas: 8,
        }
    }
}

impl CouplingSection {
    pub fn config(&self) -> CouplingConfig {
        CouplingConfig {
            n: self.order,
            zeta: self.zeta,
            tilt: self.tilt,
            ..CouplingConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicSection {
    pub start_a: f64,
    pub start_b: f64,
    pub tv_times: Vec<f64>,
    pub burn_in: f64,
    pub horizon: f64,
    pub sample_stride: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub path_stride: usize,
}

impl Default for ErgodicSection {
    fn default() -> Self {
        Self {
            start_a: 0.9,
            start_b: -0.9,
            tv_times: vec![2.0, 20.0],
            burn_in: 5.0,
            horizon: 15.0,
            sample_stride: 2.5,
            alpha: 0.24,
            kappa: 0.04,
            path_stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FellerSection {
    pub times: Vec<f64>,
    /// Constant initial data `±amplitude`.
    pub amplitude: f64,
    pub bandwidth: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub fd_step: f64,
    pub derivative_replicas: u64,
}

impl Default for FellerSection {
    fn default() -> Self {
        Self {
            times: vec![0.05, 0.2, 1.0, 5.0],
            amplitude: 0.2,
            bandwidth: 20.0,
            epsilon: 0.05,
            delta: 0.05,
            fd_step: 1e-4,
            derivative_replicas: 32,
        }
    }
}

impl FellerSection {
    pub fn dynamics(&self) -> MollifiedDynamics {
        MollifiedDynamics {
            bandwidth: self.bandwidth,
            epsilon: self.epsilon,
            delta: self.delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub replicas: u64,
    pub threads: Option<usize>,
    pub n_x: usize,
    pub dt: f64,
    pub t_end: f64,
    pub walls: WallPreset,
    pub initial: InitialData,
    pub drift: ScalarFn,
    pub diffusion: ScalarFn,
    pub scheme: Scheme,
    pub epsilon: f64,
    pub delta: f64,
    pub propagator: PropagatorKind,
    /// Steps between stored trajectory rows.
    pub record_stride: usize,
    pub sweep: SweepSection,
    pub obstacle: ObstacleSection,
    pub coupling: CouplingSection,
    pub ergodic: ErgodicSection,
    pub feller: FellerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            replicas: 64,
            threads: None,
            n_x: 64,
            dt: 1e-3,
            t_end: 1.0,
            walls: WallPreset::Constant,
            initial: InitialData::default(),
            drift: ScalarFn::Zero,
            diffusion: ScalarFn::constant(1.0),
            scheme: Scheme::Projected,
            epsilon: 1e-2,
            delta: 1e-2,
            propagator: PropagatorKind::default(),
            record_stride: 10,
            sweep: SweepSection::default(),
            obstacle: ObstacleSection::default(),
            coupling: CouplingSection::default(),
            ergodic: ErgodicSection::default(),
            feller: FellerSection::default(),
        }
    }
}

fn field_err(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field_err(field, format!("must be positive and finite, got {v}")))
    }
}

fn on_grid(field: &str, times: &[f64], dt: f64) -> Result<(), CliError> {
    if times.is_empty() {
        return Err(field_err(field, "needs at least one time"));
    }
    for &t in times {
        positive(field, t)?;
        let k = t / dt;
        if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
            return Err(field_err(field, format!("time {t} is not a multiple of dt = {dt}")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| field_err("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_x < 4 {
            return Err(field_err("n_x", format!("need at least 4 nodes, got {}", self.n_x)));
        }
        if self.replicas == 0 {
            return Err(field_err("replicas", "must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(field_err("threads", "must be at least 1"));
        }
        positive("dt", self.dt)?;
        on_grid("t_end", &[self.t_end], self.dt)?;
        positive("epsilon", self.epsilon)?;
        positive("delta", self.delta)?;
        if self.record_stride == 0 {
            return Err(field_err("record_stride", "must be at least 1"));
        }
        positive("sweep.start", self.sweep.start)?;
        if self.sweep.levels < 2 {
            return Err(field_err("sweep.levels", "need at least two levels"));
        }
        if self.obstacle.pairs == 0 || self.obstacle.steps == 0 {
            return Err(field_err("obstacle", "pairs and steps must be positive"));
        }
        on_grid("coupling.horizons", &self.coupling.horizons, self.dt)?;
        positive("coupling.zeta", self.coupling.zeta)?;
        if let MixingOrder::Finite(0) = self.coupling.order {
            return Err(field_err("coupling.order", "finite order must be at least 1"));
        }
        on_grid("ergodic.tv_times", &self.ergodic.tv_times, self.dt)?;
        on_grid("ergodic.sample_stride", &[self.ergodic.sample_stride], self.dt)?;
        on_grid("ergodic.horizon", &[self.ergodic.horizon], self.dt)?;
        if !(self.ergodic.burn_in >= 0.0 && self.ergodic.burn_in < self.ergodic.horizon) {
            return Err(field_err("ergodic.burn_in", "must lie in [0, horizon)"));
        }
        if 2.0 * self.ergodic.burn_in >= self.ergodic.horizon {
            return Err(field_err("ergodic.burn_in", "doubling the burn-in must stay below the horizon"));
        }
        let ex = self.ergodic.alpha - self.ergodic.kappa;
        if !(self.ergodic.kappa > 0.0 && ex > 0.0 && ex < 0.25) {
            return Err(field_err("ergodic.alpha", "need kappa > 0 and alpha - kappa in (0, 1/4)"));
        }
        on_grid("feller.times", &self.feller.times, self.dt)?;
        positive("feller.amplitude", self.feller.amplitude)?;
        positive("feller.bandwidth", self.feller.bandwidth)?;
        positive("feller.epsilon", self.feller.epsilon)?;
        positive("feller.delta", self.feller.delta)?;
        positive("feller.fd_step", self.feller.fd_step)?;
        self.params().map_err(CliError::from)?;
        let grid = self.grid()?;
        let walls = self.walls.build(grid)?;
        walls
            .check_contains(&self.initial.build(&walls), 1e-12)
            .map_err(|e| field_err("initial", e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<CircleGrid, CliError> {
        Ok(CircleGrid::new(self.n_x)?)
    }

    pub fn walls(&self) -> Result<WallPair, CliError> {
        Ok(self.walls.build(self.grid()?)?)
    }

    pub fn params(&self) -> spde_reflect::Result<PenalizedParams> {
        let p = PenalizedParams::projected(self.dt, self.drift, self.diffusion)?
            .with_penalties(self.epsilon, self.delta)
            .with_scheme(self.scheme)
            .with_propagator(self.propagator);
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            master_seed = 7
            n_x = 32
            walls = "sinusoidal"
            drift = { kind = "sine", offset = 0.0, amplitude = 1.0, frequency = 2.0 }
            [initial]
            kind = "midpoint"
            [coupling]
            order = { finite = 100 }
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.coupling.order, MixingOrder::Finite(100));
        let back = ExperimentConfig::from_toml_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_names_the_field() {
        let err = ExperimentConfig::from_toml_str("dt = -1.0").unwrap_err();
        assert!(err.to_string().contains("dt"));
        let err = ExperimentConfig::from_toml_str("[ergodic]\ntv_times = [0.0005]").unwrap_err();
        assert!(err.to_string().contains("ergodic.tv_times"), "{err}");
        let err = ExperimentConfig::from_toml_str("[initial]\nkind = \"constant\"\nvalue = 3.0").unwrap_err();
        assert!(err.to_string().contains("initial"));
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }
}
