//! Time stepping for the reflected equation: a penalized scheme and a projection scheme.
//!
//! Both share the exponential-Euler free step `ũ = S_dt(u + dt·f(u) + σ(u) ⊙ ΔW / dx)`.
//! The projected scheme clips `ũ` to the walls; the penalized scheme resolves the penalty
//! drift implicitly per node. In both cases the push applied at node `i` is stored as the
//! cell mass `|u' - ũ|·dx` in `eta` (upwards) or `xi` (downwards).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::coefficients::ScalarFn;
use crate::error::{invalid, Error, Result};
use crate::grid::{l2_inner, CircleGrid, Field, WallPair};
use crate::heat::{HeatPropagator, PropagatorKind};
use crate::noise::{pairing, CoarseNoise, NoiseIncrement, NoiseSource, SeedSpec, SheetNoise};

pub const WALL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Penalized,
    #[default]
    Projected,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Penalized => "penalized",
            Scheme::Projected => "projected",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenalizedParams {
    /// Upper-wall penalty.
    pub epsilon: f64,
    /// Lower-wall penalty.
    pub delta: f64,
    pub dt: f64,
    pub drift: ScalarFn,
    pub diffusion: ScalarFn,
    pub scheme: Scheme,
    #[serde(default)]
    pub propagator: PropagatorKind,
}

impl PenalizedParams {
    pub fn projected(dt: f64, drift: ScalarFn, diffusion: ScalarFn) -> Result<Self> {
        let p = Self {
            epsilon: 1.0,
            delta: 1.0,
            dt,
            drift,
            diffusion,
            scheme: Scheme::Projected,
            propagator: PropagatorKind::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn penalized(
        epsilon: f64,
        delta: f64,
        dt: f64,
        drift: ScalarFn,
        diffusion: ScalarFn,
    ) -> Result<Self> {
        let p = Self {
            epsilon,
            delta,
            dt,
            drift,
            diffusion,
            scheme: Scheme::Penalized,
            propagator: PropagatorKind::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_scheme(self, scheme: Scheme) -> Self {
        Self { scheme, ..self }
    }

    pub fn with_penalties(self, epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            ..self
        }
    }

    pub fn with_dt(self, dt: f64) -> Self {
        Self { dt, ..self }
    }

    pub fn with_propagator(self, propagator: PropagatorKind) -> Self {
        Self { propagator, ..self }
    }

    pub fn with_diffusion(self, diffusion: ScalarFn) -> Self {
        Self { diffusion, ..self }
    }

    pub fn with_drift(self, drift: ScalarFn) -> Self {
        Self { drift, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("delta", self.delta),
            ("dt", self.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Common Lipschitz constant of drift and diffusion.
    pub fn lipschitz(&self) -> f64 {
        self.drift.lipschitz().max(self.diffusion.lipschitz())
    }

    /// Sampled difference quotients of both coefficients on `[lo, hi]` stay below `L + tol`.
    pub fn check_lipschitz(&self, lo: f64, hi: f64, tol: f64) -> Result<()> {
        let l = self.lipschitz();
        let n = 2000;
        let h = (hi - lo) / n as f64;
        for (name, c) in [("drift", self.drift), ("diffusion", self.diffusion)] {
            for i in 0..n {
                let a = lo + i as f64 * h;
                let q = (c.eval(a + h) - c.eval(a)).abs() / h;
                if q > l + tol {
                    return Err(invalid(
                        if name == "drift" { "drift" } else { "diffusion" },
                        format!("difference quotient {q} exceeds Lipschitz constant {l}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Closed-form solution of `u' = u* + dt[(1/δ)(u' - h1)^- - (1/ε)(u' - h2)^+]`.
#[inline]
pub fn penalty_substep(u_star: f64, h1: f64, h2: f64, dt: f64, epsilon: f64, delta: f64) -> f64 {
    if u_star < h1 {
        let a = dt / delta;
        (u_star + a * h1) / (1.0 + a)
    } else if u_star > h2 {
        let b = dt / epsilon;
        (u_star + b * h2) / (1.0 + b)
    } else {
        u_star
    }
}

/// Reusable per-trajectory stepping state.
#[derive(Debug, Clone)]
pub struct Stepper {
    params: PenalizedParams,
    walls: WallPair,
    prop: HeatPropagator,
    inv_dx: f64,
}

impl Stepper {
    pub fn new(walls: &WallPair, params: &PenalizedParams) -> Result<Self> {
        params.validate()?;
        let grid = walls.grid();
        Ok(Self {
            params: *params,
            walls: walls.clone(),
            prop: HeatPropagator::new(grid, params.dt, params.propagator)?,
            inv_dx: 1.0 / grid.dx(),
        })
    }

    pub fn params(&self) -> &PenalizedParams {
        &self.params
    }

    pub fn walls(&self) -> &WallPair {
        &self.walls
    }

    pub fn grid(&self) -> CircleGrid {
        self.walls.grid()
    }

    pub fn propagator(&mut self) -> &mut HeatPropagator {
        &mut self.prop
    }

    /// `out = S_dt(u + dt·f(u) + σ(u) ⊙ dw / dx)`.
    pub fn free_step(&mut self, u: &[f64], dw: &[f64], out: &mut [f64]) {
        let dt = self.params.dt;
        for i in 0..u.len() {
            out[i] = u[i]
                + dt * self.params.drift.eval(u[i])
                + self.params.diffusion.eval(u[i]) * dw[i] * self.inv_dx;
        }
        self.prop.apply_in_place(out);
    }

    /// Free step with an already-formed noise forcing `sigma_dw[i] = σ_i ΔW_i`.
    pub fn free_step_forced(&mut self, u: &[f64], sigma_dw: &[f64], out: &mut [f64]) {
        let dt = self.params.dt;
        for i in 0..u.len() {
            out[i] = u[i] + dt * self.params.drift.eval(u[i]) + sigma_dw[i] * self.inv_dx;
        }
        self.prop.apply_in_place(out);
    }

    /// Applies the wall map of the configured scheme to a free state, in place, and
    /// writes the pushes as cell masses.
    pub fn constrain(&self, state: &mut [f64], eta: &mut [f64], xi: &mut [f64]) {
        let dx = self.grid().dx();
        let lo = self.walls.lower();
        let hi = self.walls.upper();
        let p = &self.params;
        for i in 0..state.len() {
            let free = state[i];
            let next = match p.scheme {
                Scheme::Projected => free.clamp(lo[i], hi[i]),
                Scheme::Penalized => penalty_substep(free, lo[i], hi[i], p.dt, p.epsilon, p.delta),
            };
            state[i] = next;
            eta[i] = (next - free).max(0.0) * dx;
            xi[i] = (free - next).max(0.0) * dx;
        }
    }

    pub fn step(
        &mut self,
        u: &mut [f64],
        dw: &[f64],
        scratch: &mut [f64],
        eta: &mut [f64],
        xi: &mut [f64],
    ) {
        self.free_step(u, dw, scratch);
        self.constrain(scratch, eta, xi);
        u.copy_from_slice(scratch);
    }
}

fn check_finite(u: &[f64], step: usize, dt: f64) -> Result<()> {
    if u.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::BlowUp {
            step,
            time: step as f64 * dt,
        })
    }
}

pub fn step_penalized(
    u: &Field,
    walls: &WallPair,
    dw: &NoiseIncrement,
    p: &PenalizedParams,
) -> Result<Field> {
    if p.scheme != Scheme::Penalized {
        return Err(invalid("scheme", "step_penalized needs the penalized scheme"));
    }
    let (out, _, _) = step_once(u, walls, dw, p)?;
    Ok(out)
}

/// One projected step; returns the new field and the `(eta, xi)` cell-mass slices.
pub fn step_projected(
    u: &Field,
    walls: &WallPair,
    dw: &NoiseIncrement,
    p: &PenalizedParams,
) -> Result<(Field, Vec<f64>, Vec<f64>)> {
    if p.scheme != Scheme::Projected {
        return Err(invalid("scheme", "step_projected needs the projected scheme"));
    }
    walls.check_contains(u, WALL_TOL)?;
    step_once(u, walls, dw, p)
}

fn step_once(
    u: &Field,
    walls: &WallPair,
    dw: &NoiseIncrement,
    p: &PenalizedParams,
) -> Result<(Field, Vec<f64>, Vec<f64>)> {
    let grid = walls.grid();
    grid.check_same(&u.grid())?;
    grid.check_same(&dw.grid())?;
    if (dw.dt() - p.dt).abs() > 1e-12 * p.dt {
        return Err(Error::Misaligned(format!(
            "noise dt {} vs step dt {}",
            dw.dt(),
            p.dt
        )));
    }
    let mut stepper = Stepper::new(walls, p)?;
    let n = grid.len();
    let mut next = u.values().to_vec();
    let mut scratch = vec![0.0; n];
    let mut eta = vec![0.0; n];
    let mut xi = vec![0.0; n];
    stepper.step(&mut next, dw.values(), &mut scratch, &mut eta, &mut xi);
    check_finite(&next, 1, p.dt)?;
    Ok((
        Field::from_raw(grid, next, u.time() + p.dt),
        eta,
        xi,
    ))
}

/// Cell masses of the reflection measures, one row per time step (or per recording window).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReflectionMeasures {
    pub eta: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

impl ReflectionMeasures {
    pub fn eta_total(&self) -> f64 {
        self.eta.iter().flatten().sum()
    }

    pub fn xi_total(&self) -> f64 {
        self.xi.iter().flatten().sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.eta.iter().chain(&self.xi).flatten().all(|&m| m >= 0.0)
    }

    /// `Σ (u - h1)·η` and `Σ (h2 - u)·ξ`, pairing row `k` with `fields[k + 1]`.
    pub fn complementarity(&self, fields: &[Field], walls: &WallPair) -> (f64, f64) {
        let mut lower = 0.0;
        let mut upper = 0.0;
        for (k, (e, x)) in self.eta.iter().zip(&self.xi).enumerate() {
            let Some(u) = fields.get(k + 1) else { break };
            for i in 0..e.len() {
                lower += (u.values()[i] - walls.lower()[i]) * e[i];
                upper += (walls.upper()[i] - u.values()[i]) * x[i];
            }
        }
        (lower, upper)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
    /// Row `k` holds the pushes accumulated between `times[k]` and `times[k + 1]`.
    pub measures: ReflectionMeasures,
    pub seeds: Option<SeedSpec>,
    pub params: PenalizedParams,
    pub walls: WallPair,
    /// Number of solver steps between stored fields.
    pub stride: usize,
}

impl TrajectoryRecord {
    pub fn grid(&self) -> CircleGrid {
        self.walls.grid()
    }

    pub fn final_field(&self) -> &Field {
        self.fields.last().expect("records hold at least the initial field")
    }

    /// Largest violation of the walls anywhere on the stored path.
    pub fn max_wall_violation(&self) -> f64 {
        let lo = self.walls.lower();
        let hi = self.walls.upper();
        self.fields
            .iter()
            .flat_map(|f| {
                f.values()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (lo[i] - v).max(v - hi[i]).max(0.0))
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Store every `stride`-th field; measures are summed over each window.
    pub stride: usize,
    /// Reject initial data outside the walls.
    pub check_initial: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            check_initial: true,
        }
    }
}

pub fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(invalid("T", format!("must be positive, got {t_end}")));
    }
    let steps = (t_end / dt).round();
    if steps < 1.0 || ((steps * dt) - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(invalid(
            "T",
            format!("horizon {t_end} is not a whole number of steps of {dt}"),
        ));
    }
    Ok(steps as usize)
}

/// Runs one trajectory driven by the `seeds` stream.
pub fn run_reflected(
    u0: &Field,
    walls: &WallPair,
    t_end: f64,
    p: &PenalizedParams,
    seeds: SeedSpec,
) -> Result<TrajectoryRecord> {
    let noise = SheetNoise::new(walls.grid(), p.dt, seeds)?;
    let mut rec = run_reflected_with(u0, walls, t_end, p, &noise, RunOptions::default())?;
    rec.seeds = Some(seeds);
    Ok(rec)
}

pub fn run_reflected_with(
    u0: &Field,
    walls: &WallPair,
    t_end: f64,
    p: &PenalizedParams,
    noise: &dyn NoiseSource,
    opts: RunOptions,
) -> Result<TrajectoryRecord> {
    let grid = walls.grid();
    grid.check_same(&u0.grid())?;
    grid.check_same(&noise.grid())?;
    if (noise.dt() - p.dt).abs() > 1e-12 * p.dt {
        return Err(Error::Misaligned(format!(
            "noise dt {} vs step dt {}",
            noise.dt(),
            p.dt
        )));
    }
    if opts.check_initial {
        walls.check_contains(u0, WALL_TOL)?;
    }
    let stride = opts.stride.max(1);
    let steps = step_count(t_end, p.dt)?;
    let n = grid.len();
    let mut stepper = Stepper::new(walls, p)?;
    let mut u = u0.values().to_vec();
    let mut dw = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut eta = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut eta_acc = vec![0.0; n];
    let mut xi_acc = vec![0.0; n];
    let t0 = u0.time();
    let mut rec = TrajectoryRecord {
        times: vec![t0],
        fields: vec![Field::from_raw(grid, u.clone(), t0)],
        measures: ReflectionMeasures::default(),
        seeds: None,
        params: *p,
        walls: walls.clone(),
        stride,
    };
    for k in 0..steps {
        noise.fill(k as u64, &mut dw);
        stepper.step(&mut u, &dw, &mut scratch, &mut eta, &mut xi);
        check_finite(&u, k + 1, p.dt)?;
        for i in 0..n {
            eta_acc[i] += eta[i];
            xi_acc[i] += xi[i];
        }
        if (k + 1) % stride == 0 || k + 1 == steps {
            let t = t0 + (k + 1) as f64 * p.dt;
            rec.times.push(t);
            rec.fields.push(Field::from_raw(grid, u.clone(), t));
            rec.measures.eta.push(std::mem::replace(&mut eta_acc, vec![0.0; n]));
            rec.measures.xi.push(std::mem::replace(&mut xi_acc, vec![0.0; n]));
        }
    }
    Ok(rec)
}

/// Steps a trajectory without storing it, calling `visit(step, t, u)` after every step
/// (and once with step 0 for the initial state).
pub fn for_each_state(
    u0: &Field,
    walls: &WallPair,
    t_end: f64,
    p: &PenalizedParams,
    noise: &dyn NoiseSource,
    mut visit: impl FnMut(usize, f64, &[f64]),
) -> Result<()> {
    let grid = walls.grid();
    grid.check_same(&u0.grid())?;
    grid.check_same(&noise.grid())?;
    walls.check_contains(u0, WALL_TOL)?;
    let steps = step_count(t_end, p.dt)?;
    let n = grid.len();
    let mut stepper = Stepper::new(walls, p)?;
    let mut u = u0.values().to_vec();
    let mut dw = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut eta = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let t0 = u0.time();
    visit(0, t0, &u);
    for k in 0..steps {
        noise.fill(k as u64, &mut dw);
        stepper.step(&mut u, &dw, &mut scratch, &mut eta, &mut xi);
        check_finite(&u, k + 1, p.dt)?;
        visit(k + 1, t0 + (k + 1) as f64 * p.dt, &u);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    /// `max (v - Φ̄ - u)^+` over the path.
    pub lower_violation: f64,
    /// `max (u - v - Ψ)^+` where `Ψ(t) = sup_{s≤t} (v - h1)^-`.
    pub upper_violation: f64,
    /// Running supremum `Φ̄(t_k)` of `(v - h2)^+`.
    pub phi_bar: Vec<f64>,
    pub psi_bar: Vec<f64>,
}

impl SandwichReport {
    pub fn max_violation(&self) -> f64 {
        self.lower_violation.max(self.upper_violation)
    }
}

/// Re-simulates the unconstrained companion `v` (frozen `f(u)`, `σ(u)`, same noise, `v(0) = u0`)
/// and measures how far the penalized path leaves the band `[v - Φ̄, v + Ψ]`.
pub fn sandwich_check(record: &TrajectoryRecord, seeds: SeedSpec) -> Result<SandwichReport> {
    match record.seeds {
        Some(s) if s == seeds => {}
        Some(s) => {
            return Err(Error::SeedMismatch {
                expected: s.to_string(),
                actual: seeds.to_string(),
            })
        }
        None => {
            return Err(Error::SeedMismatch {
                expected: "unseeded record".into(),
                actual: seeds.to_string(),
            })
        }
    }
    if record.stride != 1 {
        return Err(Error::Misaligned("sandwich check needs every step stored".into()));
    }
    let p = record.params;
    let grid = record.grid();
    let noise = SheetNoise::new(grid, p.dt, seeds)?;
    sandwich_with(record, &noise)
}

pub fn sandwich_with(record: &TrajectoryRecord, noise: &dyn NoiseSource) -> Result<SandwichReport> {
    let p = record.params;
    let grid = record.grid();
    let n = grid.len();
    let walls = &record.walls;
    let mut prop = HeatPropagator::new(grid, p.dt, p.propagator)?;
    let inv_dx = 1.0 / grid.dx();
    let mut v = record.fields[0].values().to_vec();
    let mut dw = vec![0.0; n];
    let mut phi = 0.0f64;
    let mut psi = 0.0f64;
    let mut report = SandwichReport {
        lower_violation: 0.0,
        upper_violation: 0.0,
        phi_bar: Vec::with_capacity(record.fields.len()),
        psi_bar: Vec::with_capacity(record.fields.len()),
    };
    for k in 0..record.fields.len() {
        if k > 0 {
            let u = record.fields[k - 1].values();
            noise.fill((k - 1) as u64, &mut dw);
            for ((vi, &ui), &w) in v.iter_mut().zip(u).zip(&dw) {
                *vi += p.dt * p.drift.eval(ui) + p.diffusion.eval(ui) * w * inv_dx;
            }
            prop.apply_in_place(&mut v);
        }
        let u = record.fields[k].values();
        for ((&vi, &lo), &hi) in v.iter().zip(walls.lower()).zip(walls.upper()) {
            phi = phi.max(vi - hi);
            psi = psi.max(lo - vi);
        }
        for i in 0..n {
            report.lower_violation = report.lower_violation.max(v[i] - phi - u[i]);
            report.upper_violation = report.upper_violation.max(u[i] - v[i] - psi);
        }
        report.phi_bar.push(phi);
        report.psi_bar.push(psi);
    }
    Ok(report)
}

/// Rounding slack when classifying the order of two penalized paths.
pub const ORIENTATION_TOL: f64 = 1e-12;

/// Which way the penalized family moves when δ shrinks with everything else frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Paths increase as the penalty parameter decreases.
    IncreasingAsParamDecreases,
    DecreasingAsParamDecreases,
    Equal,
    Unordered,
}

/// Classifies the pointwise order between two paths (`finer` run with the smaller parameter).
pub fn path_orientation(coarse: &[Field], finer: &[Field], tol: f64) -> (Orientation, f64) {
    let mut min_diff = f64::INFINITY;
    let mut max_diff = f64::NEG_INFINITY;
    for (a, b) in coarse.iter().zip(finer) {
        for (x, y) in a.values().iter().zip(b.values()) {
            let d = y - x;
            min_diff = min_diff.min(d);
            max_diff = max_diff.max(d);
        }
    }
    if max_diff <= tol && min_diff >= -tol {
        (Orientation::Equal, 0.0)
    } else if min_diff >= -tol {
        (Orientation::IncreasingAsParamDecreases, (-min_diff).max(0.0))
    } else if max_diff <= tol {
        (Orientation::DecreasingAsParamDecreases, max_diff.max(0.0))
    } else {
        (Orientation::Unordered, min_diff.abs().min(max_diff.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLevel {
    pub level: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub sup_distance: f64,
    pub max_wall_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub levels: Vec<SweepLevel>,
    /// Ordering of consecutive δ-levels at fixed ε (the finest ε of the sweep).
    pub delta_orientation: Vec<(Orientation, f64)>,
    /// Ordering of consecutive ε-levels at fixed δ.
    pub epsilon_orientation: Vec<(Orientation, f64)>,
}

impl SweepTable {
    pub fn distances(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.sup_distance).collect()
    }

    /// `D_{j+1} ≤ (1 + slack)·D_j` for every `j`.
    pub fn is_nonincreasing(&self, slack: f64) -> bool {
        self.levels
            .windows(2)
            .all(|w| w[1].sup_distance <= (1.0 + slack) * w[0].sup_distance + 1e-15)
    }
}

fn sup_path_distance(a: &[Field], b: &[Field]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Penalized trajectories at `(ε0 2^-j, δ0 2^-j)` against the projected trajectory on one noise path.
pub fn convergence_sweep(
    u0: &Field,
    walls: &WallPair,
    t_end: f64,
    base: &PenalizedParams,
    levels: usize,
    seeds: SeedSpec,
) -> Result<SweepTable> {
    let noise = SheetNoise::new(walls.grid(), base.dt, seeds)?;
    convergence_sweep_with(u0, walls, t_end, base, levels, &noise)
}

pub fn convergence_sweep_with(
    u0: &Field,
    walls: &WallPair,
    t_end: f64,
    base: &PenalizedParams,
    levels: usize,
    noise: &dyn NoiseSource,
) -> Result<SweepTable> {
    if levels == 0 {
        return Err(invalid("levels", "need at least one level"));
    }
    let opts = RunOptions::default();
    let reference = run_reflected_with(
        u0,
        walls,
        t_end,
        &base.with_scheme(Scheme::Projected),
        noise,
        opts,
    )?;
    let pen = base.with_scheme(Scheme::Penalized);
    let mut table = SweepTable {
        levels: Vec::with_capacity(levels),
        delta_orientation: Vec::new(),
        epsilon_orientation: Vec::new(),
    };
    for j in 0..levels {
        let scale = 0.5f64.powi(j as i32);
        let p = pen.with_penalties(base.epsilon * scale, base.delta * scale);
        let rec = run_reflected_with(u0, walls, t_end, &p, noise, opts)?;
        table.levels.push(SweepLevel {
            level: j,
            epsilon: p.epsilon,
            delta: p.delta,
            sup_distance: sup_path_distance(&rec.fields, &reference.fields),
            max_wall_violation: rec.max_wall_violation(),
        });
    }
    let eps_fixed = base.epsilon * 0.5f64.powi(levels as i32 - 1);
    let delta_fixed = base.delta * 0.5f64.powi(levels as i32 - 1);
    let mut prev_d: Option<Vec<Field>> = None;
    let mut prev_e: Option<Vec<Field>> = None;
    for j in 0..levels.max(2) {
        let scale = 0.5f64.powi(j as i32);
        let rd = run_reflected_with(
            u0,
            walls,
            t_end,
            &pen.with_penalties(eps_fixed, base.delta * scale),
            noise,
            opts,
        )?;
        let re = run_reflected_with(
            u0,
            walls,
            t_end,
            &pen.with_penalties(base.epsilon * scale, delta_fixed),
            noise,
            opts,
        )?;
        if let Some(prev) = prev_d.replace(rd.fields) {
            table
                .delta_orientation
                .push(path_orientation(&prev, prev_d.as_ref().unwrap(), ORIENTATION_TOL));
        }
        if let Some(prev) = prev_e.replace(re.fields) {
            table
                .epsilon_orientation
                .push(path_orientation(&prev, prev_e.as_ref().unwrap(), ORIENTATION_TOL));
        }
    }
    Ok(table)
}

/// Discrete weak-form residual for one test function.
///
/// `R_k = (u_k, φ) - (u_0, φ) - Σ_{j<k} [dt (u_j, Aφ) + dt (f(u_j), φ) + Σ_i φ_i σ(u_j)_i ΔW_{j,i}]
///        - Σ_{j<k} Σ_i φ_i η_{j,i} + Σ_{j<k} Σ_i φ_i ξ_{j,i}`,
/// where `A` is the Laplacian generating the scheme's propagator. Returns `sup_k |R_k|`.
/// The test function must be the Fourier mode `cos(kx)` or `sin(kx)` on the grid.
pub fn weak_form_residual(
    record: &TrajectoryRecord,
    noise: &dyn NoiseSource,
    test_fn: &TestFunction,
) -> Result<f64> {
    if record.stride != 1 {
        return Err(Error::Misaligned("weak form needs every step stored".into()));
    }
    let p = record.params;
    let grid = record.grid();
    grid.check_same(&noise.grid())?;
    let phi = test_fn.field(grid);
    let lambda = crate::heat::symbol(p.propagator, grid, test_fn.wavenumber() as i64);
    let dx = grid.dx();
    let mut dw = vec![0.0; grid.len()];
    let mut sigma_phi = vec![0.0; grid.len()];
    let base = l2_inner(&record.fields[0], &phi)?;
    let mut acc = 0.0;
    let mut worst = 0.0f64;
    for k in 0..record.fields.len() - 1 {
        let u = &record.fields[k];
        let uphi = l2_inner(u, &phi)?;
        let fphi: f64 = u
            .values()
            .iter()
            .zip(phi.values())
            .map(|(&x, &q)| p.drift.eval(x) * q)
            .sum::<f64>()
            * dx;
        noise.fill(k as u64, &mut dw);
        for ((s, &q), &x) in sigma_phi.iter_mut().zip(phi.values()).zip(u.values()) {
            *s = q * p.diffusion.eval(x);
        }
        let stoch = pairing(&dw, &sigma_phi);
        let eta = pairing(&record.measures.eta[k], phi.values());
        let xi = pairing(&record.measures.xi[k], phi.values());
        acc += p.dt * lambda * uphi + p.dt * fphi + stoch + eta - xi;
        let r = l2_inner(&record.fields[k + 1], &phi)? - base - acc;
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunction {
    Cos(u32),
    Sin(u32),
}

impl TestFunction {
    pub const STANDARD: [TestFunction; 4] = [
        TestFunction::Cos(0),
        TestFunction::Cos(1),
        TestFunction::Sin(1),
        TestFunction::Cos(2),
    ];

    pub fn wavenumber(&self) -> u32 {
        match *self {
            TestFunction::Cos(k) | TestFunction::Sin(k) => k,
        }
    }

    pub fn field(&self, grid: CircleGrid) -> Field {
        match *self {
            TestFunction::Cos(k) => Field::from_fn(grid, |x| (k as f64 * x).cos()),
            TestFunction::Sin(k) => Field::from_fn(grid, |x| (k as f64 * x).sin()),
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TestFunction::Cos(0) => f.write_str("1"),
            TestFunction::Cos(k) => write!(f, "cos({k}x)"),
            TestFunction::Sin(k) => write!(f, "sin({k}x)"),
        }
    }
}

/// Weak-form residuals at `dt` and `dt/2` on one Brownian path, averaged over `replicas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakFormStudy {
    pub test_fn: TestFunction,
    pub coarse: f64,
    pub fine: f64,
}

impl WeakFormStudy {
    pub fn ratio(&self) -> f64 {
        self.coarse / self.fine
    }
}

pub fn weak_form_refinement(
    u0: &Field,
    walls: &WallPair,
    t_end: f64,
    p: &PenalizedParams,
    seeds: SeedSpec,
    replicas: u64,
    tests: &[TestFunction],
) -> Result<Vec<WeakFormStudy>> {
    let grid = walls.grid();
    let mut sums = vec![(0.0, 0.0); tests.len()];
    for r in 0..replicas {
        let fine_noise = SheetNoise::new(grid, p.dt / 2.0, seeds.with_replica(seeds.replica_id + r))?;
        let coarse_noise = CoarseNoise::new(fine_noise, 2);
        let fine = run_reflected_with(
            u0,
            walls,
            t_end,
            &p.with_dt(p.dt / 2.0),
            &fine_noise,
            RunOptions::default(),
        )?;
        let coarse = run_reflected_with(u0, walls, t_end, p, &coarse_noise, RunOptions::default())?;
        for (j, tf) in tests.iter().enumerate() {
            sums[j].0 += weak_form_residual(&coarse, &coarse_noise, tf)?;
            sums[j].1 += weak_form_residual(&fine, &fine_noise, tf)?;
        }
    }
    let r = replicas.max(1) as f64;
    Ok(tests
        .iter()
        .zip(sums)
        .map(|(&test_fn, (c, f))| WeakFormStudy {
            test_fn,
            coarse: c / r,
            fine: f / r,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{Silent, StreamTag};

    fn grid(n: usize) -> CircleGrid {
        CircleGrid::new(n).unwrap()
    }

    #[test]
    fn penalty_closed_form_upper_branch() {
        let g = grid(8);
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::penalized(0.01, 0.01, 0.01, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let u = Field::constant(g, 1.2);
        let out = step_penalized(&u, &walls, &NoiseIncrement::zeros(g, 0.01), &p).unwrap();
        for v in out.values() {
            assert!((v - 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_inactive_inside() {
        let g = grid(16);
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::penalized(0.01, 0.01, 0.01, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let u = Field::from_fn(g, |x| 0.5 * x.cos());
        let out = step_penalized(&u, &walls, &NoiseIncrement::zeros(g, 0.01), &p).unwrap();
        let flow = crate::heat::apply_semigroup_with(&u, 0.01, p.propagator).unwrap();
        assert!(out.sup_distance(&flow).unwrap() < 1e-14);
    }

    #[test]
    fn penalty_substep_solves_its_equation() {
        for &(us, eps, del) in &[(1.7, 0.1, 0.3), (-2.3, 0.02, 0.05), (0.3, 0.1, 0.1)] {
            let dt = 0.01;
            let (h1, h2) = (-1.0, 1.0);
            let u = penalty_substep(us, h1, h2, dt, eps, del);
            let rhs = us + dt * ((u - h1).min(0.0).abs() / del - (u - h2).max(0.0) / eps);
            assert!((u - rhs).abs() < 1e-13);
        }
    }

    #[test]
    fn projected_clip_arithmetic() {
        let g = grid(8);
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::projected(0.01, ScalarFn::constant(30.0), ScalarFn::Zero).unwrap();
        // constant state 1.0 + dt * 30 = 1.3 after the (constant-preserving) flow
        let u = Field::constant(g, 1.0);
        let (out, eta, xi) = step_projected(&u, &walls, &NoiseIncrement::zeros(g, 0.01), &p).unwrap();
        for i in 0..8 {
            assert_eq!(out.values()[i], 1.0);
            assert!((xi[i] - 0.3 * g.dx()).abs() < 1e-12);
            assert_eq!(eta[i], 0.0);
        }
        let outside = Field::constant(g, 1.5);
        assert!(step_projected(&outside, &walls, &NoiseIncrement::zeros(g, 0.01), &p).is_err());
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let g = grid(16);
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::projected(0.01, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let rec = run_reflected(&Field::zeros(g), &walls, 1.0, &p, SeedSpec::new(1, 0, StreamTag::W1))
            .unwrap();
        assert!(rec.fields.iter().all(|f| f.sup_abs() == 0.0));
        assert_eq!(rec.measures.eta_total() + rec.measures.xi_total(), 0.0);
        assert_eq!(rec.times.len(), 101);
    }

    #[test]
    fn sandwich_trivial_and_seed_mismatch() {
        let g = grid(16);
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::penalized(0.01, 0.01, 0.01, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let s = SeedSpec::new(3, 0, StreamTag::W1);
        let u0 = Field::from_fn(g, |x| 0.5 * x.sin());
        let rec = run_reflected(&u0, &walls, 0.5, &p, s).unwrap();
        let rep = sandwich_check(&rec, s).unwrap();
        assert_eq!(rep.max_violation(), 0.0);
        assert!(rep.phi_bar.iter().all(|&v| v == 0.0));
        assert!(sandwich_check(&rec, s.with_replica(1)).is_err());
    }

    #[test]
    fn sandwich_holds_for_noisy_penalized_run() {
        let g = grid(32);
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::penalized(1e-3, 1e-3, 1e-3, ScalarFn::Zero, ScalarFn::constant(1.0))
            .unwrap();
        let s = SeedSpec::new(5, 0, StreamTag::W1);
        let rec = run_reflected(&Field::zeros(g), &walls, 1.0, &p, s).unwrap();
        let rep = sandwich_check(&rec, s).unwrap();
        assert!(rep.max_violation() <= 1e-12, "{rep:?}");
        assert!(rep.phi_bar.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn complementarity_exact_for_projection() {
        let g = grid(32);
        let walls = WallPair::from_fns(g, |x| -1.0 + 0.3 * x.sin(), |x| 1.0 + 0.3 * x.cos()).unwrap();
        let p = PenalizedParams::projected(1e-3, ScalarFn::Zero, ScalarFn::constant(2.0)).unwrap();
        let rec = run_reflected(&Field::zeros(g), &walls, 1.0, &p, SeedSpec::new(2, 0, StreamTag::W1))
            .unwrap();
        assert_eq!(rec.max_wall_violation(), 0.0);
        assert!(rec.measures.is_nonnegative());
        assert!(rec.measures.eta_total() > 0.0 && rec.measures.xi_total() > 0.0);
        assert_eq!(rec.measures.complementarity(&rec.fields, &walls), (0.0, 0.0));
    }

    #[test]
    fn stride_accumulates_measures() {
        let g = grid(16);
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::projected(1e-3, ScalarFn::Zero, ScalarFn::constant(2.0)).unwrap();
        let noise = SheetNoise::new(g, 1e-3, SeedSpec::new(8, 0, StreamTag::W1)).unwrap();
        let full = run_reflected_with(&Field::zeros(g), &walls, 0.5, &p, &noise, RunOptions::default())
            .unwrap();
        let thin = run_reflected_with(
            &Field::zeros(g),
            &walls,
            0.5,
            &p,
            &noise,
            RunOptions {
                stride: 10,
                check_initial: true,
            },
        )
        .unwrap();
        assert_eq!(thin.fields.len(), 51);
        assert_eq!(thin.final_field(), full.final_field());
        assert!((thin.measures.xi_total() - full.measures.xi_total()).abs() < 1e-12);
    }

    #[test]
    fn weak_form_unit_test_function_is_exact() {
        let g = grid(32);
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::projected(1e-3, ScalarFn::constant(0.5), ScalarFn::constant(1.0)).unwrap();
        let noise = SheetNoise::new(g, 1e-3, SeedSpec::new(4, 0, StreamTag::W1)).unwrap();
        let rec = run_reflected_with(&Field::zeros(g), &walls, 0.5, &p, &noise, RunOptions::default())
            .unwrap();
        let r = weak_form_residual(&rec, &noise, &TestFunction::Cos(0)).unwrap();
        assert!(r < 1e-11, "{r}");
        let r1 = weak_form_residual(&rec, &noise, &TestFunction::Cos(1)).unwrap();
        assert!(r1 > 0.0 && r1 < 0.1);
    }

    #[test]
    fn silent_run_with_flat_walls_matches_heat_flow() {
        let g = grid(16);
        let walls = WallPair::constant(g, -1e6, 1e6).unwrap();
        let p = PenalizedParams::penalized(0.1, 0.1, 0.01, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let u0 = Field::from_fn(g, |x| (2.0 * x).cos());
        let rec = run_reflected_with(&u0, &walls, 0.5, &p, &Silent { grid: g, dt: 0.01 }, RunOptions::default())
            .unwrap();
        let flow = crate::heat::apply_semigroup_with(&u0, 0.5, p.propagator).unwrap();
        assert!(rec.final_field().sup_distance(&flow).unwrap() < 1e-12);
    }
}
