//! Two-noise coupling of reflected solutions.
//!
//! The upper process `u` is driven by `W1`. Each lower process `v` receives the mixed noise
//! `σ(v)[g(z) dW1 + f(z) dW2]`, `z = |u - v| ∧ 1`, so the noises agree wherever the two
//! fields meet. On an ordered pair the scheme keeps `u ≥ v` by redistributing any negative
//! part of the free-state gap over its positive part, which leaves `∫(u - v)` unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{CircleGrid, Field, WallPair};
use crate::heat::HeatPropagator;
use crate::noise::{pairing, NoiseIncrement, SeedSpec, SheetNoise, NoiseSource, StreamTag};
use crate::reflected::{step_count, PenalizedParams, Scheme, WALL_TOL};
use crate::replicas::{proportion, try_map_replicas, MeanEstimate};

pub const DEFAULT_ZETA: f64 = 1e-9;
pub const ORDER_TOL: f64 = 1e-10;

/// Index of the mixing coefficients; `Infinite` selects `(√z, √(1-z))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingOrder {
    Finite(u64),
    #[default]
    Infinite,
}

impl fmt::Display for MixingOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixingOrder::Finite(n) => write!(f, "{n}"),
            MixingOrder::Infinite => f.write_str("inf"),
        }
    }
}

/// `(f_n(z), g_n(z))` with `f_n(z) = √(z + 1/n) - √(1/n)` and `g_n = √(1 - f_n²)`.
pub fn mixing(z: f64, n: MixingOrder) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&z) {
        return Err(invalid("z", format!("must lie in [0, 1], got {z}")));
    }
    Ok(mixing_unchecked(z, n))
}

#[inline]
fn mixing_unchecked(z: f64, n: MixingOrder) -> (f64, f64) {
    let f = match n {
        MixingOrder::Infinite => z.sqrt(),
        MixingOrder::Finite(n) => {
            let h = 1.0 / n as f64;
            (z + h).sqrt() - h.sqrt()
        }
    };
    (f, (1.0 - f * f).max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub u: Field,
    pub v: Field,
    pub ordered: bool,
}

impl CoupledState {
    pub fn new(u: Field, v: Field) -> Result<Self> {
        u.grid().check_same(&v.grid())?;
        let ordered = u.values().iter().zip(v.values()).all(|(a, b)| a >= b);
        Ok(Self { u, v, ordered })
    }

    pub fn sup_gap(&self) -> f64 {
        sup_gap(self.u.values(), self.v.values())
    }
}

fn sup_gap(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub n: MixingOrder,
    /// Coupling threshold on `sup |u - v|`.
    pub zeta: f64,
    /// Required lower bound `σ ≥ L0` on visited states.
    pub sigma_floor: f64,
    /// Exponential tilt rate; `None` tilts by Lip(f) only when `f` is not nonincreasing.
    pub tilt: Option<f64>,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            n: MixingOrder::Infinite,
            zeta: DEFAULT_ZETA,
            sigma_floor: 1e-8,
            tilt: None,
        }
    }
}

impl CouplingConfig {
    pub fn tilt_rate(&self, p: &PenalizedParams) -> f64 {
        match self.tilt {
            Some(l) => l,
            None if p.drift.is_nonincreasing() => 0.0,
            None => p.drift.lipschitz(),
        }
    }
}

/// Redistributes the negative part of `upper - lower` so the gap is nonnegative and its sum
/// is unchanged. A nonpositive total collapses `lower` onto `upper`.
pub fn order_preserving_correction(upper: &[f64], lower: &mut [f64]) {
    let mut total = 0.0;
    let mut pos = 0.0;
    let mut negative = false;
    for (a, b) in upper.iter().zip(lower.iter()) {
        let d = a - b;
        total += d;
        if d > 0.0 {
            pos += d;
        } else if d < 0.0 {
            negative = true;
        }
    }
    if !negative {
        return;
    }
    let lambda = if total > 0.0 && pos > 0.0 { total / pos } else { 0.0 };
    for (a, b) in upper.iter().zip(lower.iter_mut()) {
        *b = a - lambda * (a - *b).max(0.0);
    }
}

struct PairKernel {
    params: PenalizedParams,
    cfg: CouplingConfig,
    walls: WallPair,
    prop: HeatPropagator,
    inv_dx: f64,
    tilt: f64,
}

impl PairKernel {
    fn new(walls: &WallPair, p: &PenalizedParams, cfg: &CouplingConfig) -> Result<Self> {
        p.validate()?;
        if cfg.zeta.is_nan() || cfg.zeta <= 0.0 {
            return Err(invalid("zeta", "coupling threshold must be positive"));
        }
        let tilt = cfg.tilt_rate(p);
        if !(tilt >= 0.0 && tilt.is_finite()) {
            return Err(invalid("tilt", format!("must be nonnegative, got {tilt}")));
        }
        Ok(Self {
            params: *p,
            cfg: *cfg,
            walls: walls.clone(),
            prop: HeatPropagator::new(walls.grid(), p.dt, p.propagator)?,
            inv_dx: 1.0 / walls.grid().dx(),
            tilt,
        })
    }

    fn scale(&self, t: f64) -> f64 {
        (-self.tilt * t).exp()
    }

    fn check_sigma(&self, state: f64, s: f64) -> Result<()> {
        if s < self.cfg.sigma_floor {
            return Err(Error::DiffusionBound {
                state,
                value: s,
                bound: self.cfg.sigma_floor,
            });
        }
        Ok(())
    }

    /// Free step in tilted coordinates `w = c·x`, `c = e^{-L t}`, for a state driven by the
    /// per-node noise mass `noise[i]` (already multiplied by σ).
    fn free(&mut self, w: &[f64], c0: f64, c1: f64, noise: &[f64], out: &mut [f64]) {
        let r = c1 / c0;
        let dt = self.params.dt;
        for i in 0..w.len() {
            let x = w[i] / c0;
            out[i] = r * (w[i] + c0 * (dt * self.params.drift.eval(x) + noise[i] * self.inv_dx));
        }
        self.prop.apply_in_place(out);
    }

    fn constrain(&self, w: &mut [f64], c1: f64) {
        let lo = self.walls.lower();
        let hi = self.walls.upper();
        for i in 0..w.len() {
            let next = match self.params.scheme {
                Scheme::Projected => w[i].clamp(c1 * lo[i], c1 * hi[i]),
                Scheme::Penalized => crate::reflected::penalty_substep(
                    w[i],
                    c1 * lo[i],
                    c1 * hi[i],
                    self.params.dt,
                    self.params.epsilon,
                    self.params.delta,
                ),
            };
            w[i] = next;
        }
    }
}

/// One scalar-diagnostic sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub t: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "QV")]
    pub qv: f64,
    /// Predictable bracket `Σ [(σ(u) - σ(v) g)² + σ(v)² f²] dx dt`, accumulated.
    pub bracket: f64,
    pub sup_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingDiagnostics {
    pub rows: Vec<DiagnosticRow>,
    pub tau: Option<f64>,
    pub zeta: f64,
    pub min_gap: f64,
    /// Steps between rows.
    pub stride: usize,
}

impl CouplingDiagnostics {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    /// `A = U - U(0) - M`.
    pub fn a(&self) -> Vec<f64> {
        let u0 = self.rows.first().map_or(0.0, |r| r.u);
        self.rows.iter().map(|r| r.u - u0 - r.m).collect()
    }

    pub fn coupled_by(&self, t: f64) -> bool {
        self.tau.is_some_and(|tau| tau <= t + 1e-12)
    }

    fn value_at(&self, t: f64) -> Option<&DiagnosticRow> {
        self.rows.iter().find(|r| (r.t - t).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoupledOptions {
    /// Steps between diagnostic rows (1 keeps every step).
    pub diag_stride: usize,
    /// Steps between stored states; `None` stores only the endpoints.
    pub path_stride: Option<usize>,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        Self {
            diag_stride: 1,
            path_stride: Some(1),
        }
    }
}

/// Advances a coupled pair by one step with the given increments.
pub fn step_coupled(
    state: &CoupledState,
    dw1: &NoiseIncrement,
    dw2: &NoiseIncrement,
    cfg: &CouplingConfig,
    walls: &WallPair,
    p: &PenalizedParams,
) -> Result<CoupledState> {
    let grid = walls.grid();
    for g in [state.u.grid(), state.v.grid(), dw1.grid(), dw2.grid()] {
        grid.check_same(&g)?;
    }
    let cfg = CouplingConfig {
        tilt: Some(0.0),
        ..*cfg
    };
    let mut k = PairKernel::new(walls, p, &cfg)?;
    let mut u = state.u.values().to_vec();
    let mut lowers = vec![state.v.values().to_vec()];
    let mut acc = vec![StepAccum::default()];
    let mut fused = vec![false];
    advance(
        &mut k,
        &mut u,
        &mut lowers,
        dw1.values(),
        &[dw2.values()],
        &[state.ordered],
        &mut fused,
        1.0,
        1.0,
        &mut acc,
    )?;
    let t = state.u.time() + p.dt;
    let v = lowers.pop().unwrap();
    Ok(CoupledState {
        u: Field::from_raw(grid, u, t),
        v: Field::from_raw(grid, v, t),
        ordered: state.ordered,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct StepAccum {
    dm: f64,
    dbracket: f64,
}

/// Advances the upper state and every lower state by one step, in tilted coordinates.
#[allow(clippy::too_many_arguments)]
fn advance(
    k: &mut PairKernel,
    u: &mut Vec<f64>,
    lowers: &mut [Vec<f64>],
    dw1: &[f64],
    dw2: &[&[f64]],
    ordered: &[bool],
    fused: &mut [bool],
    c0: f64,
    c1: f64,
    acc: &mut [StepAccum],
) -> Result<()> {
    let n = u.len();
    let dx = 1.0 / k.inv_dx;
    let dt = k.params.dt;
    let mut sig_u = vec![0.0; n];
    let mut noise_u = vec![0.0; n];
    for i in 0..n {
        let x = u[i] / c0;
        let s = k.params.diffusion.eval(x);
        k.check_sigma(x, s)?;
        sig_u[i] = s;
        noise_u[i] = s * dw1[i];
    }
    let mut next_u = vec![0.0; n];
    k.free(u, c0, c1, &noise_u, &mut next_u);
    let mut free_lowers = Vec::with_capacity(lowers.len());
    let mut noise_v = vec![0.0; n];
    for (j, v) in lowers.iter().enumerate() {
        if fused[j] {
            free_lowers.push(None);
            acc[j] = StepAccum::default();
            continue;
        }
        let mut next_v = vec![0.0; n];
        let mut dm = pairing(dw1, &sig_u);
        let mut dbr = 0.0;
        for i in 0..n {
            let xu = u[i] / c0;
            let xv = v[i] / c0;
            let z = (xu - xv).abs().min(1.0);
            let (f, g) = mixing_unchecked(z, k.cfg.n);
            let s = k.params.diffusion.eval(xv);
            k.check_sigma(xv, s)?;
            let mixed = g * dw1[i] + f * dw2[j][i];
            noise_v[i] = s * mixed;
            dm -= s * mixed;
            dbr += ((sig_u[i] - s * g).powi(2) + (s * f).powi(2)) * dx * dt;
        }
        k.free(v, c0, c1, &noise_v, &mut next_v);
        if ordered[j] {
            order_preserving_correction(&next_u, &mut next_v);
        }
        acc[j] = StepAccum { dm, dbracket: dbr };
        free_lowers.push(Some(next_v));
    }
    k.constrain(&mut next_u, c1);
    for (j, fl) in free_lowers.into_iter().enumerate() {
        match fl {
            Some(mut w) => {
                k.constrain(&mut w, c1);
                lowers[j] = w;
            }
            None => lowers[j].copy_from_slice(&next_u),
        }
    }
    for (i, x) in next_u.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { node: i });
        }
    }
    *u = next_u;
    Ok(())
}

struct MultiRun {
    upper: Vec<Field>,
    lowers: Vec<Vec<Field>>,
    diags: Vec<CouplingDiagnostics>,
}

fn stream_for(j: usize) -> StreamTag {
    if j == 0 {
        StreamTag::W2
    } else {
        StreamTag::Aux
    }
}

/// Couples one upper state with up to two lower states (mixing streams W2 and AUX).
#[allow(clippy::too_many_arguments)]
fn run_multi(
    u0: &Field,
    v0s: &[Field],
    walls: &WallPair,
    t_end: f64,
    cfg: &CouplingConfig,
    p: &PenalizedParams,
    seeds: SeedSpec,
    opts: CoupledOptions,
) -> Result<MultiRun> {
    let grid = walls.grid();
    if v0s.is_empty() || v0s.len() > 2 {
        return Err(invalid("lowers", "need one or two lower states"));
    }
    grid.check_same(&u0.grid())?;
    walls.check_contains(u0, WALL_TOL)?;
    for v in v0s {
        grid.check_same(&v.grid())?;
        walls.check_contains(v, WALL_TOL)?;
    }
    let steps = step_count(t_end, p.dt)?;
    let mut kern = PairKernel::new(walls, p, cfg)?;
    let n = grid.len();
    let dx = grid.dx();
    let w1 = SheetNoise::new(grid, p.dt, seeds.with_stream(StreamTag::W1))?;
    let w2: Vec<SheetNoise> = (0..v0s.len())
        .map(|j| SheetNoise::new(grid, p.dt, seeds.with_stream(stream_for(j))))
        .collect::<Result<_>>()?;
    let ordered: Vec<bool> = v0s
        .iter()
        .map(|v| u0.values().iter().zip(v.values()).all(|(a, b)| a >= b))
        .collect();
    let t0 = u0.time();
    let mut u = u0.values().to_vec();
    let mut lowers: Vec<Vec<f64>> = v0s.iter().map(|v| v.values().to_vec()).collect();
    let mut fused = vec![false; v0s.len()];
    let mut acc = vec![StepAccum::default(); v0s.len()];
    let mut m = vec![0.0; v0s.len()];
    let mut qv = vec![0.0; v0s.len()];
    let mut bracket = vec![0.0; v0s.len()];
    let diag_stride = opts.diag_stride.max(1);
    let mut diags: Vec<CouplingDiagnostics> = (0..v0s.len())
        .map(|_| CouplingDiagnostics {
            rows: Vec::with_capacity(steps / diag_stride + 2),
            tau: None,
            zeta: cfg.zeta,
            min_gap: f64::INFINITY,
            stride: diag_stride,
        })
        .collect();
    let mut upper_path = vec![u0.clone()];
    let mut lower_paths: Vec<Vec<Field>> = v0s.iter().map(|v| vec![v.clone()]).collect();

    let record = |diags: &mut Vec<CouplingDiagnostics>,
                  j: usize,
                  t: f64,
                  u: &[f64],
                  v: &[f64],
                  c: f64,
                  m: f64,
                  qv: f64,
                  br: f64| {
        let mut big_u = 0.0;
        let mut sup = 0.0f64;
        let mut min = f64::INFINITY;
        for (a, b) in u.iter().zip(v) {
            let d = (a - b) / c;
            big_u += d;
            sup = sup.max(d.abs());
            min = min.min(d);
        }
        diags[j].min_gap = diags[j].min_gap.min(min);
        DiagnosticRow {
            t,
            u: big_u * dx,
            m,
            qv,
            bracket: br,
            sup_gap: sup,
        }
    };

    for j in 0..v0s.len() {
        let row = record(&mut diags, j, t0, &u, &lowers[j], 1.0, 0.0, 0.0, 0.0);
        if row.sup_gap <= cfg.zeta {
            fused[j] = true;
            diags[j].tau = Some(t0);
            lowers[j].copy_from_slice(&u);
        }
        diags[j].rows.push(row);
    }

    let mut dw1 = vec![0.0; n];
    let mut dw2 = vec![vec![0.0; n]; v0s.len()];
    for step in 0..steps {
        let t = t0 + step as f64 * p.dt;
        let t1 = t0 + (step + 1) as f64 * p.dt;
        let c0 = kern.scale(t - t0);
        let c1 = kern.scale(t1 - t0);
        w1.fill(step as u64, &mut dw1);
        for (j, src) in w2.iter().enumerate() {
            if !fused[j] {
                src.fill(step as u64, &mut dw2[j]);
            }
        }
        let refs: Vec<&[f64]> = dw2.iter().map(|v| v.as_slice()).collect();
        advance(
            &mut kern,
            &mut u,
            &mut lowers,
            &dw1,
            &refs,
            &ordered,
            &mut fused,
            c0,
            c1,
            &mut acc,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::BlowUp {
                step: step + 1,
                time: t1,
            },
            other => other,
        })?;
        let keep_diag = (step + 1) % diag_stride == 0 || step + 1 == steps;
        for j in 0..v0s.len() {
            m[j] += acc[j].dm;
            qv[j] += acc[j].dm * acc[j].dm;
            bracket[j] += acc[j].dbracket;
            let row = record(&mut diags, j, t1, &u, &lowers[j], c1, m[j], qv[j], bracket[j]);
            if ordered[j] && row.sup_gap > 0.0 && diags[j].min_gap < -ORDER_TOL {
                return Err(Error::OrderingViolated {
                    step: step + 1,
                    gap: diags[j].min_gap,
                });
            }
            if !fused[j] && row.sup_gap <= cfg.zeta {
                fused[j] = true;
                diags[j].tau = Some(t1);
                lowers[j].copy_from_slice(&u);
            }
            if keep_diag {
                diags[j].rows.push(row);
            }
        }
        let keep_path = match opts.path_stride {
            Some(s) => (step + 1) % s.max(1) == 0 || step + 1 == steps,
            None => step + 1 == steps,
        };
        if keep_path {
            upper_path.push(unscale(grid, &u, c1, t1));
            for j in 0..v0s.len() {
                lower_paths[j].push(unscale(grid, &lowers[j], c1, t1));
            }
        }
    }
    Ok(MultiRun {
        upper: upper_path,
        lowers: lower_paths,
        diags,
    })
}

fn unscale(grid: CircleGrid, w: &[f64], c: f64, t: f64) -> Field {
    Field::from_raw(grid, w.iter().map(|x| x / c).collect(), t)
}

/// Ordered coupled run from `u0 ≥ v0`; returns the stored path and the scalar diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn run_coupled_ordered(
    u0: &Field,
    v0: &Field,
    walls: &WallPair,
    t_end: f64,
    cfg: &CouplingConfig,
    p: &PenalizedParams,
    seeds: SeedSpec,
    opts: CoupledOptions,
) -> Result<(Vec<CoupledState>, CouplingDiagnostics)> {
    if u0.values().iter().zip(v0.values()).any(|(a, b)| a < b) {
        return Err(invalid("v0", "ordered coupling needs u0 >= v0 at every node"));
    }
    let mut run = run_multi(u0, std::slice::from_ref(v0), walls, t_end, cfg, p, seeds, opts)?;
    let lower = run.lowers.pop().unwrap();
    let path = run
        .upper
        .into_iter()
        .zip(lower)
        .map(|(u, v)| CoupledState { u, v, ordered: true })
        .collect();
    Ok((path, run.diags.pop().unwrap()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralCouplingReport {
    pub tau_a: Option<f64>,
    pub tau_b: Option<f64>,
    /// Both lower processes have merged with the dominating one.
    pub tau_combined: Option<f64>,
    /// `max_k [sup|u_a - u_b| - sup|v - u_a| - sup|v - u_b|]`, never positive.
    pub triangle_slack: f64,
    pub final_gap_ab: f64,
}

/// Couples `u_a` and `u_b` through the dominating process started from `max(u0_a, u0_b)`.
#[allow(clippy::too_many_arguments)]
pub fn run_coupled_general(
    u0_a: &Field,
    u0_b: &Field,
    walls: &WallPair,
    t_end: f64,
    cfg: &CouplingConfig,
    p: &PenalizedParams,
    seeds: SeedSpec,
    path_stride: usize,
) -> Result<GeneralCouplingReport> {
    let top = u0_a.zip_with(u0_b, f64::max)?;
    let run = run_multi(
        &top,
        &[u0_a.clone(), u0_b.clone()],
        walls,
        t_end,
        cfg,
        p,
        seeds,
        CoupledOptions {
            diag_stride: path_stride.max(1),
            path_stride: Some(path_stride.max(1)),
        },
    )?;
    let mut slack = f64::NEG_INFINITY;
    let mut final_gap = 0.0;
    for k in 0..run.upper.len() {
        let v = run.upper[k].values();
        let a = run.lowers[0][k].values();
        let b = run.lowers[1][k].values();
        let ab = sup_gap(a, b);
        slack = slack.max(ab - sup_gap(v, a) - sup_gap(v, b));
        final_gap = ab;
    }
    let tau_a = run.diags[0].tau;
    let tau_b = run.diags[1].tau;
    let tau_combined = match (tau_a, tau_b) {
        (Some(a), Some(b)) => Some(a.max(b)),
        _ => None,
    };
    Ok(GeneralCouplingReport {
        tau_a,
        tau_b,
        tau_combined,
        triangle_slack: slack,
        final_gap_ab: final_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QvReport {
    /// Steps with `U(t_k)` above the threshold.
    pub steps_used: usize,
    pub threshold: f64,
    /// 1st percentile of `ΔQV / (U dt)`.
    pub qv_p01: f64,
    pub qv_median: f64,
    /// 1st percentile and median of `Δ⟨M⟩ / (U dt)`.
    pub bracket_p01: f64,
    pub bracket_median: f64,
    pub c0_est: f64,
    pub insufficient_data: bool,
}

impl QvReport {
    pub fn passed(&self) -> bool {
        !self.insufficient_data && self.qv_p01 >= self.c0_est && self.qv_p01 > 0.0
    }
}

pub const QV_THRESHOLD: f64 = 0.01;

/// Frozen per-step lower bound for `ΔQV / (U dt)` at σ ≡ 1: a single step of `ΔM²` is
/// `χ²₁`-distributed around a bracket rate near 1, whose 1% quantile is `1.57e-4`.
pub const C0_EST: f64 = 1e-4;

/// Per-step quadratic-variation growth relative to `U`, pooled over one or more runs.
pub fn qv_lower_bound_check(diags: &[CouplingDiagnostics], c0_est: f64) -> Result<QvReport> {
    let (qv, br) = qv_ratios(diags)?;
    if qv.is_empty() {
        return Ok(QvReport {
            steps_used: 0,
            threshold: QV_THRESHOLD,
            qv_p01: f64::NAN,
            qv_median: f64::NAN,
            bracket_p01: f64::NAN,
            bracket_median: f64::NAN,
            c0_est,
            insufficient_data: true,
        });
    }
    Ok(QvReport {
        steps_used: qv.len(),
        threshold: QV_THRESHOLD,
        qv_p01: crate::ergodics::stats::quantile(&qv, 0.01),
        qv_median: crate::ergodics::stats::quantile(&qv, 0.5),
        bracket_p01: crate::ergodics::stats::quantile(&br, 0.01),
        bracket_median: crate::ergodics::stats::quantile(&br, 0.5),
        c0_est,
        insufficient_data: false,
    })
}

/// `(ΔQV_k / (U_k dt), Δ⟨M⟩_k / (U_k dt))` for every step with `U_k > QV_THRESHOLD`.
pub fn qv_ratios(diags: &[CouplingDiagnostics]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut qv = Vec::new();
    let mut br = Vec::new();
    for d in diags {
        if d.stride != 1 {
            return Err(Error::Misaligned("QV check needs per-step diagnostics".into()));
        }
        for w in d.rows.windows(2) {
            let dt = w[1].t - w[0].t;
            if w[0].u > QV_THRESHOLD && dt > 0.0 {
                qv.push((w[1].qv - w[0].qv) / (w[0].u * dt));
                br.push((w[1].bracket - w[0].bracket) / (w[0].u * dt));
            }
        }
    }
    Ok((qv, br))
}

/// Per-replica outcome used by the ensemble summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaOutcome {
    pub tau: Option<f64>,
    /// `U` at the requested checkpoints.
    pub u_at: Vec<f64>,
    pub m_final: f64,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingEnsemble {
    pub checkpoints: Vec<f64>,
    pub outcomes: Vec<ReplicaOutcome>,
}

impl CouplingEnsemble {
    pub fn probability_by(&self, t: f64) -> MeanEstimate {
        let hits = self
            .outcomes
            .iter()
            .filter(|o| o.tau.is_some_and(|tau| tau <= t + 1e-12))
            .count();
        proportion(hits, self.outcomes.len())
    }

    pub fn mean_u(&self) -> Vec<MeanEstimate> {
        (0..self.checkpoints.len())
            .map(|k| {
                let xs: Vec<f64> = self.outcomes.iter().map(|o| o.u_at[k]).collect();
                crate::replicas::mean_estimate(&xs)
            })
            .collect()
    }

    pub fn mean_m_final(&self) -> MeanEstimate {
        let xs: Vec<f64> = self.outcomes.iter().map(|o| o.m_final).collect();
        crate::replicas::mean_estimate(&xs)
    }

    pub fn min_gap(&self) -> f64 {
        self.outcomes.iter().map(|o| o.min_gap).fold(f64::INFINITY, f64::min)
    }

    /// Quantile of the coupling time, counting uncoupled replicas as `+∞`.
    pub fn tau_quantile(&self, q: f64) -> Option<f64> {
        let mut taus: Vec<f64> = self.outcomes.iter().filter_map(|o| o.tau).collect();
        taus.sort_by(f64::total_cmp);
        let idx = ((q.clamp(0.0, 1.0) * self.outcomes.len() as f64).ceil() as usize).max(1);
        taus.get(idx - 1).copied()
    }
}

/// Runs `replicas` ordered couplings to the last checkpoint; replica `r` uses replica id `r`.
#[allow(clippy::too_many_arguments)]
pub fn coupling_ensemble(
    u0: &Field,
    v0: &Field,
    walls: &WallPair,
    checkpoints: &[f64],
    cfg: &CouplingConfig,
    p: &PenalizedParams,
    master_seed: u64,
    replicas: u64,
) -> Result<CouplingEnsemble> {
    let horizon = checkpoints.iter().copied().fold(0.0, f64::max);
    let outcomes = try_map_replicas(replicas, |r| {
        let seeds = SeedSpec::new(master_seed, r, StreamTag::W1);
        let (_, diag) = run_coupled_ordered(
            u0,
            v0,
            walls,
            horizon,
            cfg,
            p,
            seeds,
            CoupledOptions {
                diag_stride: 1,
                path_stride: None,
            },
        )?;
        let u_at = checkpoints
            .iter()
            .map(|&t| {
                diag.value_at(t)
                    .map(|row| row.u)
                    .ok_or_else(|| Error::Misaligned(format!("checkpoint {t} is not on the time grid")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ReplicaOutcome {
            tau: diag.tau,
            u_at,
            m_final: diag.rows.last().map_or(0.0, |r| r.m),
            min_gap: diag.min_gap,
        })
    })?;
    Ok(CouplingEnsemble {
        checkpoints: checkpoints.to_vec(),
        outcomes,
    })
}
