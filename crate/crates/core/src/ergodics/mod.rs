//! Invariant-measure diagnostics and the strong Feller probe.

pub mod mollify;
pub mod stats;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::coupling::{coupling_ensemble, run_coupled_general, CouplingConfig};
use crate::error::{invalid, Error, Result};
use crate::grid::{holder_norm_with, CircleGrid, Field, HolderOptions, WallPair};
use crate::heat::{stochastic_convolution_with, HeatPropagator};
use crate::noise::{NoiseIncrement, NoiseSource, SeedSpec, SheetNoise, StreamTag};
use crate::reflected::{for_each_state, step_count, PenalizedParams, WALL_TOL};
use crate::replicas::{mean_estimate, proportion, try_map_replicas, MeanEstimate};

pub use mollify::MollifiedCoefficients;
use stats::{ks_null_band, ks_sorted, ks_stderr_proxy, weighted_slope, Ecdf, SlopeFit};

/// Scalar functionals of a field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    Point { node: usize },
    Mean,
    Sup,
    /// `sin(mean u)`
    SinMean,
    Constant { value: f64 },
}

impl Observable {
    pub fn eval(&self, u: &[f64]) -> f64 {
        match *self {
            Observable::Point { node } => u[node],
            Observable::Mean => u.iter().sum::<f64>() / u.len() as f64,
            Observable::Sup => u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Observable::SinMean => (u.iter().sum::<f64>() / u.len() as f64).sin(),
            Observable::Constant { value } => value,
        }
    }

    /// `sup |φ|` over all fields, when the observable is globally bounded.
    pub fn sup_norm(&self) -> Option<f64> {
        match *self {
            Observable::SinMean => Some(1.0),
            Observable::Constant { value } => Some(value.abs()),
            _ => None,
        }
    }

    fn check(&self, grid: CircleGrid) -> Result<()> {
        match *self {
            Observable::Point { node } if node >= grid.len() => Err(invalid(
                "observable",
                format!("node {node} outside a {}-node grid", grid.len()),
            )),
            _ => Ok(()),
        }
    }

    /// Four evenly spaced point evaluations, the mean and the sup.
    pub fn defaults(grid: CircleGrid) -> Vec<Observable> {
        let n = grid.len();
        let mut v: Vec<Observable> = (0..4).map(|q| Observable::Point { node: q * n / 4 }).collect();
        v.push(Observable::Mean);
        v.push(Observable::Sup);
        v
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Observable::Point { node } => write!(f, "u[{node}]"),
            Observable::Mean => f.write_str("mean"),
            Observable::Sup => f.write_str("sup"),
            Observable::SinMean => f.write_str("sin(mean)"),
            Observable::Constant { value } => write!(f, "const({value})"),
        }
    }
}

fn steps_at(times: &[f64], dt: f64) -> Result<Vec<usize>> {
    times.iter().map(|&t| step_count(t, dt)).collect()
}

fn check_observables(obs: &[Observable], grid: CircleGrid) -> Result<()> {
    obs.iter().try_for_each(|o| o.check(grid))
}

/// Pooled empirical laws of observables over strided post-burn-in times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationSummary {
    pub observables: Vec<Observable>,
    pub burn_in: f64,
    pub stride: f64,
    pub horizon: f64,
    pub replicas: u64,
    pub cdfs: Vec<Ecdf>,
}

#[allow(clippy::too_many_arguments)]
pub fn occupation_measure(
    u0: &Field,
    walls: &WallPair,
    horizon: f64,
    burn_in: f64,
    stride: f64,
    observables: &[Observable],
    p: &PenalizedParams,
    master_seed: u64,
    replicas: u64,
) -> Result<OccupationSummary> {
    occupation_measure_from(u0, walls, horizon, burn_in, stride, observables, p, master_seed, 0, replicas)
}

/// As [`occupation_measure`], over replica ids `first_replica..first_replica + replicas`.
#[allow(clippy::too_many_arguments)]
pub fn occupation_measure_from(
    u0: &Field,
    walls: &WallPair,
    horizon: f64,
    burn_in: f64,
    stride: f64,
    observables: &[Observable],
    p: &PenalizedParams,
    master_seed: u64,
    first_replica: u64,
    replicas: u64,
) -> Result<OccupationSummary> {
    if !(horizon > burn_in && burn_in >= 0.0) {
        return Err(invalid("burn_in", format!("need 0 <= burn_in < horizon, got {burn_in} vs {horizon}")));
    }
    let grid = walls.grid();
    check_observables(observables, grid)?;
    let burn_steps = if burn_in == 0.0 { 0 } else { step_count(burn_in, p.dt)? };
    let stride_steps = step_count(stride, p.dt)?;
    let per_replica = try_map_replicas(replicas, |r| {
        let noise = SheetNoise::new(grid, p.dt, SeedSpec::new(master_seed, first_replica + r, StreamTag::W1))?;
        let mut samples = vec![Vec::new(); observables.len()];
        for_each_state(u0, walls, horizon, p, &noise, |k, _, u| {
            if k >= burn_steps && (k - burn_steps) % stride_steps == 0 {
                for (j, o) in observables.iter().enumerate() {
                    samples[j].push(o.eval(u));
                }
            }
        })?;
        Ok(samples)
    })?;
    let mut pooled = vec![Vec::new(); observables.len()];
    for rep in per_replica {
        for (j, s) in rep.into_iter().enumerate() {
            pooled[j].extend(s);
        }
    }
    Ok(OccupationSummary {
        observables: observables.to_vec(),
        burn_in,
        stride,
        horizon,
        replicas,
        cdfs: pooled.into_iter().map(Ecdf::new).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurnInRow {
    pub observable: Observable,
    pub ks: f64,
    pub null_band: f64,
}

impl BurnInRow {
    pub fn stable(&self) -> bool {
        self.ks <= self.null_band
    }
}

/// Occupation laws after burn-in `B` and `2B`; the second run uses fresh replica ids so the two
/// samples are independent.
#[allow(clippy::too_many_arguments)]
pub fn burn_in_stability(
    u0: &Field,
    walls: &WallPair,
    horizon: f64,
    burn_in: f64,
    stride: f64,
    observables: &[Observable],
    p: &PenalizedParams,
    master_seed: u64,
    replicas: u64,
    alpha: f64,
) -> Result<Vec<BurnInRow>> {
    let a = occupation_measure_from(u0, walls, horizon, burn_in, stride, observables, p, master_seed, 0, replicas)?;
    let b = occupation_measure_from(
        u0,
        walls,
        horizon,
        2.0 * burn_in,
        stride,
        observables,
        p,
        master_seed,
        replicas,
        replicas,
    )?;
    Ok(compare_occupations(&a, &b, alpha)
        .into_iter()
        .zip(observables)
        .map(|((ks, null_band), &observable)| BurnInRow {
            observable,
            ks,
            null_band,
        })
        .collect())
}

/// KS distance between matching observables of two summaries, with the null band at `alpha`.
pub fn compare_occupations(a: &OccupationSummary, b: &OccupationSummary, alpha: f64) -> Vec<(f64, f64)> {
    a.cdfs
        .iter()
        .zip(&b.cdfs)
        .map(|(x, y)| {
            (
                ks_sorted(x.samples(), y.samples()),
                ks_null_band(x.len(), y.len(), alpha),
            )
        })
        .collect()
}

/// Values of every observable at every requested time for one chain.
fn observe_at(
    u0: &Field,
    walls: &WallPair,
    steps: &[usize],
    observables: &[Observable],
    p: &PenalizedParams,
    seed: SeedSpec,
) -> Result<Vec<Vec<f64>>> {
    let grid = walls.grid();
    let last = *steps.iter().max().unwrap();
    let noise = SheetNoise::new(grid, p.dt, seed)?;
    let mut out = vec![vec![0.0; observables.len()]; steps.len()];
    for_each_state(u0, walls, last as f64 * p.dt, p, &noise, |k, _, u| {
        for (i, &s) in steps.iter().enumerate() {
            if s == k {
                for (j, o) in observables.iter().enumerate() {
                    out[i][j] = o.eval(u);
                }
            }
        }
    })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvRow {
    pub t: f64,
    /// KS distance per observable between the two chains (independent noises).
    pub ks: Vec<f64>,
    pub ks_max: f64,
    pub ks_stderr: f64,
    pub ks_null_band: f64,
    /// `P(sup |u_a - u_b| > ζ at t)` under the coupling.
    pub gap_probability: MeanEstimate,
}

#[allow(clippy::too_many_arguments)]
pub fn two_chain_tv_proxy(
    u0_a: &Field,
    u0_b: &Field,
    walls: &WallPair,
    t_list: &[f64],
    replicas: u64,
    observables: &[Observable],
    p: &PenalizedParams,
    cfg: &CouplingConfig,
    master_seed: u64,
) -> Result<Vec<TvRow>> {
    let grid = walls.grid();
    walls.check_contains(u0_a, WALL_TOL)?;
    walls.check_contains(u0_b, WALL_TOL)?;
    check_observables(observables, grid)?;
    if t_list.is_empty() {
        return Err(Error::InsufficientData("empty time list".into()));
    }
    let steps = steps_at(t_list, p.dt)?;
    let chains = try_map_replicas(replicas, |r| {
        let a = observe_at(u0_a, walls, &steps, observables, p, SeedSpec::new(master_seed, r, StreamTag::W1))?;
        let b = observe_at(u0_b, walls, &steps, observables, p, SeedSpec::new(master_seed, r, StreamTag::W2))?;
        Ok((a, b))
    })?;
    let gap = coupled_gap_probability(u0_a, u0_b, walls, t_list, cfg, p, coupling_seed(master_seed), replicas)?;
    let n = replicas as usize;
    let mut rows = Vec::with_capacity(t_list.len());
    for (i, &t) in t_list.iter().enumerate() {
        let mut ks = Vec::with_capacity(observables.len());
        for j in 0..observables.len() {
            let mut a: Vec<f64> = chains.iter().map(|c| c.0[i][j]).collect();
            let mut b: Vec<f64> = chains.iter().map(|c| c.1[i][j]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            ks.push(ks_sorted(&a, &b));
        }
        rows.push(TvRow {
            t,
            ks_max: ks.iter().copied().fold(0.0, f64::max),
            ks,
            ks_stderr: ks_stderr_proxy(n, n),
            ks_null_band: ks_null_band(n, n, 0.01),
            gap_probability: gap[i],
        });
    }
    Ok(rows)
}

fn coupling_seed(master: u64) -> u64 {
    master ^ 0xc0c0_0000_0000_0001
}

/// `P(sup gap > ζ at t)` for each `t`, using the ordered coupling when the data are ordered.
#[allow(clippy::too_many_arguments)]
pub fn coupled_gap_probability(
    u0_a: &Field,
    u0_b: &Field,
    walls: &WallPair,
    t_list: &[f64],
    cfg: &CouplingConfig,
    p: &PenalizedParams,
    master_seed: u64,
    replicas: u64,
) -> Result<Vec<MeanEstimate>> {
    let dominates = |x: &Field, y: &Field| x.values().iter().zip(y.values()).all(|(a, b)| a >= b);
    let ordered = if dominates(u0_a, u0_b) {
        Some((u0_a, u0_b))
    } else if dominates(u0_b, u0_a) {
        Some((u0_b, u0_a))
    } else {
        None
    };
    let taus: Vec<Option<f64>> = match ordered {
        Some((hi, lo)) => coupling_ensemble(hi, lo, walls, t_list, cfg, p, master_seed, replicas)?
            .outcomes
            .into_iter()
            .map(|o| o.tau)
            .collect(),
        None => {
            let horizon = t_list.iter().copied().fold(0.0, f64::max);
            try_map_replicas(replicas, |r| {
                let rep = run_coupled_general(
                    u0_a,
                    u0_b,
                    walls,
                    horizon,
                    cfg,
                    p,
                    SeedSpec::new(master_seed, r, StreamTag::W1),
                    usize::MAX,
                )?;
                Ok(rep.tau_combined)
            })?
        }
    };
    Ok(t_list
        .iter()
        .map(|&t| {
            let apart = taus.iter().filter(|tau| !tau.is_some_and(|x| x <= t + 1e-12)).count();
            proportion(apart, taus.len())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub label: String,
    /// `(E Y^{1/κ})^κ`
    pub moment: f64,
    pub mean: MeanEstimate,
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub exponent: f64,
    pub kappa: f64,
    pub rows: Vec<TightnessRow>,
}

impl TightnessReport {
    pub fn moment_ratio(&self) -> f64 {
        let max = self.rows.iter().map(|r| r.moment).fold(f64::NEG_INFINITY, f64::max);
        let min = self.rows.iter().map(|r| r.moment).fold(f64::INFINITY, f64::min);
        if max == 0.0 {
            1.0
        } else {
            max / min
        }
    }
}

/// Samples of `Y = ‖v‖_{α-κ}` for the stochastic convolution `v` driven by the reflected
/// solution started at `g`, on `[0, 1]`. Replica `r` uses the same noise for every `g`.
#[allow(clippy::too_many_arguments)]
pub fn holder_samples(
    g: &Field,
    walls: &WallPair,
    exponent: f64,
    p: &PenalizedParams,
    master_seed: u64,
    replicas: u64,
    path_stride: usize,
) -> Result<Vec<f64>> {
    let grid = walls.grid();
    let steps = step_count(1.0, p.dt)?;
    let stride = path_stride.max(1);
    try_map_replicas(replicas, |r| {
        let seed = SeedSpec::new(master_seed, r, StreamTag::W1);
        let noise = SheetNoise::new(grid, p.dt, seed)?;
        let mut drift = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        let mut incs = Vec::with_capacity(steps);
        let mut times = Vec::with_capacity(steps + 1);
        for_each_state(g, walls, 1.0, p, &noise, |k, t, u| {
            times.push(t);
            if k < steps {
                drift.push(Field::from_raw(grid, u.iter().map(|&x| p.drift.eval(x)).collect(), t));
                sigma.push(Field::from_raw(grid, u.iter().map(|&x| p.diffusion.eval(x)).collect(), t));
            }
        })?;
        for k in 0..steps {
            incs.push(noise.increment(k as u64));
        }
        let v = stochastic_convolution_with(&drift, &sigma, &incs, &times, p.propagator)?;
        let thinned: Vec<Field> = v.into_iter().step_by(stride).collect();
        holder_norm_with(
            &thinned,
            exponent,
            // same sampled pair set for every g, at a cost independent of the path length
            HolderOptions {
                full_pair_limit: 0,
                seed: master_seed ^ r,
                ..HolderOptions::default()
            },
        )
    })
}

/// `(E Y^{1/κ})^κ` computed stably in log space.
pub fn lp_moment(ys: &[f64], kappa: f64) -> f64 {
    let q = 1.0 / kappa;
    let max = ys.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    let mean = ys.iter().map(|y| (y / max).powf(q)).sum::<f64>() / ys.len() as f64;
    max * mean.powf(kappa)
}

#[allow(clippy::too_many_arguments)]
pub fn tightness_stats(
    g_list: &[(String, Field)],
    alpha: f64,
    kappa: f64,
    replicas: u64,
    walls: &WallPair,
    p: &PenalizedParams,
    master_seed: u64,
    path_stride: usize,
) -> Result<TightnessReport> {
    let exponent = alpha - kappa;
    if !(kappa > 0.0 && exponent > 0.0 && exponent < 0.25) {
        return Err(invalid(
            "alpha",
            format!("need kappa > 0 and alpha - kappa in (0, 1/4), got {alpha} - {kappa}"),
        ));
    }
    let mut rows = Vec::with_capacity(g_list.len());
    for (label, g) in g_list {
        walls.check_contains(g, WALL_TOL)?;
        let ys = holder_samples(g, walls, exponent, p, master_seed, replicas, path_stride)?;
        rows.push(TightnessRow {
            label: label.clone(),
            moment: lp_moment(&ys, kappa),
            mean: mean_estimate(&ys),
            p99: stats::quantile(&ys, 0.99),
        });
    }
    Ok(TightnessReport {
        exponent,
        kappa,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FellerRow {
    pub t: f64,
    /// `Ê φ(u(t, g1)) - Ê φ(u(t, g2))`
    pub difference: f64,
    pub difference_stderr: f64,
    pub ratio: f64,
    pub ratio_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FellerTable {
    pub rows: Vec<FellerRow>,
    pub h_distance: f64,
    pub phi_sup: f64,
    pub replicas: u64,
    /// Weighted fit of `log R` against `log t` over rows with `R > 0`.
    pub slope: Option<SlopeFit>,
}

impl FellerTable {
    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.ratio).fold(0.0, f64::max)
    }
}

/// `|g1 - g2|_H`.
pub fn h_distance(a: &Field, b: &Field) -> Result<f64> {
    let d = a.zip_with(b, |x, y| x - y)?;
    Ok(crate::grid::l2_inner(&d, &d)?.sqrt())
}

/// `R(t) = |Ê φ(u(t,g1)) - Ê φ(u(t,g2))| √t / (‖φ‖_∞ |g1 - g2|_H)`, chains on independent noise.
#[allow(clippy::too_many_arguments)]
pub fn strong_feller_probe(
    phi: Observable,
    g1: &Field,
    g2: &Field,
    t_list: &[f64],
    replicas: u64,
    walls: &WallPair,
    p: &PenalizedParams,
    master_seed: u64,
) -> Result<FellerTable> {
    let grid = walls.grid();
    phi.check(grid)?;
    let phi_sup = phi
        .sup_norm()
        .ok_or_else(|| invalid("phi", format!("observable {phi} has no finite sup norm")))?;
    let h = h_distance(g1, g2)?;
    if h == 0.0 {
        return Err(invalid("g2", "initial data coincide, ratio undefined"));
    }
    let steps = steps_at(t_list, p.dt)?;
    let obs = [phi];
    let chains = try_map_replicas(replicas, |r| {
        let a = observe_at(g1, walls, &steps, &obs, p, SeedSpec::new(master_seed, r, StreamTag::W1))?;
        let b = observe_at(g2, walls, &steps, &obs, p, SeedSpec::new(master_seed, r, StreamTag::W2))?;
        Ok((a, b))
    })?;
    let mut rows = Vec::with_capacity(t_list.len());
    for (i, &t) in t_list.iter().enumerate() {
        let a: Vec<f64> = chains.iter().map(|c| c.0[i][0]).collect();
        let b: Vec<f64> = chains.iter().map(|c| c.1[i][0]).collect();
        let ea = mean_estimate(&a);
        let eb = mean_estimate(&b);
        let diff = ea.mean - eb.mean;
        let se = ea.stderr.hypot(eb.stderr);
        let scale = if phi_sup > 0.0 { t.sqrt() / (phi_sup * h) } else { 0.0 };
        rows.push(FellerRow {
            t,
            difference: diff,
            difference_stderr: se,
            ratio: diff.abs() * scale,
            ratio_stderr: se * scale,
        });
    }
    let fit_rows: Vec<&FellerRow> = rows.iter().filter(|r| r.ratio > 0.0 && r.t > 0.0).collect();
    let slope = if fit_rows.len() >= 2 {
        let x: Vec<f64> = fit_rows.iter().map(|r| r.t.ln()).collect();
        let y: Vec<f64> = fit_rows.iter().map(|r| r.ratio.ln()).collect();
        // Relative error of R, capped so an estimate buried in noise still carries some weight.
        let s: Vec<f64> = fit_rows
            .iter()
            .map(|r| (r.ratio_stderr / r.ratio).clamp(1e-6, 10.0))
            .collect();
        Some(weighted_slope(&x, &y, &s))
    } else {
        None
    };
    Ok(FellerTable {
        rows,
        h_distance: h,
        phi_sup,
        replicas,
        slope,
    })
}

/// Penalty parameters and bandwidth of the mollified penalized dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifiedDynamics {
    pub bandwidth: f64,
    pub epsilon: f64,
    pub delta: f64,
}

struct MollifiedStepper {
    coeffs: MollifiedCoefficients,
    dyn_: MollifiedDynamics,
    walls: WallPair,
    prop: HeatPropagator,
    dt: f64,
    inv_dx: f64,
}

impl MollifiedStepper {
    fn new(walls: &WallPair, p: &PenalizedParams, d: &MollifiedDynamics) -> Result<Self> {
        if !(d.epsilon > 0.0 && d.delta > 0.0) {
            return Err(invalid("epsilon", "penalties must be positive"));
        }
        Ok(Self {
            coeffs: MollifiedCoefficients::new(d.bandwidth, p.drift, p.diffusion)?,
            dyn_: *d,
            walls: walls.clone(),
            prop: HeatPropagator::new(walls.grid(), p.dt, p.propagator)?,
            dt: p.dt,
            inv_dx: 1.0 / walls.grid().dx(),
        })
    }

    /// Advances `u` (and, when given, the tangent `x`) by one step.
    fn step(&mut self, u: &mut [f64], dw: &[f64], x: Option<&mut [f64]>, buf: &mut [f64]) {
        let n = u.len();
        if let Some(x) = x {
            for i in 0..n {
                let c = &self.coeffs;
                buf[i] = x[i] + self.dt * c.f_prime(u[i]) * x[i] + c.sigma_prime(u[i]) * x[i] * dw[i] * self.inv_dx;
            }
            self.prop.apply_in_place(buf);
            x.copy_from_slice(buf);
            self.base(u, dw, buf);
            for i in 0..n {
                let (w, slope) = self.solve(i, buf[i]);
                u[i] = w;
                x[i] /= slope;
            }
        } else {
            self.base(u, dw, buf);
            for i in 0..n {
                u[i] = self.solve(i, buf[i]).0;
            }
        }
    }

    fn solve(&self, i: usize, u_star: f64) -> (f64, f64) {
        self.coeffs.penalty_solve(
            u_star,
            self.walls.lower()[i],
            self.walls.upper()[i],
            self.dt,
            self.dyn_.epsilon,
            self.dyn_.delta,
        )
    }

    fn base(&mut self, u: &[f64], dw: &[f64], out: &mut [f64]) {
        for i in 0..u.len() {
            let c = &self.coeffs;
            out[i] = u[i] + self.dt * c.f(u[i]) + c.sigma(u[i]) * dw[i] * self.inv_dx;
        }
        self.prop.apply_in_place(out);
    }
}

/// Mollified penalized trajectory (no tangent); returns the final field.
pub fn mollified_endpoint(
    u0: &Field,
    walls: &WallPair,
    t_end: f64,
    p: &PenalizedParams,
    d: &MollifiedDynamics,
    noise: &dyn NoiseSource,
) -> Result<Field> {
    let steps = step_count(t_end, p.dt)?;
    let mut st = MollifiedStepper::new(walls, p, d)?;
    let n = walls.grid().len();
    let mut u = u0.values().to_vec();
    let mut dw = vec![0.0; n];
    let mut buf = vec![0.0; n];
    for k in 0..steps {
        noise.fill(k as u64, &mut dw);
        st.step(&mut u, &dw, None, &mut buf);
    }
    Ok(Field::from_raw(walls.grid(), u, u0.time() + t_end))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeFlow {
    pub times: Vec<f64>,
    pub base: Vec<Field>,
    pub x: Vec<Field>,
}

impl DerivativeFlow {
    /// `|X(t_k)|_H²` along the path.
    pub fn h_norms_sq(&self) -> Vec<f64> {
        self.x
            .iter()
            .map(|f| f.values().iter().map(|v| v * v).sum::<f64>() * f.grid().dx())
            .collect()
    }
}

/// Tangent of the mollified penalized flow in direction `dir`, on a frozen noise path.
///
/// The tangent recursion is the exact derivative of the discrete map, so finite differences
/// of [`mollified_endpoint`] converge to it.
pub fn derivative_flow(
    u0: &Field,
    dir: &Field,
    walls: &WallPair,
    t_end: f64,
    p: &PenalizedParams,
    d: &MollifiedDynamics,
    noise: &dyn NoiseSource,
) -> Result<DerivativeFlow> {
    let grid = walls.grid();
    grid.check_same(&u0.grid())?;
    grid.check_same(&dir.grid())?;
    grid.check_same(&noise.grid())?;
    if (noise.dt() - p.dt).abs() > 1e-12 * p.dt {
        return Err(Error::Misaligned("noise path does not match the step".into()));
    }
    let steps = step_count(t_end, p.dt)?;
    let mut st = MollifiedStepper::new(walls, p, d)?;
    let n = grid.len();
    let mut u = u0.values().to_vec();
    let mut x = dir.values().to_vec();
    let mut dw = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let t0 = u0.time();
    let mut flow = DerivativeFlow {
        times: vec![t0],
        base: vec![u0.clone()],
        x: vec![dir.clone().with_time(t0)],
    };
    for k in 0..steps {
        noise.fill(k as u64, &mut dw);
        st.step(&mut u, &dw, Some(&mut x), &mut buf);
        if x.iter().chain(&u).any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                step: k + 1,
                time: t0 + (k + 1) as f64 * p.dt,
            });
        }
        let t = t0 + (k + 1) as f64 * p.dt;
        flow.times.push(t);
        flow.base.push(Field::from_raw(grid, u.clone(), t));
        flow.x.push(Field::from_raw(grid, x.clone(), t));
    }
    Ok(flow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBound {
    /// `sup_t Ê|X(t)|²_H / |ū0|²_H`.
    pub sup_ratio: f64,
    pub sup_ratio_stderr: f64,
    pub replicas: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn derivative_flow_bound(
    u0: &Field,
    dir: &Field,
    walls: &WallPair,
    t_end: f64,
    p: &PenalizedParams,
    d: &MollifiedDynamics,
    master_seed: u64,
    replicas: u64,
) -> Result<DerivativeBound> {
    let grid = walls.grid();
    let dir_sq = dir.values().iter().map(|v| v * v).sum::<f64>() * grid.dx();
    if dir_sq == 0.0 {
        return Ok(DerivativeBound {
            sup_ratio: 0.0,
            sup_ratio_stderr: 0.0,
            replicas,
        });
    }
    let norms = try_map_replicas(replicas, |r| {
        let noise = SheetNoise::new(grid, p.dt, SeedSpec::new(master_seed, r, StreamTag::W1))?;
        Ok(derivative_flow(u0, dir, walls, t_end, p, d, &noise)?.h_norms_sq())
    })?;
    let steps = norms[0].len();
    let mut best = MeanEstimate {
        mean: 0.0,
        stderr: 0.0,
        count: 0,
    };
    for k in 0..steps {
        let xs: Vec<f64> = norms.iter().map(|v| v[k] / dir_sq).collect();
        let m = mean_estimate(&xs);
        if m.mean > best.mean {
            best = m;
        }
    }
    Ok(DerivativeBound {
        sup_ratio: best.mean,
        sup_ratio_stderr: best.stderr,
        replicas,
    })
}

/// Zero noise on a grid, for deterministic derivative checks.
pub fn silent(grid: CircleGrid, dt: f64) -> crate::noise::Silent {
    crate::noise::Silent { grid, dt }
}

/// Exposes the increments of a source as a vector (handy for replaying a frozen path).
pub fn collect_increments(noise: &dyn NoiseSource, steps: usize) -> Vec<NoiseIncrement> {
    (0..steps as u64).map(|k| noise.increment(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::ScalarFn;

    fn setup(n: usize) -> (CircleGrid, WallPair) {
        let g = CircleGrid::new(n).unwrap();
        (g, WallPair::constant(g, -1.0, 1.0).unwrap())
    }

    #[test]
    fn deterministic_fixed_point_occupation() {
        let (g, walls) = setup(8);
        let p = PenalizedParams::projected(0.01, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let occ = occupation_measure(&Field::zeros(g), &walls, 1.0, 0.5, 0.1, &Observable::defaults(g), &p, 1, 4)
            .unwrap();
        for c in &occ.cdfs {
            assert!(c.samples().iter().all(|&x| x == 0.0));
            assert_eq!(c.len(), 4 * 6);
        }
    }

    #[test]
    fn constant_observable_has_zero_ratio() {
        let (g, walls) = setup(8);
        let p = PenalizedParams::projected(0.01, ScalarFn::Zero, ScalarFn::constant(1.0)).unwrap();
        let t = strong_feller_probe(
            Observable::Constant { value: 2.0 },
            &Field::constant(g, 0.2),
            &Field::constant(g, -0.2),
            &[0.1, 0.5],
            8,
            &walls,
            &p,
            3,
        )
        .unwrap();
        assert!(t.rows.iter().all(|r| r.ratio == 0.0));
        assert!(strong_feller_probe(Observable::Mean, &Field::zeros(g), &Field::constant(g, 0.1), &[0.1], 2, &walls, &p, 1).is_err());
        assert!(strong_feller_probe(Observable::SinMean, &Field::zeros(g), &Field::zeros(g), &[0.1], 2, &walls, &p, 1).is_err());
    }

    #[test]
    fn zero_direction_gives_zero_tangent() {
        let (g, walls) = setup(16);
        let p = PenalizedParams::projected(1e-3, ScalarFn::Zero, ScalarFn::constant(1.0)).unwrap();
        let d = MollifiedDynamics {
            bandwidth: 50.0,
            epsilon: 1e-2,
            delta: 1e-2,
        };
        let noise = SheetNoise::new(g, 1e-3, SeedSpec::new(1, 0, StreamTag::W1)).unwrap();
        let flow = derivative_flow(&Field::zeros(g), &Field::zeros(g), &walls, 0.1, &p, &d, &noise).unwrap();
        assert!(flow.x.iter().all(|f| f.sup_abs() == 0.0));
    }

    #[test]
    fn lp_moment_of_constant_sample() {
        assert!((lp_moment(&[2.0; 10], 0.04) - 2.0).abs() < 1e-12);
        assert_eq!(lp_moment(&[0.0; 3], 0.1), 0.0);
    }

    #[test]
    fn tightness_rejects_bad_exponent() {
        let (g, walls) = setup(8);
        let p = PenalizedParams::projected(0.01, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let gl = vec![("zero".to_string(), Field::zeros(g))];
        assert!(tightness_stats(&gl, 0.4, 0.1, 2, &walls, &p, 1, 1).is_err());
        assert!(tightness_stats(&gl, 0.1, 0.1, 2, &walls, &p, 1, 1).is_err());
        let rep = tightness_stats(&gl, 0.24, 0.04, 2, &walls, &p, 1, 1).unwrap();
        assert_eq!(rep.rows[0].moment, 0.0);
    }
}
