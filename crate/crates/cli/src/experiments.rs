//! Subcommand bodies.

use std::f64::consts::TAU;

use spde_reflect::coupling::{coupling_ensemble, qv_lower_bound_check, run_coupled_ordered, CoupledOptions};
use spde_reflect::ergodics::{
    burn_in_stability, coupled_gap_probability, derivative_flow, derivative_flow_bound, mollified_endpoint,
    strong_feller_probe, tightness_stats, two_chain_tv_proxy, Observable,
};
use spde_reflect::heat::{apply_semigroup, KernelEval, KernelRepr};
use spde_reflect::noise::sample_increment;
use spde_reflect::obstacle::{continuity_composition_check, lipschitz_probe};
use spde_reflect::reflected::{
    convergence_sweep, run_reflected, run_reflected_with, sandwich_check, Orientation, RunOptions,
};
use spde_reflect::replicas::map_replicas;
use spde_reflect::{CircleGrid, Field, Scheme, SeedSpec, SheetNoise, StreamTag};

use crate::config::ExperimentConfig;
use crate::{num, Check, CliError, Command, Outputs, ReplicaFailure, RunSummary};

pub(crate) fn run(cmd: Command, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunSummary, CliError> {
    match cmd {
        Command::KernelCheck => kernel_check(cfg, out),
        Command::Simulate => simulate(cfg, out),
        Command::SweepPenalization => sweep(cfg, out),
        Command::ObstacleCheck => obstacle(cfg, out),
        Command::Couple => couple(cfg, out),
        Command::Ergodic => ergodic(cfg, out),
        Command::StrongFeller => strong_feller(cfg, out),
    }
}

fn seed(cfg: &ExperimentConfig, replica: u64) -> SeedSpec {
    SeedSpec::new(cfg.master_seed, replica, StreamTag::W1)
}

fn trapezoid(m: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = TAU / m as f64;
    (0..m).map(|j| f(j as f64 * h)).sum::<f64>() * h
}

pub const KERNEL_TIMES: [f64; 3] = [0.01, 0.1, 1.0];

fn kernel_check(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunSummary, CliError> {
    let grid = cfg.grid()?;
    let probe = Field::from_fn(grid, |x| x.cos() + 0.5 * (3.0 * x).sin() + 0.25 * (7.0 * x).cos() + 0.1);
    let mut rows = Vec::new();
    let (mut mass_max, mut gap_max, mut semi_max) = (0.0f64, 0.0f64, 0.0f64);
    for &t in &KERNEL_TIMES {
        let auto = KernelEval::new(t, None)?;
        let mass = (trapezoid(4096, |y| auto.value(0.7, y)) - 1.0).abs();
        let spec = KernelEval::new(t, Some(KernelRepr::Spectral))?;
        let img = KernelEval::new(t, Some(KernelRepr::Image))?;
        let gap = (0..64)
            .map(|j| {
                let x = j as f64 * TAU / 64.0;
                (spec.value(x, 0.3) - img.value(x, 0.3)).abs()
            })
            .fold(0.0, f64::max);
        let twice = apply_semigroup(&apply_semigroup(&probe, t)?, t)?;
        let once = apply_semigroup(&probe, 2.0 * t)?;
        let semi = twice.sup_distance(&once)?;
        mass_max = mass_max.max(mass);
        gap_max = gap_max.max(gap);
        semi_max = semi_max.max(semi);
        rows.push(vec![num(t), num(mass), num(gap), num(semi)]);
    }
    out.csv("kernel_check.csv", &["t", "mass_error", "repr_gap", "semigroup_error"], rows)?;
    Ok(RunSummary {
        checks: vec![
            Check::at_most("mass_error", mass_max, 1e-10),
            Check::at_most("repr_gap", gap_max, 1e-10),
            Check::at_most("semigroup_error", semi_max, 1e-12),
        ],
        failed: vec![],
    })
}

fn simulate(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunSummary, CliError> {
    let walls = cfg.walls()?;
    let u0 = cfg.initial.build(&walls);
    let p = cfg.params()?;
    let grid = walls.grid();
    let results = map_replicas(cfg.replicas, |r| {
        let noise = SheetNoise::new(grid, p.dt, seed(cfg, r))?;
        let opts = RunOptions {
            stride: cfg.record_stride,
            check_initial: true,
        };
        run_reflected_with(&u0, &walls, cfg.t_end, &p, &noise, opts)
    });
    let mut failed = Vec::new();
    let mut summary = Vec::new();
    let mut worst = 0.0f64;
    for (r, res) in results.iter().enumerate() {
        match res {
            Ok(rec) => {
                worst = worst.max(rec.max_wall_violation());
                summary.push(vec![
                    r.to_string(),
                    "ok".into(),
                    num(rec.measures.eta_total()),
                    num(rec.measures.xi_total()),
                    num(rec.max_wall_violation()),
                    num(rec.final_field().mean()),
                ]);
            }
            Err(e) => {
                failed.push(ReplicaFailure {
                    replica: r as u64,
                    error: e.to_string(),
                });
                summary.push(vec![r.to_string(), "aborted".into(), String::new(), String::new(), String::new(), String::new()]);
            }
        }
    }
    if let Some(Ok(rec)) = results.first() {
        let mut rows = Vec::new();
        for (k, f) in rec.fields.iter().enumerate() {
            for (i, &u) in f.values().iter().enumerate() {
                let (eta, xi) = if k == 0 {
                    (0.0, 0.0)
                } else {
                    (rec.measures.eta[k - 1][i], rec.measures.xi[k - 1][i])
                };
                rows.push(vec![num(rec.times[k]), i.to_string(), num(u), num(eta), num(xi)]);
            }
        }
        out.csv("trajectory.csv", &["t", "node", "u", "eta_mass", "xi_mass"], rows)?;
    }
    out.csv(
        "replicas.csv",
        &["replica", "status", "eta_total", "xi_total", "max_wall_violation", "final_mean"],
        summary,
    )?;
    let mut checks = Vec::new();
    if cfg.scheme == Scheme::Projected {
        checks.push(Check::at_most("max_wall_violation", worst, 0.0));
    }
    Ok(RunSummary { checks, failed })
}

fn orientation_name(o: Orientation) -> &'static str {
    match o {
        Orientation::IncreasingAsParamDecreases => "increasing_as_param_decreases",
        Orientation::DecreasingAsParamDecreases => "decreasing_as_param_decreases",
        Orientation::Equal => "equal",
        Orientation::Unordered => "unordered",
    }
}

fn sweep(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunSummary, CliError> {
    let walls = cfg.walls()?;
    let u0 = cfg.initial.build(&walls);
    let base = cfg.params()?.with_penalties(cfg.sweep.start, cfg.sweep.start);
    let seeds = seed(cfg, 0);
    let table = convergence_sweep(&u0, &walls, cfg.t_end, &base, cfg.sweep.levels, seeds)?;
    let mut sandwich_rows = Vec::new();
    let mut sandwich_max = 0.0f64;
    for lvl in &table.levels {
        let p = base.with_scheme(Scheme::Penalized).with_penalties(lvl.epsilon, lvl.delta);
        let rec = run_reflected(&u0, &walls, cfg.t_end, &p, seeds)?;
        let rep = sandwich_check(&rec, seeds)?;
        sandwich_max = sandwich_max.max(rep.max_violation());
        sandwich_rows.push(vec![
            lvl.level.to_string(),
            num(lvl.epsilon),
            num(lvl.delta),
            num(rep.lower_violation),
            num(rep.upper_violation),
        ]);
    }
    out.csv(
        "sweep.csv",
        &["level", "epsilon", "delta", "sup_distance", "max_wall_violation"],
        table.levels.iter().map(|l| {
            vec![l.level.to_string(), num(l.epsilon), num(l.delta), num(l.sup_distance), num(l.max_wall_violation)]
        }),
    )?;
    out.csv(
        "sandwich.csv",
        &["level", "epsilon", "delta", "lower_violation", "upper_violation"],
        sandwich_rows,
    )?;
    let mut orient_rows = Vec::new();
    let mut delta_bad = 0.0f64;
    let mut delta_kinds = Vec::new();
    for (family, list) in [("delta", &table.delta_orientation), ("epsilon", &table.epsilon_orientation)] {
        for (j, (o, v)) in list.iter().enumerate() {
            orient_rows.push(vec![family.to_string(), j.to_string(), orientation_name(*o).into(), num(*v)]);
            if family == "delta" {
                delta_kinds.push(*o);
                if *o == Orientation::Unordered {
                    delta_bad = delta_bad.max(*v);
                }
            }
        }
    }
    out.csv("orientation.csv", &["family", "step", "orientation", "violation"], orient_rows)?;
    let d = table.distances();
    let one_way = delta_kinds.iter().all(|o| *o != Orientation::DecreasingAsParamDecreases)
        || delta_kinds.iter().all(|o| *o != Orientation::IncreasingAsParamDecreases);
    Ok(RunSummary {
        checks: vec![
            Check::flag("sweep_nonincreasing", table.is_nonincreasing(0.0)),
            Check::at_most("final_sup_distance", *d.last().unwrap(), 0.05),
            Check::at_most("sandwich_violation", sandwich_max, 5.0 * cfg.dt.sqrt()),
            Check::at_most("delta_monotonicity_violation", delta_bad, 1e-8),
            Check::flag("delta_family_one_direction", one_way),
        ],
        failed: vec![],
    })
}

/// Random-walk forcing path with terminal standard deviation `scale` at every node.
fn random_forcing(grid: CircleGrid, dt: f64, steps: usize, s: SeedSpec, scale: f64) -> Result<Vec<Field>, CliError> {
    let mut v = vec![0.0; grid.len()];
    let mut path = vec![Field::new(grid, v.clone(), 0.0)?];
    let unit = 1.0 / (grid.dx() * dt).sqrt() * scale / (steps as f64).sqrt();
    for k in 0..steps {
        let inc = sample_increment(grid, dt, s, k as u64)?;
        for (a, w) in v.iter_mut().zip(inc.values()) {
            *a += w * unit;
        }
        path.push(Field::new(grid, v.clone(), (k + 1) as f64 * dt)?);
    }
    Ok(path)
}

pub const OBSTACLE_PAIR_KINDS: [&str; 4] = ["independent", "perturbed", "mirrored", "shifted"];

fn obstacle(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunSummary, CliError> {
    let walls = cfg.walls()?;
    let grid = walls.grid();
    let g = cfg.initial.build(&walls);
    let p = cfg.params()?;
    let steps = cfg.obstacle.steps;
    let ratios = map_replicas(cfg.obstacle.pairs, |j| {
        let s1 = SeedSpec::new(cfg.master_seed, j, StreamTag::W1);
        let v1 = random_forcing(grid, cfg.dt, steps, s1, 3.0).map_err(core_only)?;
        let kind = (j % 4) as usize;
        let v2: Vec<Field> = match kind {
            0 => random_forcing(grid, cfg.dt, steps, s1.with_stream(StreamTag::W2), 3.0).map_err(core_only)?,
            1 => {
                let d = random_forcing(grid, cfg.dt, steps, s1.with_stream(StreamTag::W2), 0.1).map_err(core_only)?;
                v1.iter().zip(&d).map(|(a, b)| a.zip_with(b, |x, y| x + y)).collect::<Result<_, _>>()?
            }
            // pushes one path into the upper wall while the other hits the lower one
            2 => v1.iter().map(|a| a.scaled(-1.0)).collect(),
            _ => v1
                .iter()
                .enumerate()
                .map(|(k, a)| a.zip_with(a, |x, _| if k == 0 { x } else { x + 2.5 }))
                .collect::<Result<_, _>>()?,
        };
        Ok((kind, lipschitz_probe(&v1, &v2, &g, &walls, cfg.dt, p.propagator)?))
    });
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (j, r) in ratios.into_iter().enumerate() {
        let (kind, ratio) = r?;
        worst = worst.max(ratio);
        rows.push(vec![j.to_string(), OBSTACLE_PAIR_KINDS[kind].into(), num(ratio)]);
    }
    out.csv("lipschitz.csv", &["pair", "kind", "ratio"], rows)?;
    let reps = cfg.replicas.min(16);
    let comps: Vec<_> = map_replicas(reps, |r| continuity_composition_check(&g, &walls, cfg.t_end, &p, seed(cfg, r)))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let comp_worst = comps.iter().map(|c| c.sup_distance - c.tolerance).fold(f64::NEG_INFINITY, f64::max);
    out.csv(
        "composition.csv",
        &["replica", "sup_distance", "tolerance"],
        comps
            .iter()
            .enumerate()
            .map(|(r, c)| vec![r.to_string(), num(c.sup_distance), num(c.tolerance)]),
    )?;
    Ok(RunSummary {
        checks: vec![
            Check::at_most("lipschitz_ratio", worst, 2.0 + 1e-6),
            Check::at_most("composition_excess", comp_worst, 0.0),
        ],
        failed: vec![],
    })
}

fn core_only(e: CliError) -> spde_reflect::Error {
    match e {
        CliError::Core(c) => c,
        other => spde_reflect::Error::InsufficientData(other.to_string()),
    }
}

/// Checkpoints at every whole time unit up to the last horizon, plus the horizons themselves.
fn coupling_checkpoints(horizons: &[f64]) -> Vec<f64> {
    let last = horizons.iter().copied().fold(0.0, f64::max);
    let mut v: Vec<f64> = (1..=last.floor() as usize).map(|k| k as f64).collect();
    v.extend_from_slice(horizons);
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    v
}

fn couple(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunSummary, CliError> {
    let walls = cfg.walls()?;
    let grid = walls.grid();
    let p = cfg.params()?;
    let cc = cfg.coupling.config();
    let upper = Field::constant(grid, cfg.coupling.upper);
    let lower = Field::constant(grid, cfg.coupling.lower);
    let horizons = &cfg.coupling.horizons;
    let mut checks = Vec::new();
    if cfg.coupling.upper < cfg.coupling.lower {
        let apart = coupled_gap_probability(&upper, &lower, &walls, horizons, &cc, &p, cfg.master_seed, cfg.replicas)?;
        out.csv(
            "coupling.csv",
            &["horizon", "probability", "stderr"],
            horizons
                .iter()
                .zip(&apart)
                .map(|(t, a)| vec![num(*t), num(1.0 - a.mean), num(a.stderr)]),
        )?;
        return Ok(RunSummary { checks, failed: vec![] });
    }
    let checkpoints = coupling_checkpoints(horizons);
    let ens = coupling_ensemble(&upper, &lower, &walls, &checkpoints, &cc, &p, cfg.master_seed, cfg.replicas)?;
    let probs: Vec<_> = horizons.iter().map(|&t| ens.probability_by(t)).collect();
    out.csv(
        "coupling.csv",
        &["horizon", "probability", "stderr"],
        horizons
            .iter()
            .zip(&probs)
            .map(|(t, e)| vec![num(*t), num(e.mean), num(e.stderr)]),
    )?;
    let mean_u = ens.mean_u();
    out.csv(
        "mean_u.csv",
        &["t", "mean_U", "stderr"],
        checkpoints
            .iter()
            .zip(&mean_u)
            .map(|(t, e)| vec![num(*t), num(e.mean), num(e.stderr)]),
    )?;
    let (_, diag) = run_coupled_ordered(
        &upper,
        &lower,
        &walls,
        horizons.iter().copied().fold(0.0, f64::max),
        &cc,
        &p,
        seed(cfg, 0),
        CoupledOptions {
            diag_stride: cfg.record_stride,
            path_stride: None,
        },
    )?;
    out.csv(
        "diagnostics.csv",
        &["t", "U", "M", "QV", "sup_gap"],
        diag.rows
            .iter()
            .map(|r| vec![num(r.t), num(r.u), num(r.m), num(r.qv), num(r.sup_gap)]),
    )?;
    let qv_t = horizons.iter().copied().fold(f64::INFINITY, f64::min);
    let qv_diags: Vec<_> = map_replicas(cfg.coupling.qv_replicas.min(cfg.replicas), |r| {
        run_coupled_ordered(&upper, &lower, &walls, qv_t, &cc, &p, seed(cfg, r), CoupledOptions {
            diag_stride: 1,
            path_stride: None,
        })
        .map(|x| x.1)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let qv = qv_lower_bound_check(&qv_diags, cfg.coupling.c0_est)?;
    out.csv(
        "qv.csv",
        &["steps_used", "qv_p01", "qv_median", "bracket_p01", "bracket_median", "c0_est"],
        [vec![
            qv.steps_used.to_string(),
            num(qv.qv_p01),
            num(qv.qv_median),
            num(qv.bracket_p01),
            num(qv.bracket_median),
            num(qv.c0_est),
        ]],
    )?;
    let increasing = probs.windows(2).all(|w| w[1].mean > w[0].mean);
    let u_monotone = mean_u
        .windows(2)
        .all(|w| w[1].mean <= w[0].mean + 2.0 * w[0].stderr.hypot(w[1].stderr));
    checks.push(Check::at_least("min_gap", ens.min_gap(), -spde_reflect::coupling::ORDER_TOL));
    checks.push(Check::flag("mean_u_nonincreasing", u_monotone));
    checks.push(Check::flag("qv_p01_positive", qv.passed()));
    checks.push(Check::flag("coupling_probability_increasing", increasing));
    checks.push(Check::at_least("coupling_probability_last", probs.last().unwrap().mean, 0.5));
    Ok(RunSummary { checks, failed: vec![] })
}

fn ergodic(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunSummary, CliError> {
    let walls = cfg.walls()?;
    let grid = walls.grid();
    let p = cfg.params()?;
    let e = &cfg.ergodic;
    let obs = Observable::defaults(grid);
    let a = Field::constant(grid, e.start_a);
    let b = Field::constant(grid, e.start_b);
    let tv = two_chain_tv_proxy(&a, &b, &walls, &e.tv_times, cfg.replicas, &obs, &p, &cfg.coupling.config(), cfg.master_seed)?;
    let mut rows = Vec::new();
    for row in &tv {
        for (o, ks) in obs.iter().zip(&row.ks) {
            rows.push(vec![
                num(row.t),
                o.to_string(),
                num(*ks),
                num(row.ks_null_band),
                num(row.gap_probability.mean),
                num(row.gap_probability.stderr),
            ]);
        }
    }
    out.csv("tv.csv", &["t", "observable", "ks", "null_band", "gap_probability", "gap_stderr"], rows)?;
    let u0 = cfg.initial.build(&walls);
    let burn = burn_in_stability(&u0, &walls, e.horizon, e.burn_in, e.sample_stride, &obs, &p, cfg.master_seed, cfg.replicas, 0.01)?;
    out.csv(
        "occupation.csv",
        &["observable", "ks", "null_band"],
        burn.iter().map(|r| vec![r.observable.to_string(), num(r.ks), num(r.null_band)]),
    )?;
    let g_list = vec![
        ("lower_wall".to_string(), walls.lower_field().clone()),
        ("upper_wall".to_string(), walls.upper_field().clone()),
        ("midpoint".to_string(), walls.midpoint()),
    ];
    let tight = tightness_stats(&g_list, e.alpha, e.kappa, cfg.replicas, &walls, &p, cfg.master_seed, e.path_stride)?;
    out.csv(
        "tightness.csv",
        &["initial", "moment", "mean", "stderr", "p99"],
        tight
            .rows
            .iter()
            .map(|r| vec![r.label.clone(), num(r.moment), num(r.mean.mean), num(r.mean.stderr), num(r.p99)]),
    )?;
    let last = tv.last().unwrap();
    let first = tv.first().unwrap();
    let ks_trend = tv.windows(2).all(|w| w[1].ks_max <= w[0].ks_max + 2.0 * w[0].ks_stderr);
    let gap_trend = tv.windows(2).all(|w| {
        w[1].gap_probability.mean
            <= w[0].gap_probability.mean + 2.0 * w[0].gap_probability.stderr.hypot(w[1].gap_probability.stderr)
    });
    Ok(RunSummary {
        checks: vec![
            Check::at_most("ks_max_last", last.ks_max, 0.1),
            Check::flag("ks_nonincreasing", ks_trend),
            Check::flag("gap_probability_nonincreasing", gap_trend),
            Check::at_most("gap_probability_change", last.gap_probability.mean - first.gap_probability.mean, 0.0),
            Check::flag("burn_in_stable", burn.iter().all(|r| r.stable())),
            Check::at_most("tightness_moment_ratio", tight.moment_ratio(), 2.0),
        ],
        failed: vec![],
    })
}

fn strong_feller(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunSummary, CliError> {
    let walls = cfg.walls()?;
    let grid = walls.grid();
    let p = cfg.params()?;
    let f = &cfg.feller;
    let g1 = Field::constant(grid, f.amplitude);
    let g2 = Field::constant(grid, -f.amplitude);
    let table = strong_feller_probe(Observable::SinMean, &g1, &g2, &f.times, cfg.replicas, &walls, &p, cfg.master_seed)?;
    out.csv(
        "feller.csv",
        &["t", "difference", "difference_stderr", "ratio", "ratio_stderr"],
        table.rows.iter().map(|r| {
            vec![num(r.t), num(r.difference), num(r.difference_stderr), num(r.ratio), num(r.ratio_stderr)]
        }),
    )?;
    let d = f.dynamics();
    let u0 = Field::from_fn(grid, |x| 0.5 * x.cos());
    let dir = Field::from_fn(grid, |x| x.sin() + 0.3);
    let t_end = cfg.t_end;
    let bound = derivative_flow_bound(&u0, &dir, &walls, t_end, &p, &d, cfg.master_seed, f.derivative_replicas)?;
    let half = spde_reflect::ergodics::MollifiedDynamics {
        epsilon: d.epsilon / 2.0,
        delta: d.delta / 2.0,
        ..d
    };
    let bound_half = derivative_flow_bound(&u0, &dir, &walls, t_end, &p, &half, cfg.master_seed, f.derivative_replicas)?;
    let noise = SheetNoise::new(grid, p.dt, seed(cfg, 0))?;
    let flow = derivative_flow(&u0, &dir, &walls, t_end, &p, &d, &noise)?;
    let h = f.fd_step;
    let up = mollified_endpoint(&u0.zip_with(&dir, |a, b| a + h * b)?, &walls, t_end, &p, &d, &noise)?;
    let base = mollified_endpoint(&u0, &walls, t_end, &p, &d, &noise)?;
    let fd = up.zip_with(&base, |a, b| (a - b) / h)?;
    let x = flow.x.last().unwrap();
    let fd_rel = fd.sup_distance(x)? / x.sup_abs().max(f64::MIN_POSITIVE);
    out.csv(
        "derivative.csv",
        &["epsilon", "delta", "sup_ratio", "sup_ratio_stderr"],
        [
            vec![num(d.epsilon), num(d.delta), num(bound.sup_ratio), num(bound.sup_ratio_stderr)],
            vec![num(half.epsilon), num(half.delta), num(bound_half.sup_ratio), num(bound_half.sup_ratio_stderr)],
        ],
    )?;
    let slope = table.slope.map_or(f64::NAN, |s| s.slope);
    let slope_limit = 0.1 + table.slope.map_or(0.0, |s| s.stderr);
    Ok(RunSummary {
        checks: vec![
            Check::at_most("feller_log_slope", slope, slope_limit),
            Check::at_most("derivative_fd_relative_error", fd_rel, 0.05),
            Check::flag("derivative_bound_finite", bound.sup_ratio.is_finite() && bound_half.sup_ratio.is_finite()),
        ],
        failed: vec![],
    })
}
