//! The double-obstacle map Φ: forcing path and initial datum to the constrained solution.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Field, WallPair};
use crate::heat::{HeatPropagator, PropagatorKind};
use crate::noise::{NoiseSource, SeedSpec, SheetNoise};
use crate::reflected::{run_reflected_with, PenalizedParams, ReflectionMeasures, RunOptions, Scheme, WALL_TOL};

/// Forcing path `v(t_k)` (with `v(t_0)` normally zero), initial datum and walls.
#[derive(Debug, Clone)]
pub struct ObstacleProblem {
    pub forcing: Vec<Field>,
    pub initial: Field,
    pub walls: WallPair,
    pub dt: f64,
    pub propagator: PropagatorKind,
}

impl ObstacleProblem {
    pub fn new(forcing: Vec<Field>, initial: Field, walls: WallPair, dt: f64) -> Result<Self> {
        let prob = Self {
            forcing,
            initial,
            walls,
            dt,
            propagator: PropagatorKind::default(),
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn with_propagator(mut self, kind: PropagatorKind) -> Self {
        self.propagator = kind;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.forcing.is_empty() {
            return Err(Error::EmptyPath);
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        let grid = self.walls.grid();
        grid.check_same(&self.initial.grid())?;
        for f in &self.forcing {
            grid.check_same(&f.grid())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleSolution {
    pub path: Vec<Field>,
    pub measures: ReflectionMeasures,
    initial: Field,
    dt: f64,
    propagator: PropagatorKind,
}

impl ObstacleSolution {
    /// `ū(t_k) = u(t_k) - S_{t_k} g`.
    pub fn bar(&self) -> Result<Vec<Field>> {
        let mut prop = HeatPropagator::new(self.initial.grid(), self.dt, self.propagator)?;
        let mut flow = self.initial.values().to_vec();
        let mut out = Vec::with_capacity(self.path.len());
        for (k, u) in self.path.iter().enumerate() {
            if k > 0 {
                prop.apply_in_place(&mut flow);
            }
            let vals = u.values().iter().zip(&flow).map(|(a, b)| a - b).collect();
            out.push(Field::from_raw(u.grid(), vals, u.time()));
        }
        Ok(out)
    }
}

/// `u_0 = g`, `u_{k+1} = clip(S_dt u_k + v_{k+1} - S_dt v_k, h1, h2)`.
pub fn solve_obstacle(prob: &ObstacleProblem) -> Result<ObstacleSolution> {
    prob.validate()?;
    prob.walls.check_contains(&prob.initial, WALL_TOL)?;
    let grid = prob.walls.grid();
    let n = grid.len();
    let dx = grid.dx();
    let lo = prob.walls.lower();
    let hi = prob.walls.upper();
    let mut prop = HeatPropagator::new(grid, prob.dt, prob.propagator)?;
    let mut u = prob.initial.values().to_vec();
    let mut sv = vec![0.0; n];
    let mut path = Vec::with_capacity(prob.forcing.len());
    let mut measures = ReflectionMeasures::default();
    path.push(prob.initial.clone());
    for k in 0..prob.forcing.len() - 1 {
        prop.apply_in_place(&mut u);
        sv.copy_from_slice(prob.forcing[k].values());
        prop.apply_in_place(&mut sv);
        let next = prob.forcing[k + 1].values();
        let mut eta = vec![0.0; n];
        let mut xi = vec![0.0; n];
        for i in 0..n {
            let free = u[i] + next[i] - sv[i];
            let c = free.clamp(lo[i], hi[i]);
            eta[i] = (c - free).max(0.0) * dx;
            xi[i] = (free - c).max(0.0) * dx;
            u[i] = c;
        }
        path.push(Field::from_raw(grid, u.clone(), prob.forcing[k + 1].time()));
        measures.eta.push(eta);
        measures.xi.push(xi);
    }
    Ok(ObstacleSolution {
        path,
        measures,
        initial: prob.initial.clone(),
        dt: prob.dt,
        propagator: prob.propagator,
    })
}

fn path_sup_distance(a: &[Field], b: &[Field]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Misaligned(format!("{} vs {} slices", a.len(), b.len())));
    }
    let mut m = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        m = m.max(x.sup_distance(y)?);
    }
    Ok(m)
}

/// `‖Φ(v1) - Φ(v2)‖_∞ / ‖v1 - v2‖_∞` over the given window; zero when `v1 = v2`.
pub fn lipschitz_probe(
    v1: &[Field],
    v2: &[Field],
    g: &Field,
    walls: &WallPair,
    dt: f64,
    propagator: PropagatorKind,
) -> Result<f64> {
    let denom = path_sup_distance(v1, v2)?;
    if denom == 0.0 {
        return Ok(0.0);
    }
    let a = solve_obstacle(
        &ObstacleProblem::new(v1.to_vec(), g.clone(), walls.clone(), dt)?.with_propagator(propagator),
    )?;
    let b = solve_obstacle(
        &ObstacleProblem::new(v2.to_vec(), g.clone(), walls.clone(), dt)?.with_propagator(propagator),
    )?;
    Ok(path_sup_distance(&a.path, &b.path)? / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub sup_distance: f64,
    pub tolerance: f64,
    pub dt: f64,
}

impl CompositionReport {
    pub fn passed(&self) -> bool {
        self.sup_distance <= self.tolerance
    }
}

/// Runs the projected scheme, rebuilds the forcing path
/// `v_{k+1} = S_dt(v_k + dt·f(u_k) + σ(u_k) ⊙ ΔW_k / dx)`, `v_0 = 0`, from the realized
/// `u`, and compares `Φ(v)` (started from `g`) with `u`.
pub fn continuity_composition_check(
    g: &Field,
    walls: &WallPair,
    t_end: f64,
    params: &PenalizedParams,
    noise: SeedSpec,
) -> Result<CompositionReport> {
    let source = SheetNoise::new(walls.grid(), params.dt, noise)?;
    continuity_composition_with(g, walls, t_end, params, &source)
}

pub fn continuity_composition_with(
    g: &Field,
    walls: &WallPair,
    t_end: f64,
    params: &PenalizedParams,
    noise: &dyn NoiseSource,
) -> Result<CompositionReport> {
    let p = params.with_scheme(Scheme::Projected);
    let rec = run_reflected_with(g, walls, t_end, &p, noise, RunOptions::default())?;
    let grid = walls.grid();
    let n = grid.len();
    let inv_dx = 1.0 / grid.dx();
    let mut prop = HeatPropagator::new(grid, p.dt, p.propagator)?;
    let mut v = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut forcing = Vec::with_capacity(rec.fields.len());
    forcing.push(Field::from_raw(grid, v.clone(), rec.times[0]));
    for k in 0..rec.fields.len() - 1 {
        let u = rec.fields[k].values();
        noise.fill(k as u64, &mut dw);
        for i in 0..n {
            v[i] += p.dt * p.drift.eval(u[i]) + p.diffusion.eval(u[i]) * dw[i] * inv_dx;
        }
        prop.apply_in_place(&mut v);
        forcing.push(Field::from_raw(grid, v.clone(), rec.times[k + 1]));
    }
    let sol = solve_obstacle(
        &ObstacleProblem::new(forcing, g.clone(), walls.clone(), p.dt)?.with_propagator(p.propagator),
    )?;
    Ok(CompositionReport {
        sup_distance: path_sup_distance(&sol.path, &rec.fields)?,
        tolerance: 5.0 * p.dt.sqrt(),
        dt: p.dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::ScalarFn;
    use crate::grid::CircleGrid;
    use crate::noise::StreamTag;

    #[test]
    fn zero_forcing_is_heat_flow() {
        let g = CircleGrid::new(16).unwrap();
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let forcing = vec![Field::zeros(g); 21];
        let init = Field::from_fn(g, |x| 0.5 * x.cos());
        let sol = solve_obstacle(&ObstacleProblem::new(forcing, init.clone(), walls, 0.01).unwrap()).unwrap();
        assert_eq!(sol.measures.eta_total() + sol.measures.xi_total(), 0.0);
        let flow = crate::heat::apply_semigroup_with(&init, 0.2, PropagatorKind::Lattice).unwrap();
        assert!(sol.path[20].sup_distance(&flow).unwrap() < 1e-13);
        assert!(sol.bar().unwrap().iter().all(|f| f.sup_abs() < 1e-13));
    }

    #[test]
    fn constant_push_pins_to_upper_wall() {
        let g = CircleGrid::new(4).unwrap();
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let mut forcing = vec![Field::constant(g, 2.0); 4];
        forcing[0] = Field::zeros(g);
        let sol = solve_obstacle(&ObstacleProblem::new(forcing, Field::zeros(g), walls, 0.1).unwrap()).unwrap();
        for f in &sol.path[1..] {
            assert!(f.values().iter().all(|&v| v == 1.0));
        }
        // first step: free state 0 + 2 - 0 = 2, pushed down by 1 at each node
        assert!((sol.measures.xi[0][0] - g.dx()).abs() < 1e-15);
        assert_eq!(sol.measures.eta_total(), 0.0);
    }

    #[test]
    fn shift_has_unit_ratio() {
        let g = CircleGrid::new(16).unwrap();
        let walls = WallPair::constant(g, -100.0, 100.0).unwrap();
        let v1: Vec<Field> = (0..11).map(|k| Field::from_fn(g, |x| (x + k as f64).sin())).collect();
        // a constant shift after time 0 moves the solution by the same constant
        let mut v2: Vec<Field> = v1.iter().map(|f| f.zip_with(f, |a, _| a + 0.3).unwrap()).collect();
        v2[0] = v1[0].clone();
        let r = lipschitz_probe(&v1, &v2, &Field::zeros(g), &walls, 0.01, PropagatorKind::Lattice).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "{r}");
        let same = lipschitz_probe(&v1, &v1, &Field::zeros(g), &walls, 0.01, PropagatorKind::Lattice).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn composition_trivial() {
        let g = CircleGrid::new(16).unwrap();
        let walls = WallPair::constant(g, -1.0, 1.0).unwrap();
        let p = PenalizedParams::projected(1e-3, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let init = Field::from_fn(g, |x| 0.9 * x.cos());
        let rep = continuity_composition_check(&init, &walls, 0.1, &p, SeedSpec::new(1, 0, StreamTag::W1)).unwrap();
        assert_eq!(rep.sup_distance, 0.0);
    }
}
