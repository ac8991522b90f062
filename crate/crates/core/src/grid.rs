//! Periodic grid on the circle `ℝ mod 2π`, nodal fields, wall pairs and the
//! norms used throughout the crate.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniform periodic discretisation of the circle with nodes `x_i = i·dx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct CircleGrid {
    n_x: usize,
}

impl CircleGrid {
    pub const MIN_NODES: usize = 4;

    pub fn new(n_x: usize) -> Result<Self> {
        if n_x < Self::MIN_NODES {
            return Err(invalid("n_x", format!("need at least 4 nodes, got {n_x}")));
        }
        Ok(Self { n_x })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_x
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        TAU / self.n_x as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_x).map(|i| self.node(i))
    }

    /// Periodic index arithmetic.
    #[inline]
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.n_x as isize) as usize
    }

    pub fn check_same(&self, other: &CircleGrid) -> Result<()> {
        if self.n_x != other.n_x {
            return Err(Error::GridMismatch {
                left: self.n_x,
                right: other.n_x,
            });
        }
        Ok(())
    }
}

impl TryFrom<usize> for CircleGrid {
    type Error = Error;
    fn try_from(n_x: usize) -> Result<Self> {
        CircleGrid::new(n_x)
    }
}

impl From<CircleGrid> for usize {
    fn from(g: CircleGrid) -> usize {
        g.n_x
    }
}

/// Nodal values of a function on the circle at a given time.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: CircleGrid,
    values: Vec<f64>,
    time: f64,
}

impl Field {
    pub fn new(grid: CircleGrid, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch {
                left: grid.len(),
                right: values.len(),
            });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node });
        }
        if !(time >= 0.0 && time.is_finite()) {
            return Err(invalid("time", format!("must be finite and nonnegative, got {time}")));
        }
        Ok(Self { grid, values, time })
    }

    pub fn zeros(grid: CircleGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: CircleGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
            time: 0.0,
        }
    }

    /// Samples `f` at the grid nodes.
    pub fn from_fn(grid: CircleGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            values: grid.nodes().map(f).collect(),
            time: 0.0,
        }
    }

    pub(crate) fn from_raw(grid: CircleGrid, values: Vec<f64>, time: f64) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values, time }
    }

    #[inline]
    pub fn grid(&self) -> CircleGrid {
        self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn set_time(&mut self, time: f64) {
        self.time = time;
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `sup_i |a_i - b_i|`.
    pub fn sup_distance(&self, other: &Field) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `|f|_H`, the discrete `L²(S¹)` norm.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.dx()).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field::from_raw(self.grid, self.values.iter().map(|v| c * v).collect(), self.time)
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Field::from_raw(self.grid, values, self.time))
    }
}

/// Lower and upper obstacles `h¹ < h²` sampled at the nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct WallPair {
    lower: Field,
    upper: Field,
}

impl WallPair {
    pub fn new(lower: Field, upper: Field) -> Result<Self> {
        lower.grid().check_same(&upper.grid())?;
        for (i, (l, u)) in lower.values().iter().zip(upper.values()).enumerate() {
            if l >= u {
                return Err(invalid(
                    "walls",
                    format!("walls must be strictly ordered, node {i} has h1 = {l} >= h2 = {u}"),
                ));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn constant(grid: CircleGrid, lower: f64, upper: f64) -> Result<Self> {
        Self::new(Field::constant(grid, lower), Field::constant(grid, upper))
    }

    pub fn from_fns(
        grid: CircleGrid,
        lower: impl Fn(f64) -> f64,
        upper: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        Self::new(Field::from_fn(grid, lower), Field::from_fn(grid, upper))
    }

    #[inline]
    pub fn grid(&self) -> CircleGrid {
        self.lower.grid()
    }

    #[inline]
    pub fn lower(&self) -> &[f64] {
        self.lower.values()
    }

    #[inline]
    pub fn upper(&self) -> &[f64] {
        self.upper.values()
    }

    pub fn lower_field(&self) -> &Field {
        &self.lower
    }

    pub fn upper_field(&self) -> &Field {
        &self.upper
    }

    /// Largest wall magnitude, `max(|h¹|, |h²|)`.
    pub fn magnitude(&self) -> f64 {
        self.lower.sup_abs().max(self.upper.sup_abs())
    }

    /// Pointwise midpoint `(h¹ + h²)/2`.
    pub fn midpoint(&self) -> Field {
        self.lower
            .zip_with(&self.upper, |a, b| 0.5 * (a + b))
            .expect("walls share a grid")
    }

    /// Checks `h¹ - tol ≤ f ≤ h² + tol` at every node.
    pub fn check_contains(&self, f: &Field, tol: f64) -> Result<()> {
        self.grid().check_same(&f.grid())?;
        for (i, ((&v, &l), &u)) in f
            .values()
            .iter()
            .zip(self.lower())
            .zip(self.upper())
            .enumerate()
        {
            if v < l - tol || v > u + tol {
                return Err(Error::WallViolation {
                    node: i,
                    value: v,
                    lower: l,
                    upper: u,
                });
            }
        }
        Ok(())
    }

    /// Walls multiplied by a positive factor (used by the exponential tilt).
    pub fn scaled(&self, c: f64) -> WallPair {
        debug_assert!(c > 0.0);
        WallPair {
            lower: self.lower.scaled(c),
            upper: self.upper.scaled(c),
        }
    }
}

/// Length of the shortest arc between two angles.
pub fn arc_distance(x: f64, y: f64) -> f64 {
    let d = (x - y).abs().rem_euclid(TAU);
    d.min(TAU - d)
}

/// `d((x,t),(y,s)) = (r(x,y)² + (t-s)²)^{1/2}`.
pub fn space_time_distance(x: f64, t: f64, y: f64, s: f64) -> f64 {
    arc_distance(x, y).hypot(t - s)
}

/// Rectangle-rule `L²(S¹)` inner product.
pub fn l2_inner(a: &Field, b: &Field) -> Result<f64> {
    a.grid().check_same(&b.grid())?;
    let s: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(s * a.grid().dx())
}

/// `sup_{x,t} |ω(x,t)|` over a recorded path.
pub fn sup_norm(path: &[Field]) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::EmptyPath);
    }
    Ok(path.iter().fold(0.0, |m, f| m.max(f.sup_abs())))
}

/// Controls the pair set used by [`holder_norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderOptions {
    /// Use every pair of points when the number of space-time points is at most this.
    pub full_pair_limit: usize,
    /// Number of random pairs drawn above the limit (nearest neighbours are always added).
    pub subsample: usize,
    pub seed: u64,
}

impl Default for HolderOptions {
    fn default() -> Self {
        Self {
            full_pair_limit: 1 << 12,
            subsample: 1 << 16,
            seed: 0x5eed_4011_de12,
        }
    }
}

/// Hölder seminorm `sup |v(x,t) - v(y,s)| / d((x,t),(y,s))^α` over a sampled
/// space-time path, `α ∈ (0, 1/4)`.
pub fn holder_norm(path: &[Field], alpha: f64) -> Result<f64> {
    holder_norm_with(path, alpha, HolderOptions::default())
}

pub fn holder_norm_with(path: &[Field], alpha: f64, opts: HolderOptions) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.25) {
        return Err(invalid("alpha", format!("must lie in (0, 1/4), got {alpha}")));
    }
    let first = path.first().ok_or(Error::EmptyPath)?;
    let grid = first.grid();
    for f in path {
        grid.check_same(&f.grid())?;
    }
    let n_x = grid.len();
    let n_t = path.len();
    let points = n_x * n_t;
    let quotient = |p: usize, q: usize| -> f64 {
        let (kp, ip) = (p / n_x, p % n_x);
        let (kq, iq) = (q / n_x, q % n_x);
        let d = space_time_distance(grid.node(ip), path[kp].time(), grid.node(iq), path[kq].time());
        if d == 0.0 {
            return 0.0;
        }
        (path[kp].values()[ip] - path[kq].values()[iq]).abs() / d.powf(alpha)
    };

    let mut best = 0.0f64;
    if points <= opts.full_pair_limit {
        for p in 0..points {
            for q in (p + 1)..points {
                best = best.max(quotient(p, q));
            }
        }
        return Ok(best);
    }

    for k in 0..n_t {
        for i in 0..n_x {
            let p = k * n_x + i;
            best = best.max(quotient(p, k * n_x + (i + 1) % n_x));
            if k + 1 < n_t {
                best = best.max(quotient(p, p + n_x));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.subsample {
        let p = rng.random_range(0..points);
        let q = rng.random_range(0..points);
        if p != q {
            best = best.max(quotient(p, q));
        }
    }
    Ok(best)
}

/// Absolute angle reduced into `[0, 2π)`.
pub fn reduce_angle(x: f64) -> f64 {
    x.rem_euclid(TAU)
}
