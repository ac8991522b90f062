//! Periodic heat kernel, heat semigroup and the stochastic convolution.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{CircleGrid, Field};
use crate::noise::NoiseIncrement;

const TAIL: f64 = 1e-14;
const IMAGE_CUTOVER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelRepr {
    Spectral,
    Image,
}

/// A kernel evaluator for a fixed time, with its truncation fixed up front.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEval {
    pub t: f64,
    pub representation: KernelRepr,
    pub truncation: usize,
}

impl KernelEval {
    /// `rep = None` picks the image sum for short times and the Fourier sum otherwise.
    pub fn new(t: f64, rep: Option<KernelRepr>) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid("t", format!("kernel time must be positive, got {t}")));
        }
        let representation = rep.unwrap_or(if t < IMAGE_CUTOVER {
            KernelRepr::Image
        } else {
            KernelRepr::Spectral
        });
        let truncation = match representation {
            // e^{-k^2 t} < TAIL for k > K, and the remaining tail is dominated by its first term.
            KernelRepr::Spectral => ((-TAIL.ln()) / t).sqrt().ceil() as usize + 1,
            KernelRepr::Image => (6.0 * t.sqrt() / TAU).ceil() as usize + 2,
        };
        Ok(Self {
            t,
            representation,
            truncation,
        })
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let d = x - y;
        match self.representation {
            KernelRepr::Spectral => {
                let mut s = 0.5;
                for k in 1..=self.truncation {
                    let kf = k as f64;
                    s += (-kf * kf * self.t).exp() * (kf * d).cos();
                }
                s / PI
            }
            KernelRepr::Image => {
                // Centre the image sum on the nearest copy so few terms are needed.
                let d = d - TAU * (d / TAU).round();
                let m = self.truncation as i64;
                let norm = (4.0 * PI * self.t).sqrt();
                (-m..=m)
                    .map(|j| {
                        let z = d + TAU * j as f64;
                        (-z * z / (4.0 * self.t)).exp()
                    })
                    .sum::<f64>()
                    / norm
            }
        }
    }
}

pub fn kernel_value(t: f64, x: f64, y: f64, rep: Option<KernelRepr>) -> Result<f64> {
    Ok(KernelEval::new(t, rep)?.value(x, y))
}

/// Which generator the grid semigroup exponentiates.
///
/// `Spectral` uses the continuum symbol `-k^2` on every resolved mode. `Lattice` uses the
/// symbol of the three-point Laplacian, `-(4/dx^2) sin^2(k dx / 2)`; its exponential is a
/// positive, mass-preserving matrix, so it obeys a discrete maximum principle exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagatorKind {
    Spectral,
    #[default]
    Lattice,
}

impl fmt::Display for PropagatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PropagatorKind::Spectral => "spectral",
            PropagatorKind::Lattice => "lattice",
        })
    }
}

/// Wavenumber of FFT bin `i` on an `n`-point grid.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

pub fn symbol(kind: PropagatorKind, grid: CircleGrid, k: i64) -> f64 {
    let k = k as f64;
    match kind {
        PropagatorKind::Spectral => -k * k,
        PropagatorKind::Lattice => {
            let dx = grid.dx();
            let s = (0.5 * k * dx).sin();
            -4.0 * s * s / (dx * dx)
        }
    }
}

/// Fourier multiplier `exp(t * symbol)` with cached FFT plans and work buffers.
///
/// Cloning is cheap (plans are shared); each trajectory should own its own clone.
#[derive(Clone)]
pub struct HeatPropagator {
    grid: CircleGrid,
    t: f64,
    kind: PropagatorKind,
    multiplier: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl fmt::Debug for HeatPropagator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeatPropagator")
            .field("n_x", &self.grid.len())
            .field("t", &self.t)
            .field("kind", &self.kind)
            .finish()
    }
}

impl HeatPropagator {
    pub fn new(grid: CircleGrid, t: f64, kind: PropagatorKind) -> Result<Self> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(invalid("t", format!("must be nonnegative, got {t}")));
        }
        let n = grid.len();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        let multiplier = (0..n)
            .map(|i| (t * symbol(kind, grid, wavenumber(i, n))).exp() / n as f64)
            .collect();
        Ok(Self {
            grid,
            t,
            kind,
            multiplier,
            forward,
            inverse,
            buf: vec![Complex64::new(0.0, 0.0); n],
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        })
    }

    pub fn grid(&self) -> CircleGrid {
        self.grid
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn kind(&self) -> PropagatorKind {
        self.kind
    }

    pub fn symbol(&self, k: i64) -> f64 {
        symbol(self.kind, self.grid, k)
    }

    pub fn apply_in_place(&mut self, values: &mut [f64]) {
        debug_assert_eq!(values.len(), self.buf.len());
        if self.t == 0.0 {
            return;
        }
        for (b, v) in self.buf.iter_mut().zip(values.iter()) {
            *b = Complex64::new(*v, 0.0);
        }
        self.forward
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        for (b, m) in self.buf.iter_mut().zip(&self.multiplier) {
            *b *= *m;
        }
        self.inverse
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        for (v, b) in values.iter_mut().zip(&self.buf) {
            *v = b.re;
        }
    }

    pub fn apply(&mut self, field: &Field) -> Result<Field> {
        self.grid.check_same(&field.grid())?;
        let mut out = field.clone();
        self.apply_in_place(out.values_mut());
        Ok(out)
    }
}

/// `∫ G_t(x, y) g(y) dy` on the grid via the spectral multiplier `e^{-k^2 t}`.
pub fn apply_semigroup(field: &Field, t: f64) -> Result<Field> {
    apply_semigroup_with(field, t, PropagatorKind::Spectral)
}

pub fn apply_semigroup_with(field: &Field, t: f64, kind: PropagatorKind) -> Result<Field> {
    if t == 0.0 {
        return Ok(field.clone());
    }
    HeatPropagator::new(field.grid(), t, kind)?.apply(field)
}

/// Mild recursion `v_{k+1} = S_dt(v_k + dt·drift_k) + S_dt(σ_k ⊙ ΔW_k / dx)`, `v_0 = 0`.
///
/// Returns `v` at every time in `times` (length = steps + 1).
pub fn stochastic_convolution(
    drift_path: &[Field],
    sigma_path: &[Field],
    noise_path: &[NoiseIncrement],
    times: &[f64],
) -> Result<Vec<Field>> {
    stochastic_convolution_with(
        drift_path,
        sigma_path,
        noise_path,
        times,
        PropagatorKind::Spectral,
    )
}

pub fn stochastic_convolution_with(
    drift_path: &[Field],
    sigma_path: &[Field],
    noise_path: &[NoiseIncrement],
    times: &[f64],
    kind: PropagatorKind,
) -> Result<Vec<Field>> {
    let steps = noise_path.len();
    if times.len() != steps + 1 {
        return Err(Error::Misaligned(format!(
            "{} times for {} noise increments",
            times.len(),
            steps
        )));
    }
    if drift_path.len() < steps || sigma_path.len() < steps {
        return Err(Error::Misaligned(format!(
            "need {} drift/sigma slices, got {}/{}",
            steps,
            drift_path.len(),
            sigma_path.len()
        )));
    }
    let grid = match (drift_path.first(), noise_path.first()) {
        (Some(d), _) => d.grid(),
        (None, Some(w)) => w.grid(),
        (None, None) => return Err(Error::EmptyPath),
    };
    let dt = if steps > 0 { times[1] - times[0] } else { 0.0 };
    for k in 0..steps {
        grid.check_same(&drift_path[k].grid())?;
        grid.check_same(&sigma_path[k].grid())?;
        grid.check_same(&noise_path[k].grid())?;
        let step = times[k + 1] - times[k];
        if (step - dt).abs() > 1e-12 * dt.max(1.0) || (noise_path[k].dt() - dt).abs() > 1e-12 {
            return Err(Error::Misaligned(format!("nonuniform step at index {k}")));
        }
    }
    let mut prop = HeatPropagator::new(grid, dt, kind)?;
    let inv_dx = 1.0 / grid.dx();
    let mut out = Vec::with_capacity(steps + 1);
    let mut v = vec![0.0; grid.len()];
    out.push(Field::from_raw(grid, v.clone(), times[0]));
    for k in 0..steps {
        let d = drift_path[k].values();
        let s = sigma_path[k].values();
        let w = noise_path[k].values();
        for i in 0..v.len() {
            v[i] += dt * d[i] + s[i] * w[i] * inv_dx;
        }
        prop.apply_in_place(&mut v);
        out.push(Field::from_raw(grid, v.clone(), times[k + 1]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{sample_increment, SeedSpec, StreamTag};

    #[test]
    fn kernel_rejects_nonpositive_time() {
        assert!(kernel_value(0.0, 0.0, 0.0, None).is_err());
        assert!(kernel_value(-1.0, 0.0, 0.0, None).is_err());
    }

    #[test]
    fn kernel_forms_agree() {
        for &t in &[0.01, 0.1, 1.0] {
            let a = KernelEval::new(t, Some(KernelRepr::Spectral)).unwrap();
            let b = KernelEval::new(t, Some(KernelRepr::Image)).unwrap();
            for i in 0..64 {
                let d = TAU * i as f64 / 64.0;
                assert!((a.value(d, 0.0) - b.value(d, 0.0)).abs() <= 1e-10, "t={t} d={d}");
            }
        }
    }

    #[test]
    fn kernel_symmetric_and_nonnegative() {
        for &t in &[0.01, 0.3, 2.0] {
            let k = KernelEval::new(t, None).unwrap();
            for &(x, y) in &[(0.3, 1.9), (6.0, 0.1), (2.0, 2.0)] {
                assert_eq!(k.value(x, y), k.value(y, x));
                assert!(k.value(x, y) >= 0.0);
            }
        }
    }

    #[test]
    fn cos_is_eigenfunction() {
        let g = CircleGrid::new(32).unwrap();
        let f = Field::from_fn(g, f64::cos);
        let out = apply_semigroup(&f, 1.0).unwrap();
        for (x, v) in g.nodes().zip(out.values()) {
            assert!((v - (-1.0f64).exp() * x.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_time_is_identity() {
        let g = CircleGrid::new(16).unwrap();
        let f = Field::from_fn(g, |x| (3.0 * x).sin() + x.cos().abs());
        assert_eq!(apply_semigroup(&f, 0.0).unwrap(), f);
    }

    #[test]
    fn lattice_symbol_matches_finite_difference() {
        let g = CircleGrid::new(16).unwrap();
        let dx = g.dx();
        for k in 0..8 {
            let f = Field::from_fn(g, |x| (k as f64 * x).cos());
            let lap: Vec<f64> = (0..16)
                .map(|i| {
                    let v = f.values();
                    (v[g.wrap(i as isize - 1)] - 2.0 * v[i] + v[g.wrap(i as isize + 1)]) / (dx * dx)
                })
                .collect();
            let lam = symbol(PropagatorKind::Lattice, g, k);
            for (l, x) in lap.iter().zip(f.values()) {
                assert!((l - lam * x).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lattice_propagator_positive_on_spikes() {
        let g = CircleGrid::new(32).unwrap();
        let mut spike = Field::zeros(g);
        spike.values_mut()[5] = 1.0;
        let out = apply_semigroup_with(&spike, 1e-4, PropagatorKind::Lattice).unwrap();
        assert!(out.min() >= -1e-15);
        let spectral = apply_semigroup(&spike, 1e-4).unwrap();
        assert!(spectral.min() < -1e-3);
    }

    #[test]
    fn convolution_of_unit_drift_is_time() {
        let g = CircleGrid::new(16).unwrap();
        let steps = 100;
        let dt = 0.01;
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        let drift = vec![Field::constant(g, 1.0); steps];
        let sigma = vec![Field::zeros(g); steps];
        let s = SeedSpec::new(1, 0, StreamTag::W1);
        let noise: Vec<_> = (0..steps as u64)
            .map(|k| sample_increment(g, dt, s, k).unwrap())
            .collect();
        let v = stochastic_convolution(&drift, &sigma, &noise, &times).unwrap();
        for x in v.last().unwrap().values() {
            assert!((x - 1.0).abs() < 1e-10);
        }
        assert!(stochastic_convolution(&drift, &sigma, &noise, &times[..50]).is_err());
    }
}
