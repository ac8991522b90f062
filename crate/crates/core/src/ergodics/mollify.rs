//! Mollified coefficients and wall penalties.
//!
//! With the unit bump `φ` supported on `[-1, 1]`, every smoothed map is an average
//! `∫ φ(b) F(ζ - b/n) db`. The penalty integrands vanish on part of the support, so their
//! averages reduce to integrals of `φ` over a subinterval, evaluated by Gauss-Legendre rules.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::coefficients::ScalarFn;
use crate::error::{invalid, Result};

const GL_NODES: usize = 48;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(GL_NODES))
}

fn raw_bump(b: f64) -> f64 {
    if b.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - b * b)).exp()
    }
}

fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| {
        // Composite rule: the bump is flat to all orders at ±1, so panels converge fast.
        let panels = 16;
        (0..panels)
            .map(|k| {
                let a = -1.0 + 2.0 * k as f64 / panels as f64;
                integrate(a, a + 2.0 / panels as f64, raw_bump)
            })
            .sum()
    })
}

/// The unit-mass bump `φ(b) ∝ exp(-1/(1 - b²))` on `(-1, 1)`.
pub fn bump(b: f64) -> f64 {
    raw_bump(b) / bump_mass()
}

fn integrate(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (x, w) = rule();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    x.iter().zip(w).map(|(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}

/// `∫_a^b φ(s) g(s) ds` split into panels for accuracy on long intervals.
fn bump_integral(a: f64, b: f64, g: impl Fn(f64) -> f64) -> f64 {
    let a = a.max(-1.0);
    let b = b.min(1.0);
    if b <= a {
        return 0.0;
    }
    let panels = 8;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let lo = a + k as f64 * h;
            integrate(lo, lo + h, |s| bump(s) * g(s))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifiedCoefficients {
    pub n: f64,
    pub drift: ScalarFn,
    pub diffusion: ScalarFn,
    drift_damping: f64,
    diffusion_damping: f64,
}

/// `∫ φ(b) cos(ω b / n) db`, the factor by which mollification shrinks a sine of frequency `ω`.
fn damping(f: &ScalarFn, n: f64) -> f64 {
    match *f {
        ScalarFn::Sine { frequency, .. } => bump_integral(-1.0, 1.0, |b| (frequency * b / n).cos()),
        _ => 1.0,
    }
}

/// Mollification of an affine function is the function itself (the bump is even with unit
/// mass); a sine keeps its phase and is damped by a constant factor.
fn smoothed(f: &ScalarFn, damp: f64, zeta: f64) -> f64 {
    match *f {
        ScalarFn::Sine {
            offset,
            amplitude,
            frequency,
        } => offset + damp * amplitude * (frequency * zeta).sin(),
        _ => f.eval(zeta),
    }
}

fn smoothed_prime(f: &ScalarFn, damp: f64, zeta: f64) -> f64 {
    match *f {
        ScalarFn::Sine { .. } => damp * f.derivative(zeta),
        _ => f.derivative(zeta),
    }
}

impl MollifiedCoefficients {
    pub fn new(n: f64, drift: ScalarFn, diffusion: ScalarFn) -> Result<Self> {
        if !(n > 0.0 && n.is_finite()) {
            return Err(invalid("n", format!("bandwidth must be positive, got {n}")));
        }
        Ok(Self {
            n,
            drift,
            diffusion,
            drift_damping: damping(&drift, n),
            diffusion_damping: damping(&diffusion, n),
        })
    }

    /// Direct quadrature of `∫ φ(b) F(ζ - b/n) db`.
    pub fn smooth_by_quadrature(&self, zeta: f64, f: impl Fn(f64) -> f64) -> f64 {
        bump_integral(-1.0, 1.0, |b| f(zeta - b / self.n))
    }

    pub fn f(&self, zeta: f64) -> f64 {
        smoothed(&self.drift, self.drift_damping, zeta)
    }

    pub fn f_prime(&self, zeta: f64) -> f64 {
        smoothed_prime(&self.drift, self.drift_damping, zeta)
    }

    pub fn sigma(&self, zeta: f64) -> f64 {
        smoothed(&self.diffusion, self.diffusion_damping, zeta)
    }

    pub fn sigma_prime(&self, zeta: f64) -> f64 {
        smoothed_prime(&self.diffusion, self.diffusion_damping, zeta)
    }

    /// Smoothed `(ζ - h1)^-`.
    pub fn k(&self, zeta: f64, h1: f64) -> f64 {
        let d = zeta - h1;
        let c = self.n * d;
        if c >= 1.0 {
            0.0
        } else if c <= -1.0 {
            -d
        } else {
            bump_integral(c, 1.0, |b| b / self.n - d)
        }
    }

    /// `∂k/∂ζ = -∫_{n(ζ-h1)}^1 φ ≤ 0`.
    pub fn dk(&self, zeta: f64, h1: f64) -> f64 {
        let c = self.n * (zeta - h1);
        if c >= 1.0 {
            0.0
        } else if c <= -1.0 {
            -1.0
        } else {
            // partial mass of a unit-mass bump; quadrature can overshoot 1 by an ulp
            -bump_integral(c, 1.0, |_| 1.0).min(1.0)
        }
    }

    /// Smoothed `(ζ - h2)^+`.
    pub fn l(&self, zeta: f64, h2: f64) -> f64 {
        let d = zeta - h2;
        let c = self.n * d;
        if c <= -1.0 {
            0.0
        } else if c >= 1.0 {
            d
        } else {
            bump_integral(-1.0, c, |b| d - b / self.n)
        }
    }

    /// `∂l/∂ζ = ∫_{-1}^{n(ζ-h2)} φ ≥ 0`.
    pub fn dl(&self, zeta: f64, h2: f64) -> f64 {
        let c = self.n * (zeta - h2);
        if c <= -1.0 {
            0.0
        } else if c >= 1.0 {
            1.0
        } else {
            bump_integral(-1.0, c, |_| 1.0).min(1.0)
        }
    }

    /// Solves `w = u* + dt (k(w)/δ - l(w)/ε)` by bracketed Newton.
    /// Returns `w` and `1 - dt (∂k(w)/δ - ∂l(w)/ε)`.
    #[allow(clippy::too_many_arguments)]
    pub fn penalty_solve(
        &self,
        u_star: f64,
        h1: f64,
        h2: f64,
        dt: f64,
        epsilon: f64,
        delta: f64,
    ) -> (f64, f64) {
        let resid = |w: f64| w - dt * (self.k(w, h1) / delta - self.l(w, h2) / epsilon) - u_star;
        let slope = |w: f64| 1.0 - dt * (self.dk(w, h1) / delta - self.dl(w, h2) / epsilon);
        let r0 = resid(u_star);
        if r0 == 0.0 {
            return (u_star, slope(u_star));
        }
        // The residual has slope ≥ 1, so the root lies within |r0| of u*.
        let (mut lo, mut hi) = if r0 > 0.0 {
            (u_star - r0, u_star)
        } else {
            (u_star, u_star - r0)
        };
        let mut w = u_star;
        for _ in 0..100 {
            let r = resid(w);
            if r.abs() <= 1e-15 * (1.0 + w.abs()) {
                break;
            }
            if r > 0.0 {
                hi = w;
            } else {
                lo = w;
            }
            let mut next = w - r / slope(w);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - w).abs() <= 1e-16 * (1.0 + w.abs()) {
                w = next;
                break;
            }
            w = next;
        }
        (w, slope(w))
    }
}
