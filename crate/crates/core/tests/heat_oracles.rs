use std::f64::consts::{PI, TAU};

use proptest::prelude::*;
use spde_reflect::heat::{
    apply_semigroup_with, kernel_value, stochastic_convolution, KernelEval, KernelRepr,
};
use spde_reflect::noise::SheetNoise;
use spde_reflect::*;

/// Free-space Gaussian wrapped by brute force over many copies.
fn wrapped_gaussian(t: f64, x: f64, y: f64) -> f64 {
    (-200..=200)
        .map(|m| {
            let d = x - y + TAU * m as f64;
            (-d * d / (4.0 * t)).exp()
        })
        .sum::<f64>()
        / (4.0 * PI * t).sqrt()
}

/// Periodic trapezoid rule with `m` points.
fn trapezoid(m: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = TAU / m as f64;
    (0..m).map(|j| f(j as f64 * h)).sum::<f64>() * h
}

#[test]
fn kernel_matches_brute_force_images() {
    for &t in &[0.01, 0.1, 1.0, 3.0] {
        for &(x, y) in &[(0.0, 0.0), (0.3, 5.9), (3.1, 0.2), (1.0, 4.0)] {
            let a = kernel_value(t, x, y, None).unwrap();
            let b = wrapped_gaussian(t, x, y);
            assert!((a - b).abs() <= 1e-11 * b.max(1.0), "t={t} x={x} y={y}: {a} vs {b}");
        }
    }
}

#[test]
fn kernel_mass_and_chapman_kolmogorov() {
    for &t in &[0.01, 0.1, 1.0] {
        let g = KernelEval::new(t, Some(KernelRepr::Spectral)).unwrap();
        let mass = trapezoid(4096, |y| g.value(0.7, y));
        assert!((mass - 1.0).abs() <= 1e-10, "t={t}: {mass}");
    }
    let (t, s) = (0.05, 0.2);
    let a = KernelEval::new(t, None).unwrap();
    let b = KernelEval::new(s, None).unwrap();
    let c = KernelEval::new(t + s, None).unwrap();
    for &(x, y) in &[(0.0, 1.0), (2.0, 2.5), (6.0, 0.1)] {
        let lhs = trapezoid(4096, |z| a.value(x, z) * b.value(z, y));
        assert!((lhs - c.value(x, y)).abs() <= 1e-12, "{lhs} vs {}", c.value(x, y));
    }
}

/// Variance of the discrete stochastic convolution with σ ≡ 1, from its spectral sum:
/// `var v_N(x) = dt/2π Σ_{m=1}^{N} Σ_k e^{-2 k² m dt}` over the `n` resolved modes.
fn discrete_variance(n: usize, dt: f64, steps: usize) -> f64 {
    let half = n as i64 / 2;
    let mut sum = 0.0;
    for m in 1..=steps {
        for k in (-half + 1)..=half {
            sum += (-2.0 * (k * k) as f64 * m as f64 * dt).exp();
        }
    }
    dt * sum / TAU
}

#[test]
fn stochastic_convolution_variance() {
    let n = 16;
    let grid = CircleGrid::new(n).unwrap();
    let dt = 2e-3;
    let steps = 250;
    let replicas = 3000;
    let ones = vec![Field::constant(grid, 1.0); steps];
    let zeros = vec![Field::zeros(grid); steps];
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let mut sum_sq = 0.0;
    for r in 0..replicas {
        let noise = SheetNoise::new(grid, dt, SeedSpec::new(99, r, StreamTag::W1)).unwrap();
        let incs: Vec<_> = (0..steps as u64).map(|k| noise.increment(k)).collect();
        let v = stochastic_convolution(&zeros, &ones, &incs, &times).unwrap();
        // one node per replica keeps the samples independent
        let x = v[steps].values()[(r as usize) % n];
        sum_sq += x * x;
    }
    let est = sum_sq / replicas as f64;
    let oracle = discrete_variance(n, dt, steps);
    let rel = (est / oracle - 1.0).abs();
    assert!(rel <= 4.0 * (2.0 / replicas as f64).sqrt(), "est {est} oracle {oracle}");
}

proptest! {
    #[test]
    fn kernel_symmetric_and_positive(t in 0.005f64..4.0, x in 0.0f64..TAU, y in 0.0f64..TAU) {
        let g = KernelEval::new(t, None).unwrap();
        let a = g.value(x, y);
        prop_assert!(a > 0.0);
        prop_assert!((a - g.value(y, x)).abs() <= 1e-14 * a.max(1.0));
        prop_assert!((a - g.value(x + TAU, y)).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn lattice_semigroup_max_principle(vals in prop::collection::vec(-5.0f64..5.0, 32), t in 1e-4f64..2.0) {
        let grid = CircleGrid::new(32).unwrap();
        let f = Field::new(grid, vals, 0.0).unwrap();
        let out = apply_semigroup_with(&f, t, PropagatorKind::Lattice).unwrap();
        prop_assert!(out.max() <= f.max() + 1e-12);
        prop_assert!(out.min() >= f.min() - 1e-12);
        prop_assert!((out.mean() - f.mean()).abs() <= 1e-12);
    }

    #[test]
    fn semigroup_composes(vals in prop::collection::vec(-1.0f64..1.0, 16), t in 0.0f64..1.0, s in 0.0f64..1.0) {
        let grid = CircleGrid::new(16).unwrap();
        let f = Field::new(grid, vals, 0.0).unwrap();
        for kind in [PropagatorKind::Spectral, PropagatorKind::Lattice] {
            let two = apply_semigroup_with(&apply_semigroup_with(&f, t, kind).unwrap(), s, kind).unwrap();
            let one = apply_semigroup_with(&f, t + s, kind).unwrap();
            prop_assert!(two.sup_distance(&one).unwrap() <= 1e-12);
        }
    }
}
