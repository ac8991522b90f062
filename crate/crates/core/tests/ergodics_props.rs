use proptest::prelude::*;
use spde_reflect::ergodics::*;
use spde_reflect::*;

fn sine(offset: f64, amplitude: f64, frequency: f64) -> ScalarFn {
    ScalarFn::Sine { offset, amplitude, frequency }
}

proptest! {
    #[test]
    fn mollified_penalties_have_the_right_signs(n in 1.0f64..500.0, zeta in -3.0f64..3.0, h in -1.5f64..1.5) {
        let m = MollifiedCoefficients::new(n, ScalarFn::Zero, ScalarFn::constant(1.0)).unwrap();
        prop_assert!(m.k(zeta, h) >= 0.0 && m.l(zeta, h) >= 0.0);
        prop_assert!(m.dk(zeta, h) <= 0.0 && m.dk(zeta, h) >= -1.0);
        prop_assert!(m.dl(zeta, h) >= 0.0 && m.dl(zeta, h) <= 1.0);
        // the smoothed hinge is within 1/n of the hinge
        prop_assert!((m.k(zeta, h) - (zeta - h).min(0.0).abs()).abs() <= 1.0 / n + 1e-12);
        prop_assert!((m.l(zeta, h) - (zeta - h).max(0.0)).abs() <= 1.0 / n + 1e-12);
    }

    #[test]
    fn mollified_coefficients_converge(n in 1.0f64..1000.0, zeta in -3.0f64..3.0, amp in -2.0f64..2.0, w in 0.1f64..4.0) {
        let f = sine(0.3, amp, w);
        let s = ScalarFn::Linear { intercept: 1.0, slope: 0.4 };
        let m = MollifiedCoefficients::new(n, f, s).unwrap();
        prop_assert!((m.f(zeta) - f.eval(zeta)).abs() <= f.lipschitz() / n + 1e-12);
        prop_assert!((m.sigma(zeta) - s.eval(zeta)).abs() <= 1e-12);
        prop_assert!(m.f_prime(zeta).abs() <= f.lipschitz() + 1e-12);
    }

    #[test]
    fn penalty_solve_slope_at_least_one(n in 1.0f64..200.0, u in -3.0f64..3.0, eps in 1e-3f64..1.0) {
        let m = MollifiedCoefficients::new(n, ScalarFn::Zero, ScalarFn::Zero).unwrap();
        let (w, slope) = m.penalty_solve(u, -1.0, 1.0, 1e-2, eps, eps);
        prop_assert!(slope >= 1.0);
        let resid = w - 1e-2 * (m.k(w, -1.0) / eps - m.l(w, 1.0) / eps) - u;
        prop_assert!(resid.abs() <= 1e-12);
    }
}

fn frozen(grid: CircleGrid, seed: u64) -> (WallPair, PenalizedParams, MollifiedDynamics, SheetNoise) {
    let walls = WallPair::from_fns(grid, |x| -1.0 + 0.3 * x.sin(), |x| 1.0 + 0.3 * x.cos()).unwrap();
    let p = PenalizedParams::projected(1e-3, sine(0.0, 0.5, 1.0), sine(1.0, 0.3, 1.0)).unwrap();
    let d = MollifiedDynamics { bandwidth: 20.0, epsilon: 0.05, delta: 0.05 };
    let noise = SheetNoise::new(grid, 1e-3, SeedSpec::new(seed, 0, StreamTag::W1)).unwrap();
    (walls, p, d, noise)
}

#[test]
fn derivative_flow_is_linear_in_direction() {
    let grid = CircleGrid::new(32).unwrap();
    let (walls, p, d, noise) = frozen(grid, 8);
    let u0 = Field::from_fn(grid, |x| 0.7 * x.cos());
    let a = Field::from_fn(grid, |x| x.sin());
    let b = Field::from_fn(grid, |x| 1.0 + (2.0 * x).cos());
    let ab = a.zip_with(&b, |x, y| x - 2.5 * y).unwrap();
    let xa = derivative_flow(&u0, &a, &walls, 0.5, &p, &d, &noise).unwrap();
    let xb = derivative_flow(&u0, &b, &walls, 0.5, &p, &d, &noise).unwrap();
    let xab = derivative_flow(&u0, &ab, &walls, 0.5, &p, &d, &noise).unwrap();
    for k in 0..xab.x.len() {
        let lin = xa.x[k].zip_with(&xb.x[k], |x, y| x - 2.5 * y).unwrap();
        assert!(lin.sup_distance(&xab.x[k]).unwrap() <= 1e-10 * (1.0 + lin.sup_abs()));
    }
    assert_eq!(xa.base, xb.base);
}

#[test]
fn derivative_flow_matches_finite_differences() {
    let grid = CircleGrid::new(32).unwrap();
    let (walls, p, d, noise) = frozen(grid, 3);
    let u0 = Field::from_fn(grid, |x| 0.8 * x.cos());
    let dir = Field::from_fn(grid, |x| x.sin() + 0.3);
    let h = 1e-4;
    let flow = derivative_flow(&u0, &dir, &walls, 1.0, &p, &d, &noise).unwrap();
    let up = mollified_endpoint(&u0.zip_with(&dir, |a, b| a + h * b).unwrap(), &walls, 1.0, &p, &d, &noise).unwrap();
    let dn = mollified_endpoint(&u0.zip_with(&dir, |a, b| a - h * b).unwrap(), &walls, 1.0, &p, &d, &noise).unwrap();
    let fd = up.zip_with(&dn, |a, b| (a - b) / (2.0 * h)).unwrap();
    let x = flow.x.last().unwrap();
    assert!(fd.sup_distance(x).unwrap() <= 0.05 * x.sup_abs());
    // the tangent base path is the mollified trajectory itself
    let end = mollified_endpoint(&u0, &walls, 1.0, &p, &d, &noise).unwrap();
    assert!(end.sup_distance(flow.base.last().unwrap()).unwrap() <= 1e-14);
}

#[test]
fn occupation_is_reproducible() {
    let grid = CircleGrid::new(16).unwrap();
    let walls = WallPair::constant(grid, -1.0, 1.0).unwrap();
    let p = PenalizedParams::projected(2e-3, ScalarFn::Zero, ScalarFn::constant(1.0)).unwrap();
    let obs = Observable::defaults(grid);
    let run = || occupation_measure(&Field::zeros(grid), &walls, 2.0, 1.0, 0.1, &obs, &p, 5, 4).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.cdfs.iter().all(|c| c.len() == 4 * 11 && c.mass_outside(-1.0, 1.0) == 0.0));
}

#[test]
fn lp_moment_matches_direct_formula() {
    let ys = [0.5, 1.0, 1.5, 2.0];
    let kappa = 0.25;
    let direct = (ys.iter().map(|y: &f64| y.powf(4.0)).sum::<f64>() / 4.0).powf(0.25);
    assert!((lp_moment(&ys, kappa) - direct).abs() <= 1e-12);
}
