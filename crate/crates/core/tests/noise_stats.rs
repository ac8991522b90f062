use proptest::prelude::*;
use spde_reflect::noise::{sample_increment, CoarseNoise, SheetNoise};
use spde_reflect::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn pooled_variance_in_chi_square_interval() {
    let grid = CircleGrid::new(100).unwrap();
    let dt = 1e-3;
    let target = grid.dx() * dt;
    let mut ss = 0.0;
    let mut count = 0usize;
    for step in 0..1000u64 {
        let inc = sample_increment(grid, dt, SeedSpec::new(5, 0, StreamTag::W1), step).unwrap();
        ss += inc.values().iter().map(|v| v * v).sum::<f64>();
        count += inc.values().len();
    }
    let chi = ChiSquared::new(count as f64).unwrap();
    let (lo, hi) = (chi.inverse_cdf(0.005), chi.inverse_cdf(0.995));
    let stat = ss / target;
    assert!(lo <= stat && stat <= hi, "{stat} outside [{lo}, {hi}]");
}

#[test]
fn streams_uncorrelated() {
    let grid = CircleGrid::new(100).unwrap();
    let dt = 1e-3;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for step in 0..1000u64 {
        let a = sample_increment(grid, dt, SeedSpec::new(5, 3, StreamTag::W1), step).unwrap();
        let b = sample_increment(grid, dt, SeedSpec::new(5, 3, StreamTag::W2), step).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
    }
    let rho = sab / (saa * sbb).sqrt();
    assert!(rho.abs() <= 0.01, "{rho}");
}

#[test]
fn coarse_noise_sums_fine_steps() {
    let grid = CircleGrid::new(8).unwrap();
    let fine = SheetNoise::new(grid, 1e-3, SeedSpec::new(1, 2, StreamTag::W1)).unwrap();
    let coarse = CoarseNoise::new(fine, 4);
    assert!((coarse.dt() - 4e-3).abs() < 1e-18);
    let c = coarse.increment(3);
    let mut sum = vec![0.0; 8];
    for k in 12..16 {
        for (s, v) in sum.iter_mut().zip(fine.increment(k).values()) {
            *s += v;
        }
    }
    for (a, b) in c.values().iter().zip(&sum) {
        assert!((a - b).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn draws_are_pure_functions_of_the_seed(master in any::<u64>(), replica in 0u64..1000, step in 0u64..1_000_000) {
        let grid = CircleGrid::new(8).unwrap();
        let s = SeedSpec::new(master, replica, StreamTag::W1);
        let a = sample_increment(grid, 1e-3, s, step).unwrap();
        let b = sample_increment(grid, 1e-3, s, step).unwrap();
        prop_assert_eq!(a.values(), b.values());
        let other = sample_increment(grid, 1e-3, s.with_stream(StreamTag::W2), step).unwrap();
        prop_assert_ne!(a.values(), other.values());
        let next = sample_increment(grid, 1e-3, s, step + 1).unwrap();
        prop_assert_ne!(a.values(), next.values());
    }
}
