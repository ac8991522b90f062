//! Replica-parallel execution with deterministic result order.

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Runs `job(r)` for `r in 0..count` on the rayon pool; results keep replica order.
pub fn map_replicas<T, F>(count: u64, job: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..count).into_par_iter().map(job).collect()
}

/// Like [`map_replicas`] but fails on the first (lowest-index) failing replica.
pub fn try_map_replicas<T, F>(count: u64, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    map_replicas(count, job).into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

pub fn mean_estimate(xs: &[f64]) -> MeanEstimate {
    let n = xs.len();
    if n == 0 {
        return MeanEstimate {
            mean: f64::NAN,
            stderr: f64::NAN,
            count: 0,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    MeanEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        count: n,
    }
}

/// Binomial proportion with its normal-approximation standard error.
pub fn proportion(successes: usize, trials: usize) -> MeanEstimate {
    let p = successes as f64 / trials.max(1) as f64;
    MeanEstimate {
        mean: p,
        stderr: (p * (1.0 - p) / trials.max(1) as f64).sqrt(),
        count: trials,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn order_is_stable() {
        let out = try_map_replicas(100, |r| Ok(r * r)).unwrap();
        assert_eq!(out, (0..100).map(|r| r * r).collect::<Vec<_>>());
    }

    #[test]
    fn failures_are_isolated() {
        let out = map_replicas(10, |r| {
            if r == 3 {
                Err(Error::BlowUp { step: 1, time: 0.1 })
            } else {
                Ok(r)
            }
        });
        assert!(out[3].is_err());
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 9);
    }

    #[test]
    fn estimates() {
        let m = mean_estimate(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.stderr - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let p = proportion(1, 4);
        assert_eq!(p.mean, 0.25);
    }
}
