//! Scalar drift and diffusion coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScalarFn {
    #[default]
    Zero,
    Constant { value: f64 },
    /// `intercept + slope * u`
    Linear { intercept: f64, slope: f64 },
    /// `offset + amplitude * sin(frequency * u)`
    Sine {
        offset: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl ScalarFn {
    pub fn constant(value: f64) -> Self {
        ScalarFn::Constant { value }
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Constant { value } => value,
            ScalarFn::Linear { intercept, slope } => intercept + slope * u,
            ScalarFn::Sine {
                offset,
                amplitude,
                frequency,
            } => offset + amplitude * (frequency * u).sin(),
        }
    }

    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        match *self {
            ScalarFn::Zero | ScalarFn::Constant { .. } => 0.0,
            ScalarFn::Linear { slope, .. } => slope,
            ScalarFn::Sine {
                amplitude,
                frequency,
                ..
            } => amplitude * frequency * (frequency * u).cos(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            ScalarFn::Zero | ScalarFn::Constant { .. } => 0.0,
            ScalarFn::Linear { slope, .. } => slope.abs(),
            ScalarFn::Sine {
                amplitude,
                frequency,
                ..
            } => (amplitude * frequency).abs(),
        }
    }

    /// Smallest and largest value on `[lo, hi]`.
    pub fn range_on(&self, lo: f64, hi: f64) -> (f64, f64) {
        match *self {
            ScalarFn::Zero => (0.0, 0.0),
            ScalarFn::Constant { value } => (value, value),
            ScalarFn::Linear { .. } => {
                let (a, b) = (self.eval(lo), self.eval(hi));
                (a.min(b), a.max(b))
            }
            ScalarFn::Sine { .. } => {
                let n = 4096;
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for i in 0..=n {
                    let v = self.eval(lo + (hi - lo) * i as f64 / n as f64);
                    min = min.min(v);
                    max = max.max(v);
                }
                // Sampling can miss an extremum by at most Lip * h / 2.
                let pad = self.lipschitz() * (hi - lo) / (2 * n) as f64;
                (min - pad, max + pad)
            }
        }
    }

    pub fn is_nonincreasing(&self) -> bool {
        match *self {
            ScalarFn::Zero | ScalarFn::Constant { .. } => true,
            ScalarFn::Linear { slope, .. } => slope <= 0.0,
            ScalarFn::Sine {
                amplitude,
                frequency,
                ..
            } => amplitude == 0.0 || frequency == 0.0,
        }
    }

    /// Confirms `|σ| ≥ lower` on `[lo, hi]`.
    pub fn check_lower_bound(&self, lo: f64, hi: f64, lower: f64) -> Result<()> {
        let (min, max) = self.range_on(lo, hi);
        let mag = if min > 0.0 {
            min
        } else if max < 0.0 {
            -max
        } else {
            0.0
        };
        if mag < lower {
            let state = if min.abs() < max.abs() { lo } else { hi };
            return Err(Error::DiffusionBound {
                state,
                value: mag,
                bound: lower,
            });
        }
        Ok(())
    }

    /// `c * self`, used to rescale σ in scaling checks.
    pub fn scaled(&self, c: f64) -> ScalarFn {
        match *self {
            ScalarFn::Zero => ScalarFn::Zero,
            ScalarFn::Constant { value } => ScalarFn::Constant { value: c * value },
            ScalarFn::Linear { intercept, slope } => ScalarFn::Linear {
                intercept: c * intercept,
                slope: c * slope,
            },
            ScalarFn::Sine {
                offset,
                amplitude,
                frequency,
            } => ScalarFn::Sine {
                offset: c * offset,
                amplitude: c * amplitude,
                frequency,
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            ScalarFn::Zero => true,
            ScalarFn::Constant { value } => value == 0.0,
            ScalarFn::Linear { intercept, slope } => intercept == 0.0 && slope == 0.0,
            ScalarFn::Sine {
                offset, amplitude, ..
            } => offset == 0.0 && amplitude == 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_matches_difference_quotient() {
        let fs = [
            ScalarFn::Linear {
                intercept: 0.3,
                slope: -2.0,
            },
            ScalarFn::Sine {
                offset: 1.0,
                amplitude: 0.5,
                frequency: 3.0,
            },
        ];
        let h = 1e-6;
        for f in fs {
            for &u in &[-0.7, 0.0, 0.4, 1.3] {
                let fd = (f.eval(u + h) - f.eval(u - h)) / (2.0 * h);
                assert!((fd - f.derivative(u)).abs() < 1e-8);
                assert!(f.derivative(u).abs() <= f.lipschitz() + 1e-12);
            }
        }
    }

    #[test]
    fn lower_bound() {
        let s = ScalarFn::Sine {
            offset: 1.0,
            amplitude: 0.5,
            frequency: 1.0,
        };
        assert!(s.check_lower_bound(-1.0, 1.0, 0.4).is_ok());
        assert!(s.check_lower_bound(-2.0, 2.0, 0.6).is_err());
        assert!(ScalarFn::Zero.check_lower_bound(-1.0, 1.0, 0.1).is_err());
        assert!(ScalarFn::constant(-2.0).check_lower_bound(-1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn serde_round_trip() {
        let f = ScalarFn::Linear {
            intercept: 1.0,
            slope: -0.5,
        };
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<ScalarFn>(&s).unwrap(), f);
    }
}
