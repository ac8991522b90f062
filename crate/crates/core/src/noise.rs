//! Space-time white noise as Brownian-sheet cell increments.
//!
//! Every increment is a pure function of `(master_seed, replica_id, stream_tag,
//! step_index)`: the first three are hashed into a ChaCha key and the step index
//! selects the ChaCha stream. Replicas and streams never share generator state,
//! so they can be sampled concurrently and in any order.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{CircleGrid, Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StreamTag {
    W1,
    W2,
    Aux,
}

impl StreamTag {
    pub const ALL: [StreamTag; 3] = [StreamTag::W1, StreamTag::W2, StreamTag::Aux];

    fn code(self) -> u64 {
        match self {
            StreamTag::W1 => 0x5731,
            StreamTag::W2 => 0x5732,
            StreamTag::Aux => 0x0041_5558,
        }
    }
}

impl fmt::Display for StreamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamTag::W1 => "W1",
            StreamTag::W2 => "W2",
            StreamTag::Aux => "AUX",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replica_id: u64,
    pub stream: StreamTag,
}

impl SeedSpec {
    pub fn new(master_seed: u64, replica_id: u64, stream: StreamTag) -> Self {
        Self {
            master_seed,
            replica_id,
            stream,
        }
    }

    pub fn with_stream(self, stream: StreamTag) -> Self {
        Self { stream, ..self }
    }

    pub fn with_replica(self, replica_id: u64) -> Self {
        Self { replica_id, ..self }
    }

    fn key(&self) -> [u8; 32] {
        let mut state = self.master_seed ^ 0x9e37_79b9_7f4a_7c15;
        let mut key = [0u8; 32];
        let words = [
            splitmix(&mut state),
            splitmix(&mut state) ^ self.replica_id.wrapping_mul(0xd6e8_feb8_6659_fd93),
            splitmix(&mut state) ^ self.stream.code(),
        ];
        let mut mix = words[0] ^ words[1].rotate_left(17) ^ words[2].rotate_left(41);
        for chunk in key.chunks_exact_mut(8) {
            mix = mix.wrapping_add(words[1]).wrapping_add(words[2].rotate_left(7));
            chunk.copy_from_slice(&splitmix(&mut mix).to_le_bytes());
        }
        key
    }

    /// Generator for one time step of this stream.
    pub fn rng_for_step(&self, step_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(step_index);
        rng
    }
}

impl fmt::Display for SeedSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seed {}/replica {}/{}", self.master_seed, self.replica_id, self.stream)
    }
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One time slice of Brownian-sheet increments; `values[i] ~ N(0, dx·dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    grid: CircleGrid,
    dt: f64,
    values: Vec<f64>,
}

impl NoiseIncrement {
    pub fn new(grid: CircleGrid, dt: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(crate::Error::GridMismatch {
                left: grid.len(),
                right: values.len(),
            });
        }
        check_dt(dt)?;
        Ok(Self { grid, dt, values })
    }

    pub fn zeros(grid: CircleGrid, dt: f64) -> Self {
        Self {
            grid,
            dt,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> CircleGrid {
        self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    Ok(())
}

/// Draws the cell increments of step `step_index` of a stream.
pub fn sample_increment(
    grid: CircleGrid,
    dt: f64,
    stream: SeedSpec,
    step_index: u64,
) -> Result<NoiseIncrement> {
    check_dt(dt)?;
    let mut values = vec![0.0; grid.len()];
    fill_increment(grid, dt, &stream, step_index, &mut values);
    Ok(NoiseIncrement { grid, dt, values })
}

fn fill_increment(grid: CircleGrid, dt: f64, stream: &SeedSpec, step: u64, out: &mut [f64]) {
    let scale = (grid.dx() * dt).sqrt();
    let mut rng = stream.rng_for_step(step);
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

/// Discrete stochastic integral over one step: `Σ_i φ_i ΔW_i`.
///
/// The increment already carries the cell measure, so there is no `dx` factor.
pub fn white_noise_pairing(increment: &NoiseIncrement, field: &Field) -> Result<f64> {
    increment.grid.check_same(&field.grid())?;
    Ok(pairing(increment.values(), field.values()))
}

#[inline]
pub(crate) fn pairing(dw: &[f64], phi: &[f64]) -> f64 {
    dw.iter().zip(phi).map(|(w, p)| w * p).sum()
}

/// A driving noise path: increments indexed by step.
pub trait NoiseSource: Sync {
    fn grid(&self) -> CircleGrid;
    fn dt(&self) -> f64;
    fn fill(&self, step: u64, out: &mut [f64]);

    fn increment(&self, step: u64) -> NoiseIncrement {
        let mut values = vec![0.0; self.grid().len()];
        self.fill(step, &mut values);
        NoiseIncrement {
            grid: self.grid(),
            dt: self.dt(),
            values,
        }
    }
}

/// Fresh Brownian-sheet increments from a seed stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SheetNoise {
    grid: CircleGrid,
    dt: f64,
    seed: SeedSpec,
}

impl SheetNoise {
    pub fn new(grid: CircleGrid, dt: f64, seed: SeedSpec) -> Result<Self> {
        check_dt(dt)?;
        Ok(Self { grid, dt, seed })
    }

    pub fn seed(&self) -> SeedSpec {
        self.seed
    }

    /// The same sheet observed on a coarser time mesh (`factor` fine steps per step).
    pub fn coarsened(self, factor: u32) -> CoarseNoise<SheetNoise> {
        CoarseNoise::new(self, factor)
    }
}

impl NoiseSource for SheetNoise {
    fn grid(&self) -> CircleGrid {
        self.grid
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn fill(&self, step: u64, out: &mut [f64]) {
        fill_increment(self.grid, self.dt, &self.seed, step, out);
    }
}

/// Sums consecutive increments of a finer path so refinement studies share one sheet.
#[derive(Debug, Clone)]
pub struct CoarseNoise<S> {
    fine: S,
    factor: u32,
}

impl<S: NoiseSource> CoarseNoise<S> {
    pub fn new(fine: S, factor: u32) -> Self {
        assert!(factor >= 1, "coarsening factor must be positive");
        Self { fine, factor }
    }
}

impl<S: NoiseSource> NoiseSource for CoarseNoise<S> {
    fn grid(&self) -> CircleGrid {
        self.fine.grid()
    }
    fn dt(&self) -> f64 {
        self.fine.dt() * self.factor as f64
    }
    fn fill(&self, step: u64, out: &mut [f64]) {
        out.fill(0.0);
        let mut buf = vec![0.0; out.len()];
        let f = self.factor as u64;
        for j in 0..f {
            self.fine.fill(step * f + j, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += b;
            }
        }
    }
}

/// Zero noise (deterministic runs).
#[derive(Debug, Clone, Copy)]
pub struct Silent {
    pub grid: CircleGrid,
    pub dt: f64,
}

impl NoiseSource for Silent {
    fn grid(&self) -> CircleGrid {
        self.grid
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn fill(&self, _step: u64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Seed record written next to every experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub master_seed: u64,
    pub replicas: u64,
    pub stream_tags: Vec<StreamTag>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> CircleGrid {
        CircleGrid::new(16).unwrap()
    }

    #[test]
    fn rejects_bad_dt() {
        let s = SeedSpec::new(1, 0, StreamTag::W1);
        assert!(sample_increment(grid(), 0.0, s, 0).is_err());
        assert!(sample_increment(grid(), -1.0, s, 0).is_err());
    }

    #[test]
    fn determinism() {
        let s = SeedSpec::new(7, 3, StreamTag::W2);
        let a = sample_increment(grid(), 1e-3, s, 11).unwrap();
        let b = sample_increment(grid(), 1e-3, s, 11).unwrap();
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = sample_increment(grid(), 1e-3, s, 12).unwrap();
        assert_ne!(a.values(), c.values());
        let d = sample_increment(grid(), 1e-3, s.with_replica(4), 11).unwrap();
        assert_ne!(a.values(), d.values());
    }

    #[test]
    fn pairing_zero_field() {
        let s = SeedSpec::new(7, 3, StreamTag::W1);
        let inc = sample_increment(grid(), 1e-3, s, 0).unwrap();
        assert_eq!(white_noise_pairing(&inc, &Field::zeros(grid())).unwrap(), 0.0);
        let other = Field::zeros(CircleGrid::new(8).unwrap());
        assert!(white_noise_pairing(&inc, &other).is_err());
    }

    #[test]
    fn coarse_noise_sums_fine_steps() {
        let s = SeedSpec::new(9, 0, StreamTag::W1);
        let fine = SheetNoise::new(grid(), 1e-3, s).unwrap();
        let coarse = fine.coarsened(2);
        assert!((coarse.dt() - 2e-3).abs() < 1e-18);
        let c = coarse.increment(5);
        let a = fine.increment(10);
        let b = fine.increment(11);
        for i in 0..16 {
            assert_eq!(c.values()[i], a.values()[i] + b.values()[i]);
        }
    }
}
