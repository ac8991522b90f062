//! Stochastic heat equation on the circle with two reflecting walls.

pub mod coefficients;
pub mod coupling;
pub mod ergodics;
pub mod error;
pub mod grid;
pub mod heat;
pub mod noise;
pub mod obstacle;
pub mod reflected;
pub mod replicas;

pub use coefficients::ScalarFn;
pub use coupling::{CouplingConfig, CouplingDiagnostics, MixingOrder};
pub use error::{Error, Result};
pub use grid::{CircleGrid, Field, WallPair};
pub use heat::{HeatPropagator, PropagatorKind};
pub use noise::{NoiseIncrement, NoiseSource, SeedSpec, SheetNoise, StreamTag};
pub use reflected::{PenalizedParams, Scheme, TrajectoryRecord};
