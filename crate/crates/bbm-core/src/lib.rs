//! Simulation and rare-event estimation for binary branching Brownian
//! motion: exact event-driven simulation, the large-deviation parameter
//! calculus, path observables, a spine-based importance sampler for
//! line-hitting probabilities, and the statistics used to verify them.

pub mod bridge;
pub mod error;
pub mod estimators;
pub mod observables;
pub mod params;
pub mod rng;
pub mod simulator;
pub mod spine;
pub mod stats;

pub use error::{Error, Result};
pub use observables::{LevelPair, MinRecord};
pub use simulator::{simulate, CrossingMode, ParticleTree, SimConfig};
pub use stats::{Accumulator, Estimate};

/// Double-precision parameter bundle; the calculus itself is generic over
/// the scalar type.
pub type LdpParams = params::LdpParamsT<f64>;
