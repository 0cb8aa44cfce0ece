//! Branching random walk in a random environment on ℤ.
//!
//! Particles perform a rate-one simple random walk and split in two at a
//! site-dependent rate ξ(x), with ξ drawn i.i.d. per site. This crate
//! computes the environment-dependent centering of the first hitting time
//! of level `n` and provides the simulation and Monte Carlo machinery to
//! check it:
//!
//! * [`env`]: i.i.d. environments, persisted as versioned JSON.
//! * [`tilt`]: per-level log moment generating functions of hitting times,
//!   the annealed tilt parameter and the centering arrays `K`, `W`, `ξ²`, `σ²`.
//! * [`barrier`]: barrier profiles and the Gaussian barrier-probability
//!   engine that yields `p_n` and the centering `m_n`.
//! * [`walker`]: exact sampling of the tilted single walk via an h-transform.
//! * [`brw`]: exact event-driven simulation of the particle system.
//! * [`experiments`]: annealed experiment drivers and result emission.
//!
//! The deterministic numerics are generic over the scalar type; the aliases
//! at the crate root fix them to `f64` (and `f32` where it is useful).

pub mod barrier;
pub mod brw;
pub mod env;
pub mod error;
pub mod experiments;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tilt;
pub mod walker;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PhiProfile64 = tilt::PhiProfile<f64>;
pub type PhiProfile32 = tilt::PhiProfile<f32>;
pub type PhiDerivatives64 = tilt::PhiDerivatives<f64>;
pub type CenteringTable64 = tilt::CenteringTable<f64>;
pub type CenteringTable32 = tilt::CenteringTable<f32>;
pub type GaussLaw64 = barrier::GaussLaw<f64>;
pub type BarrierProfile64 = barrier::BarrierProfile<f64>;
pub type BarrierProfile32 = barrier::BarrierProfile<f32>;
pub type BarrierEvent64 = barrier::BarrierEvent<f64>;
pub type EmpiricalDistribution64 = stats::EmpiricalDistribution<f64>;

/// Smallest admissible integer starting height `y0 ≥ e + 1`.
pub const MIN_Y0: i64 = 4;
