//! Denoising Markov models on Euclidean space, finite discrete spaces, SO(3)
//! and the probability simplex.
//!
//! Every state space shares the same ingredients: a forward noising process
//! run on a rescaled clock ([`schedule::RateSchedule`]), a learned
//! approximation of its time reversal, a score-matching loss, and a sampler.
//! The [`verify`] module checks the structural identities on brute-forceable
//! discrete models.

pub mod discrete;
pub mod error;
pub mod euclidean;
pub mod experiment;
pub mod linalg;
pub mod nn;
pub mod process;
pub mod rng;
pub mod schedule;
pub mod simplex;
pub mod so3;
pub mod verify;

pub use error::{Error, Result};
pub use process::{kl_discrete, phi_discrete, DiscreteDistribution, DiscreteGenerator};
pub use rng::RngStream;
pub use schedule::RateSchedule;
