//! Simulation toolkit for distributed stochastic gradient descent with
//! heavy-ball momentum over gossip, periodic-averaging and elastic-averaging
//! topologies.
//!
//! The update executed by [`engine`] is
//!
//! ```text
//! v_n     = α v_{n-1} + ε_n G(X_n, ξ_n)
//! X_{n+1} = W_n (X_n - v_n)
//! ```
//!
//! where `W_n` is the mixing matrix on communication steps and the identity
//! otherwise.

pub mod error;
pub mod linalg;
pub mod objectives;
pub mod rng;
pub mod schedules;
pub mod topology;
pub mod analysis;
pub mod engine;

pub use error::{Error, Result};
