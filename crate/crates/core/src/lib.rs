//! Empowerment estimation for dynamical control systems.
//!
//! The dynamics around a state are represented as a linear Gaussian channel
//! `s_{t+H} = G(s_t) · a_t^H + η`. Empowerment is the capacity of that channel,
//! obtained from the singular values of `G` by water-filling. `G` comes from a
//! closed form (pendulum), finite differences of a simulator, or a learned
//! model; the resulting landscape drives an intrinsically motivated policy.

#[cfg(test)]
#[macro_use]
mod test_macros;

pub mod analytic;
pub mod capacity;
pub mod channel;
pub mod config;
pub mod envs;
pub mod error;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod persist;
pub mod policy;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

/// Version of the on-disk schemas (configs, params, CSV exports).
pub const SCHEMA_VERSION: u32 = 1;
