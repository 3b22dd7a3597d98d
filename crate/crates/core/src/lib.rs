//! Fictitious-play solver for mean-field flocking games.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled;
//! the only thing `std` changes is runtime SIMD detection in the matrix
//! kernels. All IO lives in the companion `flocknrl` crate.
//!
//! Layout:
//!
//! - [`env`]: flocking dynamics on a torus, obstacles, reward variants and
//!   the gym-style [`env::Environment`] trait.
//! - [`approx`]: multilayer perceptrons with exact reverse-mode gradients and
//!   an Adam optimizer.
//! - [`flows`]: rational-quadratic spline coupling flows for density
//!   estimation and sampling.
//! - [`sac`]: soft actor-critic best-response learner.
//! - [`fp`]: the fictitious-play outer loop.
//! - [`metrics`]: performance matrix and approximate exploitability.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod approx;
pub mod env;
pub mod flows;
pub mod fp;
pub mod math;
pub mod metrics;
pub mod rng;
pub mod sac;
pub mod sampler;

pub use rng::StreamRng;
pub use sampler::Sampler;
