use alloc::vec::Vec;

use crate::StreamRng;

/// Anything that can draw points in `R^D`.
pub trait Sampler {
    fn dim(&self) -> usize;
    fn sample_one(&self, rng: &mut StreamRng) -> Vec<f64>;
}
