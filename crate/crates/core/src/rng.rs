//! Counter-based seeding: every random draw is a pure function of
//! `(seed, iteration, purpose)`, so loops can be replayed or split freely.

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::field::Field;

/// What a draw is for. Each purpose gets an independent ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Timestep = 1,
    /// Noise for the current render's latent `z_t`.
    RenderNoise = 2,
    /// Noise for the source latent `ẑ_t` when noise is not shared.
    SourceNoise = 3,
    Oracle = 4,
}

pub fn derive(seed: u64, iter: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iter << 8) | purpose as u64);
    rng
}

pub fn standard_normal(seed: u64, iter: u64, purpose: Purpose, shape: &[usize]) -> Field {
    let mut rng = derive(seed, iter, purpose);
    Field::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng))
}
