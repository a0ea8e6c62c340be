//! Dense tensors, reverse-mode differentiation and Adam.

mod adam;
pub mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{Checkpoint, GradAccumulator, ParamRecord, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use scalar::Scalar;
pub use tape::{ConvGeometry, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used by every initialiser and sampler.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named component from a global seed.
pub fn substream(seed: u64, label: &str) -> SeededRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seeded_rng(seed ^ h.rotate_left(17))
}

/// Glorot-style scale for a `fan_in × fan_out` weight.
pub fn glorot_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// He scale for relu layers.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
