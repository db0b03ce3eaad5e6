//! Seed fan-out. One master seed derives independent sub-seeds for the split,
//! parameter init, augmentation and batch order; streams for a particular
//! (epoch, batch, item) are derived from those, so a batch's randomness does
//! not depend on how many workers produced it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a path of integers into a base seed.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub split: u64,
    pub init: u64,
    pub augment: u64,
    pub order: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        SeedPlan {
            master,
            split: derive(master, &[1]),
            init: derive(master, &[2]),
            augment: derive(master, &[3]),
            order: derive(master, &[4]),
        }
    }
}
