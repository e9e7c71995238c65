//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(seed, epoch, purpose)`, so adding or removing one consumer (an attack
//! with ε = 0, an extra evaluation) never shifts another's sequence, and a
//! run resumed at an epoch boundary replays exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Shuffle = 1,
    Augment = 2,
    TrainAttack = 3,
    EvalTrain = 4,
    EvalVal = 5,
    EvalTest = 6,
    Mask = 7,
    Surface = 8,
}

pub fn stream(seed: u64, epoch: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 8) | purpose as u64);
    rng
}
