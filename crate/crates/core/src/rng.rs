//! Per-replicate random streams.
//!
//! Replicate `r` of an ensemble always draws from stream `r` of the ChaCha8
//! generator keyed by the master seed, so results do not depend on how
//! replicates are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type WfRng = ChaCha8Rng;

pub fn replicate_rng(master_seed: u64, index: u64) -> WfRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}
