//! Counter-based seed splitting: stream `k` of a master seed is independent
//! of how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// An independent child seed for the sub-task labelled `label`.
pub fn derive(seed: u64, label: u64) -> u64 {
    use rand::RngCore;
    stream(seed, label.wrapping_add(1 << 63)).next_u64()
}
