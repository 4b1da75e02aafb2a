use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent counter-based stream `index` of `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
