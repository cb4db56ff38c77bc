use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of one user seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub(crate) enum Domain {
    Mining = 1,
    Negatives = 2,
    Batches = 3,
    ValidationMining = 4,
    Universe = 5,
    Dmad = 6,
    Protocol = 7,
    Export = 8,
}

/// A generator for `(seed, domain, index)`; the index selects a ChaCha stream.
pub(crate) fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mixed = seed ^ (domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(index);
    rng
}
