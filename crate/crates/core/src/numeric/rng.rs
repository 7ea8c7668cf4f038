use rand::SeedableRng;

/// Session PRNG: ChaCha8 is counter based, seedable, and portable across platforms.
pub type SessionRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SessionRng {
    SessionRng::seed_from_u64(seed)
}

/// Independent child stream derived from `seed` and a label, so that adding
/// draws in one subsystem does not shift another.
pub fn stream(seed: u64, label: &str) -> SessionRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    SessionRng::seed_from_u64(seed ^ h.rotate_left(17))
}
