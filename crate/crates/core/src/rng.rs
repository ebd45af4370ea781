//! Seed splitting.
//!
//! Every command takes one master seed. Independent random streams are derived
//! from it by name: the stream seed is SplitMix64 applied to
//! `master ^ fnv1a64(name)`, and the stream itself is ChaCha8 seeded with that
//! value. Names in use: `scene/<index>`, `sparsify/<index>`, `split`,
//! `init/<network>`, `shuffle/<epoch>`, `delta-init`, `batches/<epoch>`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the stream called `name` under `master`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a64(name.as_bytes()))
}

/// Deterministic generator for the stream called `name` under `master`.
pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name))
}
