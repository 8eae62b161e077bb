//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! whose seed is a pure function of the run seed and a path of identifiers
//! (stream name, iteration, episode, turn), so results never depend on
//! scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams hanging off the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Rollout,
    Curriculum,
    Trainer,
    Bounds,
    Eval,
    Policy,
    Model,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Rollout => 0x726f_6c6c,
            Stream::Curriculum => 0x6375_7272,
            Stream::Trainer => 0x7472_6169,
            Stream::Bounds => 0x626f_756e,
            Stream::Eval => 0x6576_616c,
            Stream::Policy => 0x706f_6c69,
            Stream::Model => 0x6d6f_6465,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`, order-sensitively.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream_seed(base: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(stream.tag());
    all.extend_from_slice(parts);
    derive_seed(base, &all)
}

pub fn rng_for(base: u64, stream: Stream, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(stream_seed(base, stream, parts))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stable 64-bit FNV-1a hash, used for feature hashing and text-derived ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
