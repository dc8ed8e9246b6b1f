//! Seed derivation.
//!
//! Every random process gets its own generator seeded from the master seed
//! and the coordinates of the work item, so results do not depend on the
//! order in which workers pick up items.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate. ChaCha output is portable across
/// platforms and crate versions, which the byte-identical CSV contract needs.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `path` into `master` one coordinate at a time.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stream tags for [`derive`]; keep them distinct.
pub mod tag {
    pub const ANATOMY: u64 = 1;
    pub const SESSION: u64 = 2;
    pub const SHIFTS: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SUBSET: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const PRETRAIN: u64 = 8;
    pub const NOISE: u64 = 9;
    pub const TRAIN: u64 = 10;
}

/// Serde adapter for seeds in formats limited to signed 64-bit integers.
/// Values above `i64::MAX` are written as decimal strings; both forms load.
pub mod serde_u64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*v) {
            Ok(i) => Repr::Int(i),
            Err(_) => Repr::Text(v.to_string()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(i) => u64::try_from(i).map_err(|_| serde::de::Error::custom("seed must be non-negative")),
            Repr::Text(t) => t.parse().map_err(|_| serde::de::Error::custom(format!("bad seed {t:?}"))),
        }
    }
}
