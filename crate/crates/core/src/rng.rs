//! Seeding helpers and serializable generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// SplitMix64 finalizer over `(seed, index)`; used for per-sample seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const STATE_LEN: usize = 32 + 8 + 16;

/// Seed, stream and word position, enough to resume the exact sequence.
pub fn encode_state(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(STATE_LEN);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn decode_state(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != STATE_LEN {
        return Err(Error::invalid(format!(
            "rng state must be {STATE_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let seed: [u8; 32] = bytes[..32].try_into().unwrap();
    let stream = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
    let pos = u128::from_le_bytes(bytes[40..56].try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}
