//! Counter-based random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream keyed on
//! `(seed, purpose)` and selected by an integer stream id. Streams are
//! independent of each other, so adding a new consumer (a new class, a new
//! batch) never shifts the numbers another consumer sees, and results are
//! identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Returns the stream `index` of the generator keyed on `(seed, purpose)`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> StreamRng {
    let mut state = seed ^ fnv1a(purpose);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Packs two counters into one stream id.
pub fn pair(a: u64, b: u64) -> u64 {
    (a << 32) ^ (b & 0xFFFF_FFFF)
}
