//! Deterministic random streams.
//!
//! Every (purpose, participant, day) triple gets its own ChaCha8 stream keyed
//! by the master seed, so results do not depend on evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Behavior = 1,
    Actions = 2,
}

/// Stream for one participant-day. Participant ids use 32 bits and days 24.
pub fn stream(master_seed: u64, purpose: Purpose, participant: u32, day: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let id = ((purpose as u64) << 56) | ((participant as u64) << 24) | (day as u64 & 0xFF_FFFF);
    rng.set_stream(id);
    rng
}

/// Derive an independent master seed, e.g. per replication or corpus.
pub fn derive_seed(master_seed: u64, salt: u64) -> u64 {
    let mut z = master_seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform on `[0, 1)` from the top 53 bits of one 64-bit draw.
pub fn uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn bernoulli<R: RngCore + ?Sized>(rng: &mut R, p: f64) -> bool {
    uniform(rng) < p
}
