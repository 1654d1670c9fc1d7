//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed, a domain tag and an identity. Streams never depend on iteration
//! order, so reordering agents does not perturb anyone's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Domains keep independent uses of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Noise = 1,
    Coefficients = 2,
    Harness = 3,
}

pub fn stream(seed: u64, domain: Domain, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 16 bits of domain, 48 bits of identity.
    rng.set_stream(((domain as u64) << 48) ^ (id & 0xFFFF_FFFF_FFFF));
    rng
}
