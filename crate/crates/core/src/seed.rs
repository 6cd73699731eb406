//! Deterministic seed streams.
//!
//! Every stochastic component (chain, replicate run, simulated individual)
//! draws from its own generator seeded by `derive_seed(master, stream)`.
//! Results therefore do not depend on evaluation order or thread schedule,
//! and any sub-computation can be reproduced in isolation.

/// SplitMix64 finalizer. Decorrelates consecutive stream indices.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed for logical stream `stream` of a run with `master` seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(1)))
}
