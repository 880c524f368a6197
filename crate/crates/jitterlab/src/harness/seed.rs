//! Deterministic derivation of per-task RNG seeds.
//!
//! Every random stream in an experiment is keyed by the master seed plus a
//! tag path (sweep parameters, trial index, stream purpose), so any subset
//! of trials reproduces exactly the rows it would produce inside the full
//! run, independent of scheduling order.

/// Stream purposes, used as the last tag of a derivation path.
pub const STREAM_SYNTH: u64 = 1;
pub const STREAM_GIBBS: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_HISTOGRAM: u64 = 4;
pub const STREAM_SIGNAL: u64 = 5;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the tags into the master seed, one splitmix64 round per tag.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = master;
    for &t in tags {
        s = mix(s.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t));
    }
    s
}
