//! Deterministic seed derivation.
//!
//! Stage seeds are `master + fixed offset` (documented below); streams inside
//! an operation derive from the stage seed with a tag and index via a stable
//! mix, so per-item RNG is independent of iteration order and thread count.

/// Fixed per-stage offsets from the pipeline master seed. Re-running a stage
/// in isolation with `master + offset` reproduces its artifact bytes.
pub mod offsets {
    pub const CORPUS: u64 = 1;
    pub const EVAL_CORPUS: u64 = 2;
    pub const RLHF: u64 = 3;
    pub const IRL: u64 = 4;
    pub const IRL_RLHF: u64 = 5;
    pub const STAGED: u64 = 6;
    pub const STUDY: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent stream seed from `(base, tag, index)`.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ fnv1a(tag)) ^ index)
}
