//! Deterministic seed derivation. Every RNG in the workbench is a ChaCha
//! stream seeded through these mixers, so runs replay exactly.

/// SplitMix64 finalizer. Good avalanche, stable across platforms.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Folds an ordered list of tags into one stream seed.
pub fn derive(root: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(root);
    for &t in tags {
        acc = splitmix64(acc ^ t.wrapping_mul(0x9e3779b97f4a7c15));
    }
    acc
}
