//! Bloom-filter shield: constant memory, zero false negatives by construction.
//! A false positive only ever blocks a fresh action, never permits a recorded
//! one, which is the safe direction to err in.

use super::ShieldKey;
use crate::seed::splitmix64;

/// Classic sizing: m = ceil(-n ln p / (ln 2)^2), k = max(1, round((m/n) ln 2)).
pub fn bloom_dimensions(expected_n: u64, target_fp: f64) -> (u64, u32) {
    assert!(expected_n >= 1, "expected insert count must be positive");
    assert!(
        target_fp > 0.0 && target_fp < 1.0,
        "false-positive rate must lie in (0, 1)"
    );
    let ln2 = std::f64::consts::LN_2;
    let m = (-(expected_n as f64) * target_fp.ln() / (ln2 * ln2)).ceil() as u64;
    let k = ((m as f64 / expected_n as f64) * ln2).round() as u32;
    (m.max(1), k.max(1))
}

#[derive(Debug, Clone)]
pub struct BloomShield {
    bits: Vec<u8>,
    m: u64,
    k: u32,
    inserted: u64,
    target_fp: f64,
}

impl PartialEq for BloomShield {
    // target_fp is construction metadata and not part of the wire format.
    fn eq(&self, other: &Self) -> bool {
        self.bits == other.bits
            && self.m == other.m
            && self.k == other.k
            && self.inserted == other.inserted
    }
}

impl BloomShield {
    pub fn with_expected(expected_n: u64, target_fp: f64) -> Self {
        let (m, k) = bloom_dimensions(expected_n, target_fp);
        Self::with_dimensions(m, k, target_fp)
    }

    pub fn with_dimensions(m: u64, k: u32, target_fp: f64) -> Self {
        assert!(m >= 1 && k >= 1);
        BloomShield {
            bits: vec![0u8; m.div_ceil(8) as usize],
            m,
            k,
            inserted: 0,
            target_fp,
        }
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn target_fp(&self) -> f64 {
        self.target_fp
    }

    pub fn bit_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub(crate) fn from_parts(bits: Vec<u8>, m: u64, k: u32, inserted: u64) -> Self {
        // The wire format does not carry the requested rate; 2^-k is the
        // design point the sizing formula targets.
        BloomShield {
            bits,
            m,
            k,
            inserted,
            target_fp: 0.5f64.powi(k as i32),
        }
    }

    /// True means safe: at least one probed bit is clear, so the key was
    /// definitely never recorded.
    pub fn query(&self, key: &ShieldKey) -> bool {
        let (h1, h2) = hash_pair(&key.to_bytes());
        (0..self.k as u64).any(|i| !self.get(index_at(h1, h2, i, self.m)))
    }

    pub fn record(&mut self, key: &ShieldKey) {
        let (h1, h2) = hash_pair(&key.to_bytes());
        for i in 0..self.k as u64 {
            self.set(index_at(h1, h2, i, self.m));
        }
        self.inserted += 1;
    }

    fn get(&self, bit: u64) -> bool {
        self.bits[(bit / 8) as usize] >> (bit % 8) & 1 == 1
    }

    fn set(&mut self, bit: u64) {
        self.bits[(bit / 8) as usize] |= 1 << (bit % 8);
    }
}

/// Double hashing: probe i lands at (h1 + i * h2) mod m. h2 is forced odd so
/// the probe sequence cannot degenerate.
fn index_at(h1: u64, h2: u64, i: u64, m: u64) -> u64 {
    h1.wrapping_add(i.wrapping_mul(h2 | 1)) % m
}

fn hash_pair(bytes: &[u8]) -> (u64, u64) {
    (
        hash64(bytes, 0x5bd1e995_9e3779b9),
        hash64(bytes, 0xc2b2ae35_85ebca6b),
    )
}

/// Seeded FNV-1a with a SplitMix64 finalizer. Stable across platforms and
/// versions, which keeps serialized filters portable.
fn hash64(bytes: &[u8], seed: u64) -> u64 {
    let mut h = seed ^ 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(h)
}
