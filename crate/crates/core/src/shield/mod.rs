//! Online-learned action shields.
//!
//! A shield is a set-like memory of (state, action) pairs that ended badly.
//! `query` answers "is this pair believed safe?", `record` adds a pair after
//! the environment labeled it catastrophic. Variants trade exactness for
//! memory: an exact table, an LRU-bounded table, a Bloom filter (never forgets
//! a recorded pair, may false-positive on fresh ones), and a trained logistic
//! scorer that generalizes across pairs.

mod bloom;
mod codec;
mod parametric;

pub use bloom::{bloom_dimensions, BloomShield};
pub use codec::ShieldCodecError;
pub use parametric::{bce_grad, bce_loss, key_features, train_parametric, ParametricShield};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::pomdp::{ActionId, StateKey};

/// A (state, action) pair, the unit every shield stores and answers about.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShieldKey {
    pub state: StateKey,
    pub action: ActionId,
}

impl ShieldKey {
    pub fn new(state: StateKey, action: ActionId) -> Self {
        ShieldKey { state, action }
    }

    /// State bytes followed by one action byte. Width is uniform within any
    /// one environment family, which the file format relies on.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.state.len() + 1);
        b.extend_from_slice(self.state.as_bytes());
        b.push(self.action.0);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ShieldError> {
        if bytes.len() < 2 {
            return Err(ShieldError::KeyTooShort(bytes.len()));
        }
        let (state, action) = bytes.split_at(bytes.len() - 1);
        Ok(ShieldKey {
            state: StateKey::from_bytes(state.to_vec()),
            action: ActionId(action[0]),
        })
    }

    pub fn byte_width(&self) -> usize {
        self.state.len() + 1
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ShieldError {
    #[error("probability vector of length {probs} does not match mask length {mask}")]
    LengthMismatch { probs: usize, mask: usize },
    #[error("input is not a probability vector (sum {sum}, entries must be >= 0 and sum to 1)")]
    NotAProbability { sum: f64 },
    #[error("serialized shield key needs at least 2 bytes, got {0}")]
    KeyTooShort(usize),
    #[error("shield keys have mixed byte widths ({0} vs {1})")]
    MixedKeyWidth(usize, usize),
    #[error("training needs at least one catastrophic example")]
    EmptyPositives,
    #[error("training classes overlap: a key appears as both catastrophic and safe")]
    OverlappingClasses,
    #[error("cannot merge: {0}")]
    Merge(String),
    #[error("this shield variant cannot be shared across workers")]
    NotShareable,
}

/// Exact memory. Never forgets, never false-positives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TabularShield {
    entries: BTreeSet<ShieldKey>,
    records_seen: u64,
}

impl TabularShield {
    pub fn new() -> Self {
        Self::default()
    }

    /// True means safe: the pair has never been recorded.
    pub fn query(&self, key: &ShieldKey) -> bool {
        !self.entries.contains(key)
    }

    pub fn record(&mut self, key: ShieldKey) {
        self.check_width(&key);
        self.records_seen += 1;
        self.entries.insert(key);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total `record` calls, duplicates included.
    pub fn records_seen(&self) -> u64 {
        self.records_seen
    }

    /// Ascending byte order; this is also the serialization order.
    pub fn iter(&self) -> impl Iterator<Item = &ShieldKey> {
        self.entries.iter()
    }

    /// Set union. Both sides must agree on key width.
    pub fn merge(&mut self, other: &TabularShield) -> Result<(), ShieldError> {
        if let (Some(a), Some(b)) = (self.key_width(), other.key_width()) {
            if a != b {
                return Err(ShieldError::MixedKeyWidth(a, b));
            }
        }
        for k in other.iter() {
            self.entries.insert(k.clone());
        }
        self.records_seen += other.records_seen;
        Ok(())
    }

    pub fn key_width(&self) -> Option<usize> {
        self.entries.iter().next().map(|k| k.byte_width())
    }

    fn check_width(&self, key: &ShieldKey) {
        if let Some(w) = self.key_width() {
            assert_eq!(
                w,
                key.byte_width(),
                "a shield stores keys from one environment family only"
            );
        }
    }
}

/// LRU-bounded memory: at capacity, the least recently queried-or-recorded
/// key is evicted. Single-owner by design (queries touch recency).
#[derive(Debug, Clone)]
pub struct BoundedShield {
    capacity: usize,
    last_touch: HashMap<ShieldKey, u64>,
    by_recency: BTreeMap<u64, ShieldKey>,
    tick: u64,
}

impl PartialEq for BoundedShield {
    // Absolute tick values are an implementation detail; logical state is the
    // capacity plus the keys in recency order.
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.iter_by_recency().eq(other.iter_by_recency())
    }
}

impl BoundedShield {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "capacity must be at least 1");
        BoundedShield {
            capacity,
            last_touch: HashMap::new(),
            by_recency: BTreeMap::new(),
            tick: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.last_touch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last_touch.is_empty()
    }

    /// True means safe. A hit refreshes the key's recency.
    pub fn query(&mut self, key: &ShieldKey) -> bool {
        if self.last_touch.contains_key(key) {
            self.touch(key.clone());
            false
        } else {
            true
        }
    }

    pub fn record(&mut self, key: ShieldKey) {
        if self.last_touch.contains_key(&key) {
            self.touch(key);
            return;
        }
        if self.last_touch.len() == self.capacity {
            if let Some((&oldest, _)) = self.by_recency.iter().next() {
                let victim = self.by_recency.remove(&oldest).expect("recency entry");
                self.last_touch.remove(&victim);
            }
        }
        self.touch(key);
    }

    fn touch(&mut self, key: ShieldKey) {
        if let Some(old) = self.last_touch.get(&key) {
            self.by_recency.remove(old);
        }
        self.tick += 1;
        self.last_touch.insert(key.clone(), self.tick);
        self.by_recency.insert(self.tick, key);
    }

    /// Keys least-recent first.
    pub fn iter_by_recency(&self) -> impl Iterator<Item = &ShieldKey> {
        self.by_recency.values()
    }
}

/// The variants behind one face, so harness and CLI code stay uniform.
#[derive(Debug, Clone, PartialEq)]
pub enum Shield {
    Tabular(TabularShield),
    Bounded(BoundedShield),
    Bloom(BloomShield),
    Parametric(ParametricShield),
}

impl Shield {
    /// True means safe. Takes `&mut` because the bounded variant refreshes
    /// recency on hits; the other variants never mutate here.
    pub fn query(&mut self, key: &ShieldKey) -> bool {
        match self {
            Shield::Tabular(s) => s.query(key),
            Shield::Bounded(s) => s.query(key),
            Shield::Bloom(s) => s.query(key),
            Shield::Parametric(s) => s.query(key),
        }
    }

    /// Note: recording into a parametric shield is a no-op; its scores are
    /// fixed by training.
    pub fn record(&mut self, key: ShieldKey) {
        match self {
            Shield::Tabular(s) => s.record(key),
            Shield::Bounded(s) => s.record(key),
            Shield::Bloom(s) => s.record(&key),
            Shield::Parametric(_) => {}
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Shield::Tabular(_) => "tabular",
            Shield::Bounded(_) => "bounded",
            Shield::Bloom(_) => "bloom",
            Shield::Parametric(_) => "parametric",
        }
    }

    /// Entry count for table-like variants, record count for bloom.
    pub fn logical_len(&self) -> usize {
        match self {
            Shield::Tabular(s) => s.len(),
            Shield::Bounded(s) => s.len(),
            Shield::Bloom(s) => s.inserted() as usize,
            Shield::Parametric(_) => 0,
        }
    }
}

/// One shield behind a lock, shared by many workers. Only the exact table and
/// the Bloom filter qualify: their queries are pure, so readers run in
/// parallel and every record/query interleaving is linearizable.
#[derive(Debug, Clone)]
pub struct SharedShield {
    inner: Arc<RwLock<Shield>>,
}

impl SharedShield {
    pub fn new(shield: Shield) -> Result<Self, ShieldError> {
        match shield {
            Shield::Tabular(_) | Shield::Bloom(_) => Ok(SharedShield {
                inner: Arc::new(RwLock::new(shield)),
            }),
            _ => Err(ShieldError::NotShareable),
        }
    }

    pub fn query(&self, key: &ShieldKey) -> bool {
        let guard = self.inner.read().expect("shield lock poisoned");
        match &*guard {
            Shield::Tabular(s) => s.query(key),
            Shield::Bloom(s) => s.query(key),
            _ => unreachable!("constructor admits tabular and bloom only"),
        }
    }

    pub fn record(&self, key: ShieldKey) {
        let mut guard = self.inner.write().expect("shield lock poisoned");
        guard.record(key);
    }

    /// Snapshot of the current state, for serialization at run end.
    pub fn snapshot(&self) -> Shield {
        self.inner.read().expect("shield lock poisoned").clone()
    }
}

/// What an agent holds: no shield at all, its own, or a handle to a shared one.
#[derive(Debug, Clone)]
pub enum ShieldHandle {
    None,
    Owned(Shield),
    Shared(SharedShield),
}

impl ShieldHandle {
    pub fn query(&mut self, key: &ShieldKey) -> bool {
        match self {
            ShieldHandle::None => true,
            ShieldHandle::Owned(s) => s.query(key),
            ShieldHandle::Shared(s) => s.query(key),
        }
    }

    pub fn record(&mut self, key: ShieldKey) {
        match self {
            ShieldHandle::None => {}
            ShieldHandle::Owned(s) => s.record(key),
            ShieldHandle::Shared(s) => s.record(key),
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, ShieldHandle::None)
    }

    pub fn snapshot(&self) -> Option<Shield> {
        match self {
            ShieldHandle::None => None,
            ShieldHandle::Owned(s) => Some(s.clone()),
            ShieldHandle::Shared(s) => Some(s.snapshot()),
        }
    }
}

/// Masks a policy distribution with per-action safety bits and renormalizes.
///
/// `mask[a] == true` means action `a` is believed safe. If every action is
/// masked out the caller's `default_policy` is returned unchanged. If the
/// safe actions exist but their total mass underflows to zero, the result is
/// uniform over the safe set.
pub fn apply_shield(
    probs: &[f64],
    mask: &[bool],
    default_policy: &[f64],
) -> Result<Vec<f64>, ShieldError> {
    if probs.len() != mask.len() || default_policy.len() != mask.len() {
        return Err(ShieldError::LengthMismatch {
            probs: probs.len().min(default_policy.len()),
            mask: mask.len(),
        });
    }
    check_distribution(probs)?;
    check_distribution(default_policy)?;

    if !mask.iter().any(|&m| m) {
        return Ok(default_policy.to_vec());
    }
    let z: f64 = probs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p)
        .sum();
    if z > 0.0 {
        Ok(probs
            .iter()
            .zip(mask)
            .map(|(p, &m)| if m { p / z } else { 0.0 })
            .collect())
    } else {
        let safe = mask.iter().filter(|&&m| m).count() as f64;
        Ok(mask
            .iter()
            .map(|&m| if m { 1.0 / safe } else { 0.0 })
            .collect())
    }
}

fn check_distribution(p: &[f64]) -> Result<(), ShieldError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(ShieldError::NotAProbability { sum });
    }
    Ok(())
}
