//! The long-tailed distribution over lava configurations.
//!
//! Each eligible tile independently catches lava with its scheduled
//! probability, and burning tiles draw a type. The number of distinct
//! configurations is astronomical (4 options per tile), so episodes are
//! identified by probability cluster instead: every configuration probable
//! enough to matter gets its own id, everything else shares one tail id.
//! The clustering is computed analytically from the schedule, not sampled.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::Rng;

/// Probability below which a configuration falls into the tail cluster.
pub const TAIL_THRESHOLD: f64 = 2e-8;
/// Upper bound on cluster count, tail included.
pub const CLUSTER_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LavaType {
    Red,
    Blue,
    Purple,
}

impl LavaType {
    /// Conditional probability of each type given the tile has lava.
    pub fn weight(self) -> f64 {
        match self {
            LavaType::Red => 0.94,
            LavaType::Blue => 0.05,
            LavaType::Purple => 0.01,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LavaType::Red => "red",
            LavaType::Blue => "blue",
            LavaType::Purple => "purple",
        }
    }

    fn from_option_index(i: u8) -> Option<LavaType> {
        match i {
            0 => None,
            1 => Some(LavaType::Red),
            2 => Some(LavaType::Blue),
            3 => Some(LavaType::Purple),
            _ => unreachable!("option index is 0..4"),
        }
    }
}

/// Sparse lava assignment: (tile index into the layout's eligible list, type),
/// sorted by tile index. The canonical form makes configs hashable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LavaConfig {
    cells: Vec<(u8, LavaType)>,
}

impl LavaConfig {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_cells(mut cells: Vec<(u8, LavaType)>) -> Self {
        cells.sort_by_key(|&(i, _)| i);
        cells.dedup_by_key(|&mut (i, _)| i);
        LavaConfig { cells }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u8, LavaType)> {
        self.cells.iter()
    }

    pub fn lava_cell_count(&self) -> usize {
        self.cells.len()
    }
}

/// Identity of the probability cluster an episode's configuration belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceIndex(pub u32);

/// Exact number of distinct configurations over `n` tiles (4 options each).
pub fn total_config_count(n: u32) -> u128 {
    assert!(n <= 63, "count overflows u128");
    1u128 << (2 * n)
}

#[derive(Debug, Clone)]
pub struct InstanceDist {
    tile_probs: Vec<f64>,
    /// Named clusters in descending probability; index == cluster id.
    named: Vec<(LavaConfig, f64)>,
    index: HashMap<LavaConfig, u32>,
}

impl InstanceDist {
    /// Enumerates every configuration with probability >= the tail threshold
    /// (best-first over the product weights), assigns ids in descending
    /// probability, and reserves the final id for the tail.
    pub fn build(tile_probs: Vec<f64>) -> Self {
        assert!(
            tile_probs.iter().all(|p| (0.0..1.0).contains(p)),
            "tile probabilities must lie in [0, 1)"
        );
        let n = tile_probs.len();
        assert!(n <= u8::MAX as usize, "tile index fits u8");

        // Per-tile option weights, descending: no lava, red, blue, purple.
        // p < 1/1.94 keeps "no lava" the most likely option; the schedule cap
        // guarantees that, and the assert guards it.
        let weights: Vec<[f64; 4]> = tile_probs
            .iter()
            .map(|&p| {
                let w = [
                    1.0 - p,
                    p * LavaType::Red.weight(),
                    p * LavaType::Blue.weight(),
                    p * LavaType::Purple.weight(),
                ];
                assert!(w[0] >= w[1], "schedule cap keeps lava-free most likely");
                w
            })
            .collect();

        let mut named: Vec<(LavaConfig, f64)> = Vec::new();
        let empty_prob: f64 = weights.iter().map(|w| w[0]).product();

        struct Cand {
            prob: f64,
            options: Vec<u8>,
        }
        impl PartialEq for Cand {
            fn eq(&self, other: &Self) -> bool {
                self.cmp_key(other) == Ordering::Equal
            }
        }
        impl Eq for Cand {}
        impl Cand {
            fn cmp_key(&self, other: &Self) -> Ordering {
                // Higher probability wins; ties broken lexicographically so
                // enumeration order (and thus cluster ids) is deterministic.
                self.prob
                    .total_cmp(&other.prob)
                    .then_with(|| other.options.cmp(&self.options))
            }
        }
        impl PartialOrd for Cand {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp_key(other))
            }
        }
        impl Ord for Cand {
            fn cmp(&self, other: &Self) -> Ordering {
                self.cmp_key(other)
            }
        }

        let mut heap = BinaryHeap::new();
        if n > 0 {
            heap.push(Cand {
                prob: empty_prob,
                options: vec![0u8; n],
            });
        } else {
            named.push((LavaConfig::empty(), 1.0));
        }

        while let Some(Cand { prob, options }) = heap.pop() {
            if prob < TAIL_THRESHOLD || named.len() == CLUSTER_CAP - 1 {
                break;
            }
            let config = LavaConfig {
                cells: options
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &o)| {
                        LavaType::from_option_index(o).map(|t| (i as u8, t))
                    })
                    .collect(),
            };
            named.push((config, prob));

            // Children: deepen the last modified tile, or start modifying any
            // later tile. Every configuration has exactly one parent under
            // "decrement the last nonzero option", so nothing repeats.
            let last = options.iter().rposition(|&o| o != 0);
            let from = last.unwrap_or(0);
            if let Some(l) = last {
                if options[l] < 3 {
                    let mut v = options.clone();
                    v[l] += 1;
                    let p = prob / weights[l][options[l] as usize] * weights[l][v[l] as usize];
                    heap.push(Cand { prob: p, options: v });
                }
            }
            let start = if last.is_some() { from + 1 } else { 0 };
            for c in start..n {
                let mut v = options.clone();
                v[c] = 1;
                let p = prob / weights[c][0] * weights[c][1];
                heap.push(Cand { prob: p, options: v });
            }
        }

        let index = named
            .iter()
            .enumerate()
            .map(|(i, (c, _))| (c.clone(), i as u32))
            .collect();
        InstanceDist {
            tile_probs,
            named,
            index,
        }
    }

    /// Named clusters plus the tail.
    pub fn cluster_count(&self) -> usize {
        self.named.len() + 1
    }

    pub fn tail_cluster(&self) -> InstanceIndex {
        InstanceIndex(self.named.len() as u32)
    }

    pub fn classify(&self, config: &LavaConfig) -> InstanceIndex {
        self.index
            .get(config)
            .map(|&i| InstanceIndex(i))
            .unwrap_or_else(|| self.tail_cluster())
    }

    /// Exact probability of one configuration under the schedule.
    pub fn probability(&self, config: &LavaConfig) -> f64 {
        let mut prob = 1.0;
        let mut cells = config.iter().peekable();
        for (i, &p) in self.tile_probs.iter().enumerate() {
            match cells.peek() {
                Some(&&(tile, t)) if tile as usize == i => {
                    prob *= p * t.weight();
                    cells.next();
                }
                _ => prob *= 1.0 - p,
            }
        }
        assert!(cells.peek().is_none(), "config references unknown tiles");
        prob
    }

    pub fn tile_probs(&self) -> &[f64] {
        &self.tile_probs
    }

    pub fn named_configs(&self) -> &[(LavaConfig, f64)] {
        &self.named
    }

    /// Draws one configuration: per-tile Bernoulli, then a type for each
    /// burning tile. Consumes one uniform per tile plus one per lava cell, in
    /// tile order, so streams replay exactly.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (LavaConfig, InstanceIndex) {
        let mut cells = Vec::new();
        for (i, &p) in self.tile_probs.iter().enumerate() {
            if rng.gen::<f64>() < p {
                let u: f64 = rng.gen();
                let t = if u < 0.94 {
                    LavaType::Red
                } else if u < 0.99 {
                    LavaType::Blue
                } else {
                    LavaType::Purple
                };
                cells.push((i as u8, t));
            }
        }
        let config = LavaConfig { cells };
        let id = self.classify(&config);
        (config, id)
    }
}
