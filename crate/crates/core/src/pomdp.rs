//! Shared environment contract: states, observations, transitions, and the
//! trait every environment in the workbench implements.
//!
//! Environments are partially observable and carry a ground-truth safety
//! labeler: every transition reports whether the action just taken was
//! catastrophic. Shields consume those labels; agents never see the full state.

use thiserror::Error;

/// Index into an environment's action set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionId(pub u8);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Canonical fixed-layout byte encoding of an environment's discrete state.
///
/// Byte 0 is a layout tag (see `docs/formats.md`); the remaining fields are
/// little-endian and fixed-width per layout. Keys from the same environment
/// family always have equal length, which the shield file format relies on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateKey(Vec<u8>);

/// Layout tag for lava gridworld keys.
pub const KEY_LAYOUT_LAVAGRID: u8 = 1;
/// Layout tag for chain diagnostic keys.
pub const KEY_LAYOUT_CHAIN: u8 = 2;

impl StateKey {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        StateKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cell codes visible in an observation window. Lava is deliberately absent:
/// hazards are never rendered, only experienced.
pub const CELL_FLOOR: u8 = 0;
pub const CELL_WALL: u8 = 1;
pub const CELL_OOB: u8 = 2;
pub const CELL_CODE_COUNT: usize = 3;

/// Side length of the egocentric observation window.
pub const WINDOW: usize = 5;

/// One-hot vector stored as (length, hot index); materialized on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHot {
    pub len: usize,
    pub index: usize,
}

impl OneHot {
    pub fn new(len: usize, index: usize) -> Self {
        assert!(index < len, "one-hot index out of range");
        OneHot { len, index }
    }

    pub fn to_vec(self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.index] = 1.0;
        v
    }
}

/// What the agent sees each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `window[row][col]`, agent at the bottom-center cell (row 4, col 2),
    /// rows ordered far-to-near along the facing direction.
    pub window: [[u8; WINDOW]; WINDOW],
    /// Offset to the active goal in grid coordinates (dx, dy), not rotated.
    pub goal_delta: (i64, i64),
    /// Identity of the instance cluster the current episode was drawn from.
    pub instance: OneHot,
}

/// Ground-truth verdict on a single executed action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafetyLabel {
    Catastrophic,
    Safe,
}

impl SafetyLabel {
    pub fn is_catastrophic(self) -> bool {
        matches!(self, SafetyLabel::Catastrophic)
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub reward: f64,
    pub terminal: bool,
    pub label: SafetyLabel,
    /// Key of the state the action was taken from, plus that action.
    /// Together they form exactly the record a shield stores.
    pub state_key: StateKey,
    pub action: ActionId,
}

/// Shape of the flattened observation an agent trains on.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsLayout {
    pub cluster_count: usize,
    /// Per-dimension divisor that maps `goal_delta` into [-1, 1].
    pub goal_delta_scale: (f64, f64),
}

impl ObsLayout {
    /// Window one-hot block, two goal-delta entries, then the instance one-hot.
    pub fn feature_len(&self) -> usize {
        WINDOW * WINDOW * CELL_CODE_COUNT + 2 + self.cluster_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub action_count: usize,
    pub discount: f64,
    pub obs: ObsLayout,
}

impl EnvSpec {
    pub fn new(action_count: usize, discount: f64, obs: ObsLayout) -> Self {
        assert!(action_count >= 2, "environments need at least two actions");
        assert!(
            discount > 0.0 && discount <= 1.0,
            "discount must lie in (0, 1]"
        );
        EnvSpec {
            action_count,
            discount,
            obs,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("episode already terminal; call reset before stepping again")]
    EpisodeOver,
    #[error("action index {action} out of range (action_count = {count})")]
    InvalidAction { action: u8, count: usize },
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;

    /// Starts a fresh episode. Same seed, same episode: observations must be
    /// byte-identical across calls.
    fn reset(&mut self, seed: u64) -> Observation;

    fn step(&mut self, action: ActionId) -> Result<Transition, EnvError>;

    /// Key of the current (post-reset or post-step) state.
    fn state_key(&self) -> StateKey;
}
