//! The learner: PPO over the flattened observation, with an optional shield
//! consulted at every action and taught by every catastrophe.

pub mod buffer;
pub mod net;
pub mod update;

pub use buffer::{normalize_advantages, RolloutBuffer, StepSample};
pub use net::{Adam, CheckpointError, Features, Forward, PolicyValueNet};
pub use update::{
    batch_grad, batch_loss, dist_entropy, masked_log_prob, masked_probs, ppo_update, softmax,
    BatchStats, UpdateStats,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::pomdp::{
    ActionId, ObsLayout, Observation, StateKey, Transition, CELL_CODE_COUNT, WINDOW,
};
use crate::seed;
use crate::shield::{apply_shield, ShieldError, ShieldHandle, ShieldKey, TabularShield};

/// Flattens an observation: one-hot per window cell code, goal offset scaled
/// into [-1, 1], then the instance-identity one-hot. Indices are strictly
/// increasing, which the sparse forward pass exploits.
pub fn featurize(obs: &Observation, layout: &ObsLayout) -> Features {
    assert_eq!(
        obs.instance.len, layout.cluster_count,
        "observation from a different instance distribution"
    );
    let mut active = Vec::with_capacity(WINDOW * WINDOW + 3);
    for (i, row) in obs.window.iter().enumerate() {
        for (j, &code) in row.iter().enumerate() {
            let base = (i * WINDOW + j) * CELL_CODE_COUNT;
            active.push(((base + code as usize) as u32, 1.0));
        }
    }
    let tail = WINDOW * WINDOW * CELL_CODE_COUNT;
    active.push((tail as u32, obs.goal_delta.0 as f64 / layout.goal_delta_scale.0));
    active.push((tail as u32 + 1, obs.goal_delta.1 as f64 / layout.goal_delta_scale.1));
    active.push(((tail + 2 + obs.instance.index) as u32, 1.0));
    Features {
        len: layout.feature_len(),
        active,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub hidden: usize,
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Steps collected before an update; the actual cut happens at the first
    /// step boundary at or past this count.
    pub segment: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            hidden: 64,
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            lr: 3e-4,
            epochs: 4,
            minibatch: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            segment: 2048,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("non-finite network output: logits {logits:?}, value {value}")]
    NonFiniteLogits { logits: Vec<f64>, value: f64 },
    #[error("non-finite loss {loss} at epoch {epoch}, minibatch {minibatch}; update aborted")]
    NonFiniteLoss {
        epoch: usize,
        minibatch: usize,
        loss: f64,
    },
    #[error("rollout buffer is empty")]
    EmptyBuffer,
    #[error("segment was cut mid-episode but no tail observation was provided")]
    MissingTailObservation,
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One catastrophic execution, in the order it happened.
#[derive(Debug, Clone, PartialEq)]
pub struct MistakeRecord {
    pub episode: u64,
    /// 0-based step within the episode.
    pub step: u64,
    pub key: ShieldKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Safe,
    Mistake { repeated: bool },
}

#[derive(Debug, Clone)]
struct Pending {
    features: Features,
    mask: Vec<bool>,
    action: u8,
    log_prob: f64,
    value: f64,
}

/// A PPO learner wired to a shield. With `ShieldHandle::None` this is plain
/// PPO; mistakes are still logged so the baselines report the same metrics.
#[derive(Debug)]
pub struct ShieldedAgent {
    net: PolicyValueNet,
    opt: Adam,
    cfg: PpoConfig,
    obs_layout: ObsLayout,
    shield: ShieldHandle,
    default_policy: Vec<f64>,
    action_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    buffer: RolloutBuffer,
    pending: Option<Pending>,
    mistake_log: Vec<MistakeRecord>,
    /// Exact record of this agent's own catastrophes, kept in every shield
    /// mode so "repeated" stays well-defined for unshielded baselines.
    seen: TabularShield,
    episode: u64,
    episodes_begun: u64,
    step_in_episode: u64,
    total_steps: u64,
    total_mistakes: u64,
    total_repeats: u64,
}

impl ShieldedAgent {
    pub fn new(
        action_count: usize,
        obs_layout: ObsLayout,
        cfg: PpoConfig,
        shield: ShieldHandle,
        seed_root: u64,
    ) -> Self {
        let input_len = obs_layout.feature_len();
        let net = PolicyValueNet::new(
            input_len,
            cfg.hidden,
            action_count,
            seed::derive(seed_root, &[1]),
        );
        let opt = Adam::new(cfg.lr, net.param_count());
        ShieldedAgent {
            opt,
            obs_layout,
            default_policy: vec![1.0 / action_count as f64; action_count],
            action_rng: ChaCha8Rng::seed_from_u64(seed::derive(seed_root, &[2])),
            update_rng: ChaCha8Rng::seed_from_u64(seed::derive(seed_root, &[3])),
            buffer: RolloutBuffer::new(),
            pending: None,
            mistake_log: Vec::new(),
            seen: TabularShield::new(),
            episode: 0,
            episodes_begun: 0,
            step_in_episode: 0,
            total_steps: 0,
            total_mistakes: 0,
            total_repeats: 0,
            net,
            cfg,
            shield,
        }
    }

    pub fn config(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn net(&self) -> &PolicyValueNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut PolicyValueNet {
        &mut self.net
    }

    pub fn shield(&self) -> &ShieldHandle {
        &self.shield
    }

    pub fn shield_mut(&mut self) -> &mut ShieldHandle {
        &mut self.shield
    }

    pub fn mistake_log(&self) -> &[MistakeRecord] {
        &self.mistake_log
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn total_mistakes(&self) -> u64 {
        self.total_mistakes
    }

    pub fn total_repeats(&self) -> u64 {
        self.total_repeats
    }

    pub fn buffered_steps(&self) -> usize {
        self.buffer.len()
    }

    pub fn begin_episode(&mut self) {
        assert!(self.pending.is_none(), "previous step has no outcome yet");
        self.episode = self.episodes_begun;
        self.episodes_begun += 1;
        self.step_in_episode = 0;
    }

    fn shield_mask(&mut self, state_key: &StateKey) -> Vec<bool> {
        (0..self.default_policy.len())
            .map(|a| {
                self.shield
                    .query(&ShieldKey::new(state_key.clone(), ActionId(a as u8)))
            })
            .collect()
    }

    fn shielded_probs(
        &mut self,
        state_key: &StateKey,
        obs: &Observation,
    ) -> Result<(Forward, Features, Vec<bool>, Vec<f64>), AgentError> {
        let features = featurize(obs, &self.obs_layout);
        let fwd = self.net.forward(&features);
        if !fwd.logits.iter().all(|z| z.is_finite()) || !fwd.value.is_finite() {
            return Err(AgentError::NonFiniteLogits {
                logits: fwd.logits.clone(),
                value: fwd.value,
            });
        }
        let mask = self.shield_mask(state_key);
        let probs = apply_shield(&softmax(&fwd.logits), &mask, &self.default_policy)?;
        Ok((fwd, features, mask, probs))
    }

    /// Samples an action from the shielded distribution and parks the step
    /// until `record_outcome` completes it.
    pub fn act(
        &mut self,
        state_key: &StateKey,
        obs: &Observation,
    ) -> Result<ActionId, AgentError> {
        assert!(self.pending.is_none(), "previous step has no outcome yet");
        let (fwd, features, mask, probs) = self.shielded_probs(state_key, obs)?;
        let u: f64 = self.action_rng.gen();
        let action = sample_index(&probs, u);
        let log_prob = masked_log_prob(&fwd.logits, &mask, &self.default_policy, action);
        self.pending = Some(Pending {
            features,
            mask,
            action: action as u8,
            log_prob,
            value: fwd.value,
        });
        Ok(ActionId(action as u8))
    }

    /// Mode of the shielded distribution (ties broken toward the lowest
    /// index). Pure evaluation: no sampling, no buffering, no recording.
    pub fn act_greedy(
        &mut self,
        state_key: &StateKey,
        obs: &Observation,
    ) -> Result<ActionId, AgentError> {
        let (_, _, _, probs) = self.shielded_probs(state_key, obs)?;
        let best = probs
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (k, &p)| {
                if p > acc.1 {
                    (k, p)
                } else {
                    acc
                }
            })
            .0;
        Ok(ActionId(best as u8))
    }

    /// Completes the pending step with the environment's verdict. Teaching
    /// the shield happens here, before any subsequent action is sampled.
    pub fn record_outcome(&mut self, t: &Transition, truncated: bool) -> StepOutcome {
        let pending = self.pending.take().expect("record_outcome without act");
        assert_eq!(
            pending.action, t.action.0,
            "outcome reported for a different action"
        );
        let episode_end = t.terminal || truncated;
        let bootstrap = if episode_end && !t.terminal {
            self.net.forward(&featurize(&t.obs, &self.obs_layout)).value
        } else {
            0.0
        };
        let outcome = if t.label.is_catastrophic() {
            let key = ShieldKey::new(t.state_key.clone(), t.action);
            let repeated = if self.shield.is_active() {
                !pending.mask[t.action.index()]
            } else {
                !self.seen.query(&key)
            };
            self.total_mistakes += 1;
            if repeated {
                self.total_repeats += 1;
            }
            self.mistake_log.push(MistakeRecord {
                episode: self.episode,
                step: self.step_in_episode,
                key: key.clone(),
            });
            self.shield.record(key.clone());
            self.seen.record(key);
            StepOutcome::Mistake { repeated }
        } else {
            StepOutcome::Safe
        };
        self.buffer.push(StepSample {
            features: pending.features,
            action: pending.action,
            mask: pending.mask,
            log_prob: pending.log_prob,
            value: pending.value,
            reward: t.reward,
            terminal: t.terminal,
            episode_end,
            bootstrap,
        });
        self.total_steps += 1;
        self.step_in_episode += 1;
        outcome
    }

    pub fn ready_to_update(&self) -> bool {
        self.buffer.len() >= self.cfg.segment
    }

    /// Finishes the buffer and runs the PPO epochs. `cut_obs` must be the
    /// live observation when the segment was cut mid-episode.
    pub fn update(&mut self, cut_obs: Option<&Observation>) -> Result<UpdateStats, AgentError> {
        if self.buffer.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        let tail = if self.buffer.needs_tail_value() {
            let obs = cut_obs.ok_or(AgentError::MissingTailObservation)?;
            Some(self.net.forward(&featurize(obs, &self.obs_layout)).value)
        } else {
            None
        };
        self.buffer.finish(self.cfg.gamma, self.cfg.lam, tail);
        let stats = ppo_update(
            &mut self.net,
            &mut self.opt,
            &self.buffer,
            self.cfg.clip,
            self.cfg.epochs,
            self.cfg.minibatch,
            self.cfg.value_coef,
            self.cfg.entropy_coef,
            &self.default_policy,
            &mut self.update_rng,
        )?;
        self.buffer.clear();
        Ok(stats)
    }

    /// Header plus one line per catastrophe; keys serialized as lowercase hex.
    pub fn write_mistake_log<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "episode,step,key")?;
        for r in &self.mistake_log {
            writeln!(w, "{},{},{}", r.episode, r.step, hex(&r.key.to_bytes()))?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> std::io::Result<()> {
        self.net.save_to_path(path)
    }

    /// Restores network parameters. The optimizer restarts cold: checkpoints
    /// carry parameters only.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), AgentError> {
        let net = PolicyValueNet::load_from_path(path)?;
        if net.input_len() != self.net.input_len()
            || net.hidden() != self.net.hidden()
            || net.action_count() != self.net.action_count()
        {
            return Err(AgentError::Checkpoint(CheckpointError::BadShape));
        }
        self.opt = Adam::new(self.cfg.lr, net.param_count());
        self.net = net;
        Ok(())
    }
}

/// Inverse-CDF draw; the uniform comes from the caller's stream. Rounding
/// that pushes `u` past the final cumulative bin falls back to the last
/// positive-probability action.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("distribution has positive mass")
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
