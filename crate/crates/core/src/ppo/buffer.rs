//! Rollout storage and generalized advantage estimation.

use super::net::Features;

/// One executed step, frozen at collection time. `mask` is the shield
/// verdict snapshot the action was sampled under; the update must score the
/// action against the same mask or the importance ratio loses its meaning.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub features: Features,
    pub action: u8,
    pub mask: Vec<bool>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Environment said the episode is over (death or goal).
    pub terminal: bool,
    /// Terminal OR truncated by the step cap: the advantage chain stops here.
    pub episode_end: bool,
    /// Value estimate of the successor state when truncated mid-episode;
    /// unused (0) when terminal, because death bootstraps nothing.
    pub bootstrap: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    steps: Vec<StepSample>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    finished: bool,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, s: StepSample) {
        assert!(!self.finished, "buffer already finished; clear before reuse");
        self.steps.push(s);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[StepSample] {
        &self.steps
    }

    pub fn advantages(&self) -> &[f64] {
        assert!(self.finished);
        &self.advantages
    }

    pub fn returns(&self) -> &[f64] {
        assert!(self.finished);
        &self.returns
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// True when the final stored step did not end its episode, i.e. the
    /// segment was cut mid-episode and finishing requires a tail value.
    pub fn needs_tail_value(&self) -> bool {
        self.steps.last().map_or(false, |s| !s.episode_end)
    }

    /// Computes advantages by the backward recursion
    /// A_t = delta_t + gamma*lambda*A_{t+1} (chain broken at episode ends),
    /// delta_t = r_t + gamma*V(s_{t+1}) - V(s_t), with V(s_{t+1}) = 0 at
    /// terminals and the stored bootstrap at truncations. `tail_value` is
    /// V of the state following the last step when the segment was cut.
    pub fn finish(&mut self, gamma: f64, lam: f64, tail_value: Option<f64>) {
        assert!(!self.finished);
        let n = self.steps.len();
        self.advantages = vec![0.0; n];
        self.returns = vec![0.0; n];
        let mut carry = 0.0;
        for t in (0..n).rev() {
            let s = &self.steps[t];
            let next_value = if s.terminal {
                0.0
            } else if s.episode_end {
                s.bootstrap
            } else if t + 1 < n {
                self.steps[t + 1].value
            } else {
                tail_value.expect("segment cut mid-episode requires a tail value")
            };
            let delta = s.reward + gamma * next_value - s.value;
            carry = if s.episode_end {
                delta
            } else {
                delta + gamma * lam * carry
            };
            self.advantages[t] = carry;
            self.returns[t] = carry + s.value;
        }
        self.finished = true;
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.advantages.clear();
        self.returns.clear();
        self.finished = false;
    }
}

/// In-place normalization to mean 0, std 1 (population std, floored at 1e-8
/// so constant batches do not divide by zero).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / denom;
    }
}
