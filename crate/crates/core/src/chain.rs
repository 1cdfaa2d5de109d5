//! Corridor diagnostic environment for credit assignment of safety labels.
//!
//! States s1..sn form a one-way chain; both actions advance. Reaching sn costs
//! -1000 and ends the episode, but by then the crash was decided long ago: the
//! only labeled mistakes are the actions taken at s1, the commit point. Later
//! steps are labeled safe even though they march into the penalty. A shield
//! trained here must therefore store the root-cause pair, not the crash pair.

use crate::pomdp::{
    ActionId, EnvError, EnvSpec, Environment, ObsLayout, Observation, OneHot, SafetyLabel,
    StateKey, Transition, CELL_FLOOR, KEY_LAYOUT_CHAIN, WINDOW,
};

pub const CHAIN_PENALTY: f64 = -1000.0;

#[derive(Debug)]
pub struct ChainEnv {
    n: u32,
    /// 1-based state index; `state == n` means terminal.
    state: u32,
    started: bool,
    spec: EnvSpec,
}

impl ChainEnv {
    /// `n` is the chain length including the terminal state. Needs n >= 2.
    pub fn new(n: u32) -> Self {
        assert!(n >= 2, "chain needs at least two states");
        let obs = ObsLayout {
            cluster_count: 1,
            goal_delta_scale: ((n - 1).max(1) as f64, 1.0),
        };
        ChainEnv {
            n,
            state: 1,
            started: false,
            spec: EnvSpec::new(2, 0.99, obs),
        }
    }

    pub fn len(&self) -> u32 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn key_of(index: u32) -> StateKey {
        let mut b = Vec::with_capacity(5);
        b.push(KEY_LAYOUT_CHAIN);
        b.extend_from_slice(&index.to_le_bytes());
        StateKey::from_bytes(b)
    }

    fn observe(&self) -> Observation {
        Observation {
            window: [[CELL_FLOOR; WINDOW]; WINDOW],
            goal_delta: ((self.n - self.state) as i64, 0),
            instance: OneHot::new(1, 0),
        }
    }

    /// Every (state, action) pair the ground-truth labeler marks catastrophic.
    pub fn catastrophic_set(&self) -> Vec<(StateKey, ActionId)> {
        vec![
            (Self::key_of(1), ActionId(0)),
            (Self::key_of(1), ActionId(1)),
        ]
    }
}

impl Environment for ChainEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Observation {
        self.state = 1;
        self.started = true;
        self.observe()
    }

    fn step(&mut self, action: ActionId) -> Result<Transition, EnvError> {
        if !self.started || self.state >= self.n {
            return Err(EnvError::EpisodeOver);
        }
        if action.index() >= self.spec.action_count {
            return Err(EnvError::InvalidAction {
                action: action.0,
                count: self.spec.action_count,
            });
        }
        let from = self.state;
        self.state += 1;
        let terminal = self.state == self.n;
        let label = if from == 1 {
            SafetyLabel::Catastrophic
        } else {
            SafetyLabel::Safe
        };
        Ok(Transition {
            obs: self.observe(),
            reward: if terminal { CHAIN_PENALTY } else { 0.0 },
            terminal,
            label,
            state_key: Self::key_of(from),
            action,
        })
    }

    fn state_key(&self) -> StateKey {
        Self::key_of(self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_lands_on_first_state_regardless_of_seed() {
        let mut env = ChainEnv::new(4);
        let a = env.reset(7);
        let b = env.reset(7);
        assert_eq!(a, b);
        assert_eq!(a.goal_delta, (3, 0));
        let c = env.reset(123456);
        assert_eq!(a, c);
    }

    #[test]
    fn first_step_is_the_only_labeled_mistake() {
        let mut env = ChainEnv::new(3);
        env.reset(0);
        let t1 = env.step(ActionId(0)).unwrap();
        assert_eq!(t1.label, SafetyLabel::Catastrophic);
        assert_eq!(t1.reward, 0.0);
        assert!(!t1.terminal);
        let t2 = env.step(ActionId(1)).unwrap();
        assert_eq!(t2.label, SafetyLabel::Safe);
        assert_eq!(t2.reward, CHAIN_PENALTY);
        assert!(t2.terminal);
    }

    #[test]
    fn both_actions_from_start_are_catastrophic() {
        for a in 0..2u8 {
            let mut env = ChainEnv::new(5);
            env.reset(0);
            let t = env.step(ActionId(a)).unwrap();
            assert_eq!(t.label, SafetyLabel::Catastrophic);
        }
    }

    #[test]
    fn labels_match_the_catastrophic_set_exactly() {
        let mut env = ChainEnv::new(6);
        let cat = env.catastrophic_set();
        env.reset(0);
        loop {
            let key = env.state_key();
            let action = ActionId(0);
            let t = env.step(action).unwrap();
            let in_set = cat.contains(&(key, action));
            assert_eq!(t.label.is_catastrophic(), in_set);
            if t.terminal {
                break;
            }
        }
    }

    #[test]
    fn stepping_a_finished_episode_errors() {
        let mut env = ChainEnv::new(2);
        env.reset(0);
        let t = env.step(ActionId(0)).unwrap();
        assert!(t.terminal);
        assert_eq!(env.step(ActionId(0)), Err(EnvError::EpisodeOver));
    }

    #[test]
    fn out_of_range_action_errors() {
        let mut env = ChainEnv::new(3);
        env.reset(0);
        assert_eq!(
            env.step(ActionId(2)),
            Err(EnvError::InvalidAction {
                action: 2,
                count: 2
            })
        );
    }

    #[test]
    fn keys_distinguish_states_and_are_fixed_width() {
        let mut env = ChainEnv::new(4);
        env.reset(0);
        let k1 = env.state_key();
        env.step(ActionId(0)).unwrap();
        let k2 = env.state_key();
        assert_ne!(k1, k2);
        assert_eq!(k1.len(), 5);
        assert_eq!(k2.len(), 5);
        assert_eq!(k1.as_bytes()[0], KEY_LAYOUT_CHAIN);
    }
}
