//! Safe-RL workbench: partially observable lava gridworlds, online-learned
//! action shields, a PPO learner wired to them, and the experiment harness
//! and CLI that drive reproducible runs.

pub mod chain;
pub mod cli;
pub mod harness;
pub mod lavagrid;
pub mod pomdp;
pub mod ppo;
pub mod seed;
pub mod shield;

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
