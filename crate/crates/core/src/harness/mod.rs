//! Experiment driver: three protocols (single agent, a group of agents with a
//! choice of shield sharing, goal-cycling), per-episode metrics, and
//! byte-reproducible artifacts.

pub mod stats;

#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lavagrid::{
    flat_schedule, tile_schedule, InstanceDist, LavaConfig, LavaGridEnv, LavaGridError,
    LavaGridLayout,
};
use crate::pomdp::Environment;
use crate::ppo::{AgentError, PpoConfig, ShieldedAgent, StepOutcome};
use crate::seed::derive;
use crate::shield::{
    bloom_dimensions, BloomShield, BoundedShield, Shield, ShieldError, ShieldHandle, SharedShield,
    TabularShield,
};

pub use stats::{
    aggregate, final_quartile_return, mann_kendall_z, symlog, trend_non_increasing,
    windowed_mistake_rates, AggregateError, Summary, SummaryRow, MK_Z_95, SUMMARY_CSV_HEADER,
};

// Seed-stream tags. Everything a run touches derives from the run seed
// through these, so protocols never share streams by accident.
const TAG_AGENT_SLOT: u64 = 4;
const TAG_EPISODE: u64 = 1;
const TAG_AGENT_ROOT: u64 = 2;
const TAG_POOL: u64 = 3;
const TAG_EVAL: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Single,
    Multi,
    Goal,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Single => "single",
            Protocol::Multi => "multi",
            Protocol::Goal => "goal",
        }
    }
}

/// Sharing topology for the multi-agent protocol only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShieldMode {
    None,
    Individual,
    Shared,
}

impl ShieldMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ShieldMode::None => "none",
            ShieldMode::Individual => "individual",
            ShieldMode::Shared => "shared",
        }
    }
}

/// Which shield implementation each owning agent gets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShieldSpec {
    None,
    Tabular,
    Bounded { capacity: usize },
    Bloom { expected: u64, target_fp: f64 },
}

impl ShieldSpec {
    fn build(&self) -> Option<Shield> {
        match *self {
            ShieldSpec::None => None,
            ShieldSpec::Tabular => Some(Shield::Tabular(TabularShield::new())),
            ShieldSpec::Bounded { capacity } => {
                Some(Shield::Bounded(BoundedShield::new(capacity)))
            }
            ShieldSpec::Bloom {
                expected,
                target_fp,
            } => {
                let (m, k) = bloom_dimensions(expected, target_fp);
                Some(Shield::Bloom(BloomShield::with_dimensions(m, k, target_fp)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutName {
    Tiny,
    Desk,
    Full,
}

impl LayoutName {
    pub fn build(self) -> LavaGridLayout {
        match self {
            LayoutName::Tiny => LavaGridLayout::tiny(),
            LayoutName::Desk => LavaGridLayout::desk(),
            LayoutName::Full => LavaGridLayout::full(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutName::Tiny => "tiny",
            LayoutName::Desk => "desk",
            LayoutName::Full => "full",
        }
    }
}

/// How per-tile lava probabilities are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleSpec {
    /// Distance-growing probabilities calibrated so the lava-free mass hits
    /// its target.
    Calibrated { growth: f64 },
    /// Same probability on every eligible tile.
    Flat { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub layout: LayoutName,
    pub schedule: ScheduleSpec,
    /// +1.0 or -1.0; scales the per-step distance shaping term.
    pub shaping_sign: f64,
    /// 1 fixes the primary goal; >1 cycles goals uniformly per episode.
    pub goal_count: usize,
}

impl EnvConfig {
    pub fn schedule_probs(&self) -> Result<Vec<f64>, LavaGridError> {
        let layout = self.layout.build();
        match self.schedule {
            ScheduleSpec::Calibrated { growth } => tile_schedule(&layout, 1e-4, growth),
            ScheduleSpec::Flat { p } => flat_schedule(&layout, p),
        }
    }

    pub fn build_env(&self) -> Result<LavaGridEnv, LavaGridError> {
        let layout = self.layout.build();
        let probs = self.schedule_probs()?;
        LavaGridEnv::new(layout, probs, self.goal_count, self.shaping_sign)
    }
}

/// Greedy-probe evaluation cadence, goal protocol only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Probe after every this many episodes.
    pub every_episodes: u32,
    pub probes_per_goal: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub agent_count: usize,
    pub shield_mode: ShieldMode,
    pub shield: ShieldSpec,
    pub episodes: u32,
    /// None picks 4 * (width + height).
    pub max_steps: Option<usize>,
    pub env: EnvConfig,
    pub agent: PpoConfig,
    /// When set, episodes draw instances from a fixed pre-sampled pool of
    /// this size instead of fresh samples.
    pub instance_pool: Option<usize>,
    /// Worker threads for the multi protocol. 1 = sequential round-robin.
    /// Both schedules produce identical artifacts.
    pub workers: usize,
    pub eval: Option<EvalConfig>,
}

impl ExperimentConfig {
    /// Baseline single-agent run on the desk layout; callers override fields.
    pub fn single_default() -> Self {
        ExperimentConfig {
            protocol: Protocol::Single,
            seeds: vec![1, 2, 3, 4, 5],
            agent_count: 1,
            shield_mode: ShieldMode::None,
            shield: ShieldSpec::Tabular,
            episodes: 500,
            max_steps: None,
            env: EnvConfig {
                layout: LayoutName::Desk,
                schedule: ScheduleSpec::Calibrated { growth: 2.0 },
                shaping_sign: -1.0,
                goal_count: 1,
            },
            agent: PpoConfig::default(),
            instance_pool: None,
            workers: 1,
            eval: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::NoSeeds);
        }
        {
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                return Err(ConfigError::DuplicateSeeds);
            }
        }
        match self.protocol {
            Protocol::Multi => {
                if self.agent_count < 2 {
                    return Err(ConfigError::AgentCount(self.agent_count));
                }
                if self.shield_mode != ShieldMode::None && self.shield == ShieldSpec::None {
                    return Err(ConfigError::ShieldModeNeedsKind);
                }
                if self.shield_mode == ShieldMode::Shared {
                    // Fail now rather than mid-run if the kind cannot share.
                    if let Some(s) = self.shield.build() {
                        SharedShield::new(s).map_err(ConfigError::UnsharableShield)?;
                    }
                }
            }
            Protocol::Single | Protocol::Goal => {
                if self.agent_count != 1 {
                    return Err(ConfigError::AgentCount(self.agent_count));
                }
                if self.shield_mode != ShieldMode::None {
                    return Err(ConfigError::ShieldModeRequiresMulti);
                }
            }
        }
        if self.protocol == Protocol::Goal {
            if self.env.goal_count < 2 {
                return Err(ConfigError::GoalCount(self.env.goal_count));
            }
        } else if self.env.goal_count != 1 {
            return Err(ConfigError::GoalCount(self.env.goal_count));
        }
        if self.eval.is_some() && self.protocol != Protocol::Goal {
            return Err(ConfigError::EvalRequiresGoal);
        }
        if let Some(e) = self.eval {
            if e.every_episodes == 0 || e.probes_per_goal == 0 {
                return Err(ConfigError::EvalZero);
            }
        }
        if self.env.shaping_sign != 1.0 && self.env.shaping_sign != -1.0 {
            return Err(ConfigError::ShapingSign(self.env.shaping_sign));
        }
        if self.max_steps == Some(0) {
            return Err(ConfigError::ZeroMaxSteps);
        }
        if self.instance_pool == Some(0) {
            return Err(ConfigError::EmptyPool);
        }
        if self.workers == 0 {
            return Err(ConfigError::ZeroWorkers);
        }
        // Surface schedule/layout problems before any run starts.
        self.env.schedule_probs().map_err(ConfigError::Env)?;
        let layout = self.env.layout.build();
        if self.env.goal_count > layout.goals().len() {
            return Err(ConfigError::GoalCount(self.env.goal_count));
        }
        Ok(())
    }

    pub fn max_steps_effective(&self) -> usize {
        self.max_steps.unwrap_or_else(|| {
            let l = self.env.layout.build();
            4 * (l.width() as usize + l.height() as usize)
        })
    }

    /// Config identity ignoring the seed list; artifacts from different seeds
    /// of one experiment agree on this.
    pub fn matches_modulo_seeds(&self, other: &Self) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.seeds = Vec::new();
        b.seeds = Vec::new();
        a == b
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("seed list is empty")]
    NoSeeds,
    #[error("seed list contains duplicates")]
    DuplicateSeeds,
    #[error("agent_count {0} is invalid for this protocol")]
    AgentCount(usize),
    #[error("shield_mode is only meaningful for the multi protocol")]
    ShieldModeRequiresMulti,
    #[error("shield_mode individual/shared needs a shield kind other than none")]
    ShieldModeNeedsKind,
    #[error("shield kind cannot be shared: {0}")]
    UnsharableShield(ShieldError),
    #[error("goal_count {0} does not fit the protocol or layout")]
    GoalCount(usize),
    #[error("eval section is only meaningful for the goal protocol")]
    EvalRequiresGoal,
    #[error("eval cadence and probe count must be positive")]
    EvalZero,
    #[error("shaping_sign must be +1 or -1, got {0}")]
    ShapingSign(f64),
    #[error("max_steps must be positive")]
    ZeroMaxSteps,
    #[error("instance_pool must be positive when set")]
    EmptyPool,
    #[error("workers must be positive")]
    ZeroWorkers,
    #[error("environment config: {0}")]
    Env(LavaGridError),
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("environment: {0}")]
    Env(#[from] LavaGridError),
    #[error("environment step: {0}")]
    Step(#[from] crate::pomdp::EnvError),
    #[error("agent: {0}")]
    Agent(#[from] AgentError),
    #[error("protocol mismatch: expected {expected}, config says {got}")]
    ProtocolMismatch {
        expected: &'static str,
        got: &'static str,
    },
}

/// One CSV line. `mean_return` averages over the agents that ran this
/// episode index; counts sum over them; `mistake_rate` is cumulative over
/// the whole run so far.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_seed: u64,
    pub episode: u32,
    pub mean_return: f64,
    pub mistake_count: u64,
    pub step_count: u64,
    pub mistake_rate: f64,
    pub repeated_mistake_count: u64,
}

pub const METRICS_CSV_HEADER: &str =
    "run_seed,episode,mean_return,mistake_count,step_count,mistake_rate,repeated_mistake_count";

/// 17 significant digits, enough to round-trip any f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_seed,
            self.episode,
            fmt_f64(self.mean_return),
            self.mistake_count,
            self.step_count,
            fmt_f64(self.mistake_rate),
            self.repeated_mistake_count
        )
    }
}

/// Greedy-probe scores for one evaluation point of a goal run.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalEvalRow {
    pub episode: u32,
    /// Environment steps consumed by training when the probe ran.
    pub env_steps: u64,
    /// Success fraction per goal index.
    pub success: Vec<f64>,
}

pub const EVAL_CSV_HEADER_PREFIX: &str = "episode,env_steps";

/// Everything one (config, seed) run produces. The CSV text is the
/// reproducibility surface; wall_clock_secs is informational only.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    pub run_seed: u64,
    pub rows: Vec<MetricsRow>,
    /// Serialized final shields: one entry per owning agent under
    /// individual mode, a single entry under shared or single-agent shields,
    /// empty when unshielded.
    pub shields: Vec<Vec<u8>>,
    pub goal_evals: Vec<GoalEvalRow>,
    pub wall_clock_secs: f64,
}

impl RunArtifact {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(METRICS_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv_line());
            out.push('\n');
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let goals = self.config.env.goal_count;
        let mut out = String::from(EVAL_CSV_HEADER_PREFIX);
        for g in 0..goals {
            let _ = write!(out, ",success_goal{g}");
        }
        out.push('\n');
        for row in &self.goal_evals {
            let _ = write!(out, "{},{}", row.episode, row.env_steps);
            for s in &row.success {
                out.push(',');
                out.push_str(&fmt_f64(*s));
            }
            out.push('\n');
        }
        out
    }

    pub fn total_mistakes(&self) -> u64 {
        self.rows.iter().map(|r| r.mistake_count).sum()
    }

    pub fn total_repeats(&self) -> u64 {
        self.rows.iter().map(|r| r.repeated_mistake_count).sum()
    }

    pub fn total_steps(&self) -> u64 {
        self.rows.iter().map(|r| r.step_count).sum()
    }
}

/// Per-agent, per-episode tallies the rows are built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub ret: f64,
    pub steps: u64,
    pub mistakes: u64,
    pub repeats: u64,
    /// Episode ended on the goal tile.
    pub reached_goal: bool,
}

/// Instances fixed up front when the config asks for a pool. Goals still
/// vary per episode.
#[derive(Debug, Clone)]
struct InstancePool {
    configs: Vec<LavaConfig>,
}

impl InstancePool {
    fn sample(dist: &InstanceDist, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let configs = (0..size).map(|_| dist.sample(&mut rng).0).collect();
        InstancePool { configs }
    }

    fn pick(&self, round: u32) -> &LavaConfig {
        &self.configs[round as usize % self.configs.len()]
    }
}

/// Runs one training episode: act, step, record, with the policy update
/// deferred to the episode boundary so a group schedule can overlap private
/// updates without changing results.
fn run_episode(
    env: &mut LavaGridEnv,
    agent: &mut ShieldedAgent,
    episode_seed: u64,
    pool: Option<(&InstancePool, u32)>,
    max_steps: usize,
) -> Result<EpisodeStats, HarnessError> {
    let mut obs = match pool {
        Some((pool, round)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
            let goal = rng.gen_range(0..env.goal_count());
            env.reset_to(pool.pick(round).clone(), goal)?
        }
        None => env.reset(episode_seed),
    };
    agent.begin_episode();
    let mut stats = EpisodeStats {
        ret: 0.0,
        steps: 0,
        mistakes: 0,
        repeats: 0,
        reached_goal: false,
    };
    for step in 0..max_steps {
        let key = env.state_key();
        let action = agent.act(&key, &obs)?;
        let t = env.step(action)?;
        stats.ret += t.reward;
        stats.steps += 1;
        let truncated = !t.terminal && step + 1 == max_steps;
        match agent.record_outcome(&t, truncated) {
            StepOutcome::Safe => {}
            StepOutcome::Mistake { repeated } => {
                stats.mistakes += 1;
                if repeated {
                    stats.repeats += 1;
                }
            }
        }
        if t.terminal && t.reward > 0.0 {
            stats.reached_goal = true;
        }
        obs = t.obs;
        if t.terminal || truncated {
            break;
        }
    }
    Ok(stats)
}

/// Flushes the rollout buffer if it has reached the segment length. Called
/// at episode boundaries only, where the last stored step always carries its
/// own bootstrap, so no tail observation is needed.
fn maybe_update(agent: &mut ShieldedAgent) -> Result<(), HarnessError> {
    if agent.ready_to_update() {
        agent.update(None)?;
    }
    Ok(())
}

fn episode_seed(agent_seed: u64, round: u32) -> u64 {
    derive(agent_seed, &[TAG_EPISODE, u64::from(round)])
}

/// One agent slot's full stream: fresh env, fresh agent, `episodes` episodes.
/// The caller owns shield wiring. Returns per-episode stats.
fn run_agent_stream(
    cfg: &ExperimentConfig,
    agent_seed: u64,
    shield: ShieldHandle,
    pool: Option<&InstancePool>,
) -> Result<(Vec<EpisodeStats>, ShieldedAgent), HarnessError> {
    let mut env = cfg.env.build_env()?;
    let mut agent = ShieldedAgent::new(
        env.spec().action_count,
        env.spec().obs.clone(),
        cfg.agent.clone(),
        shield,
        derive(agent_seed, &[TAG_AGENT_ROOT]),
    );
    let max_steps = cfg.max_steps_effective();
    let mut stats = Vec::with_capacity(cfg.episodes as usize);
    for round in 0..cfg.episodes {
        let seed = episode_seed(agent_seed, round);
        stats.push(run_episode(
            &mut env,
            &mut agent,
            seed,
            pool.map(|p| (p, round)),
            max_steps,
        )?);
        maybe_update(&mut agent)?;
    }
    Ok((stats, agent))
}

fn rows_from_grid(run_seed: u64, grid: &[Vec<EpisodeStats>]) -> Vec<MetricsRow> {
    // grid[round][agent]
    let mut rows = Vec::with_capacity(grid.len());
    let mut cum_mistakes = 0u64;
    let mut cum_steps = 0u64;
    for (round, slots) in grid.iter().enumerate() {
        let n = slots.len() as f64;
        let mistakes: u64 = slots.iter().map(|s| s.mistakes).sum();
        let steps: u64 = slots.iter().map(|s| s.steps).sum();
        let repeats: u64 = slots.iter().map(|s| s.repeats).sum();
        cum_mistakes += mistakes;
        cum_steps += steps;
        rows.push(MetricsRow {
            run_seed,
            episode: round as u32,
            mean_return: slots.iter().map(|s| s.ret).sum::<f64>() / n,
            mistake_count: mistakes,
            step_count: steps,
            mistake_rate: if cum_steps == 0 {
                0.0
            } else {
                cum_mistakes as f64 / cum_steps as f64
            },
            repeated_mistake_count: repeats,
        });
    }
    rows
}

fn shield_bytes(agent: &ShieldedAgent) -> Option<Vec<u8>> {
    agent.shield().snapshot().map(|s| s.serialize())
}

fn make_pool(cfg: &ExperimentConfig, run_seed: u64) -> Result<Option<InstancePool>, HarnessError> {
    match cfg.instance_pool {
        None => Ok(None),
        Some(size) => {
            let dist = InstanceDist::build(cfg.env.schedule_probs()?);
            Ok(Some(InstancePool::sample(
                &dist,
                size,
                derive(run_seed, &[TAG_POOL]),
            )))
        }
    }
}

fn run_single_seed(cfg: &ExperimentConfig, run_seed: u64) -> Result<RunArtifact, HarnessError> {
    let started = Instant::now();
    let pool = make_pool(cfg, run_seed)?;
    let handle = match cfg.shield.build() {
        None => ShieldHandle::None,
        Some(s) => ShieldHandle::Owned(s),
    };
    let (stats, agent) = run_agent_stream(cfg, run_seed, handle, pool.as_ref())?;
    let grid: Vec<Vec<EpisodeStats>> = stats.into_iter().map(|s| vec![s]).collect();
    Ok(RunArtifact {
        config: cfg.clone(),
        run_seed,
        rows: rows_from_grid(run_seed, &grid),
        shields: shield_bytes(&agent).into_iter().collect(),
        goal_evals: Vec::new(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Greedy probes on fresh instances, one batch per goal. Leaves the agent's
/// learning state untouched.
fn greedy_probe(
    cfg: &ExperimentConfig,
    agent: &mut ShieldedAgent,
    probe_env: &mut LavaGridEnv,
    eval_seed: u64,
    probes_per_goal: u32,
    max_steps: usize,
) -> Result<Vec<f64>, HarnessError> {
    let goals = cfg.env.goal_count;
    let mut success = Vec::with_capacity(goals);
    for goal in 0..goals {
        let mut hits = 0u32;
        for probe in 0..probes_per_goal {
            let seed = derive(eval_seed, &[goal as u64, u64::from(probe)]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (config, _) = probe_env.dist().sample(&mut rng);
            let mut obs = probe_env.reset_to(config, goal)?;
            for _ in 0..max_steps {
                let key = probe_env.state_key();
                let action = agent.act_greedy(&key, &obs)?;
                let t = probe_env.step(action)?;
                obs = t.obs;
                if t.terminal {
                    if t.reward > 0.0 {
                        hits += 1;
                    }
                    break;
                }
            }
        }
        success.push(f64::from(hits) / f64::from(probes_per_goal));
    }
    Ok(success)
}

fn run_goal_seed(cfg: &ExperimentConfig, run_seed: u64) -> Result<RunArtifact, HarnessError> {
    let started = Instant::now();
    let pool = make_pool(cfg, run_seed)?;
    let handle = match cfg.shield.build() {
        None => ShieldHandle::None,
        Some(s) => ShieldHandle::Owned(s),
    };
    let mut env = cfg.env.build_env()?;
    let mut probe_env = env.clone();
    let mut agent = ShieldedAgent::new(
        env.spec().action_count,
        env.spec().obs.clone(),
        cfg.agent.clone(),
        handle,
        derive(run_seed, &[TAG_AGENT_ROOT]),
    );
    let max_steps = cfg.max_steps_effective();
    let mut stats = Vec::with_capacity(cfg.episodes as usize);
    let mut goal_evals = Vec::new();
    for round in 0..cfg.episodes {
        let seed = episode_seed(run_seed, round);
        stats.push(run_episode(
            &mut env,
            &mut agent,
            seed,
            pool.as_ref().map(|p| (p, round)),
            max_steps,
        )?);
        maybe_update(&mut agent)?;
        if let Some(eval) = cfg.eval {
            if (round + 1) % eval.every_episodes == 0 {
                let success = greedy_probe(
                    cfg,
                    &mut agent,
                    &mut probe_env,
                    derive(run_seed, &[TAG_EVAL, u64::from(round)]),
                    eval.probes_per_goal,
                    max_steps,
                )?;
                goal_evals.push(GoalEvalRow {
                    episode: round + 1,
                    env_steps: agent.total_steps(),
                    success,
                });
            }
        }
    }
    let grid: Vec<Vec<EpisodeStats>> = stats.into_iter().map(|s| vec![s]).collect();
    Ok(RunArtifact {
        config: cfg.clone(),
        run_seed,
        rows: rows_from_grid(run_seed, &grid),
        shields: shield_bytes(&agent).into_iter().collect(),
        goal_evals,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn agent_slot_seed(run_seed: u64, slot: usize) -> u64 {
    derive(run_seed, &[TAG_AGENT_SLOT, slot as u64])
}

/// Shield wiring for every agent slot of a multi run.
fn multi_handles(cfg: &ExperimentConfig) -> Result<Vec<ShieldHandle>, HarnessError> {
    let n = cfg.agent_count;
    Ok(match cfg.shield_mode {
        ShieldMode::None => (0..n).map(|_| ShieldHandle::None).collect(),
        ShieldMode::Individual => (0..n)
            .map(|_| match cfg.shield.build() {
                None => ShieldHandle::None,
                Some(s) => ShieldHandle::Owned(s),
            })
            .collect(),
        ShieldMode::Shared => {
            let inner = cfg
                .shield
                .build()
                .expect("validated: shared mode has a shield kind");
            let shared = SharedShield::new(inner).map_err(ConfigError::UnsharableShield)?;
            (0..n)
                .map(|_| ShieldHandle::Shared(shared.clone()))
                .collect()
        }
    })
}

/// Canonical multi schedule: agents take the same episode index in slot
/// order, so a shared shield entry recorded by slot i is visible to slot j>i
/// in the same round and to everyone afterwards.
fn run_multi_sequential(
    cfg: &ExperimentConfig,
    run_seed: u64,
) -> Result<(Vec<Vec<EpisodeStats>>, Vec<ShieldedAgent>), HarnessError> {
    let n = cfg.agent_count;
    let pool = make_pool(cfg, run_seed)?;
    let handles = multi_handles(cfg)?;
    let max_steps = cfg.max_steps_effective();
    let mut envs = Vec::with_capacity(n);
    let mut agents = Vec::with_capacity(n);
    for (slot, handle) in handles.into_iter().enumerate() {
        let env = cfg.env.build_env()?;
        let agent = ShieldedAgent::new(
            env.spec().action_count,
            env.spec().obs.clone(),
            cfg.agent.clone(),
            handle,
            derive(agent_slot_seed(run_seed, slot), &[TAG_AGENT_ROOT]),
        );
        envs.push(env);
        agents.push(agent);
    }
    let mut grid = Vec::with_capacity(cfg.episodes as usize);
    for round in 0..cfg.episodes {
        let mut slots = Vec::with_capacity(n);
        for slot in 0..n {
            let seed = episode_seed(agent_slot_seed(run_seed, slot), round);
            slots.push(run_episode(
                &mut envs[slot],
                &mut agents[slot],
                seed,
                pool.as_ref().map(|p| (p, round)),
                max_steps,
            )?);
            maybe_update(&mut agents[slot])?;
        }
        grid.push(slots);
    }
    Ok((grid, agents))
}

/// Turn-taking primitive for the threaded schedule. Guarded by position in
/// the round-robin order; `advance` wakes every waiter.
struct Baton {
    turn: Mutex<u64>,
    cv: Condvar,
}

impl Baton {
    fn new() -> Self {
        Baton {
            turn: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn wait_for(&self, slot: u64) {
        let mut turn = self.turn.lock().expect("baton lock");
        while *turn != slot {
            turn = self.cv.wait(turn).expect("baton wait");
        }
    }

    fn advance(&self) {
        let mut turn = self.turn.lock().expect("baton lock");
        *turn += 1;
        self.cv.notify_all();
    }
}

/// Threaded multi schedule. Environment interaction stays serialized in
/// round-robin order on the baton, which pins every shield read and write to
/// the canonical interleaving; only private policy updates overlap. Output
/// is therefore identical to the sequential schedule.
fn run_multi_parallel(
    cfg: &ExperimentConfig,
    run_seed: u64,
) -> Result<(Vec<Vec<EpisodeStats>>, Vec<ShieldedAgent>), HarnessError> {
    let n = cfg.agent_count;
    let pool = make_pool(cfg, run_seed)?;
    let handles = multi_handles(cfg)?;
    let max_steps = cfg.max_steps_effective();
    let baton = Baton::new();
    let episodes = cfg.episodes;

    let mut results: Vec<Option<Result<(Vec<EpisodeStats>, ShieldedAgent), HarnessError>>> =
        (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut join = Vec::with_capacity(n);
        for (slot, handle) in handles.into_iter().enumerate() {
            let baton = &baton;
            let pool = pool.as_ref();
            join.push(scope.spawn(move || {
                let run = move || -> Result<(Vec<EpisodeStats>, ShieldedAgent), HarnessError> {
                    let mut env = cfg.env.build_env()?;
                    let mut agent = ShieldedAgent::new(
                        env.spec().action_count,
                        env.spec().obs.clone(),
                        cfg.agent.clone(),
                        handle,
                        derive(agent_slot_seed(run_seed, slot), &[TAG_AGENT_ROOT]),
                    );
                    let mut stats = Vec::with_capacity(episodes as usize);
                    for round in 0..episodes {
                        baton.wait_for(u64::from(round) * n as u64 + slot as u64);
                        let seed = episode_seed(agent_slot_seed(run_seed, slot), round);
                        let result = run_episode(
                            &mut env,
                            &mut agent,
                            seed,
                            pool.map(|p| (p, round)),
                            max_steps,
                        );
                        baton.advance();
                        stats.push(result?);
                        // Off the baton: touches only this agent's state.
                        maybe_update(&mut agent)?;
                    }
                    Ok((stats, agent))
                };
                run()
            }));
        }
        for (slot, j) in join.into_iter().enumerate() {
            results[slot] = Some(j.join().expect("agent worker panicked"));
        }
    });

    let mut per_agent = Vec::with_capacity(n);
    let mut agents = Vec::with_capacity(n);
    for r in results {
        let (stats, agent) = r.expect("every slot joined")?;
        per_agent.push(stats);
        agents.push(agent);
    }
    // Transpose to grid[round][agent].
    let grid = (0..episodes as usize)
        .map(|round| per_agent.iter().map(|s| s[round]).collect())
        .collect();
    Ok((grid, agents))
}

fn run_multi_seed(cfg: &ExperimentConfig, run_seed: u64) -> Result<RunArtifact, HarnessError> {
    let started = Instant::now();
    let (grid, agents) = if cfg.workers > 1 {
        run_multi_parallel(cfg, run_seed)?
    } else {
        run_multi_sequential(cfg, run_seed)?
    };
    let shields = match cfg.shield_mode {
        ShieldMode::None => Vec::new(),
        ShieldMode::Individual => agents.iter().filter_map(shield_bytes).collect(),
        // Every handle aliases one shield; serialize it once.
        ShieldMode::Shared => shield_bytes(&agents[0]).into_iter().collect(),
    };
    Ok(RunArtifact {
        config: cfg.clone(),
        run_seed,
        rows: rows_from_grid(run_seed, &grid),
        shields,
        goal_evals: Vec::new(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Entry point: validates, then runs every seed of the configured protocol.
/// One artifact per seed, in seed-list order.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunArtifact>, HarnessError> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .map(|&seed| match cfg.protocol {
            Protocol::Single => run_single_seed(cfg, seed),
            Protocol::Multi => run_multi_seed(cfg, seed),
            Protocol::Goal => run_goal_seed(cfg, seed),
        })
        .collect()
}

pub fn run_single(cfg: &ExperimentConfig) -> Result<Vec<RunArtifact>, HarnessError> {
    expect_protocol(cfg, Protocol::Single)?;
    run(cfg)
}

pub fn run_multi(cfg: &ExperimentConfig) -> Result<Vec<RunArtifact>, HarnessError> {
    expect_protocol(cfg, Protocol::Multi)?;
    run(cfg)
}

pub fn run_goal_conditioned(cfg: &ExperimentConfig) -> Result<Vec<RunArtifact>, HarnessError> {
    expect_protocol(cfg, Protocol::Goal)?;
    run(cfg)
}

fn expect_protocol(cfg: &ExperimentConfig, want: Protocol) -> Result<(), HarnessError> {
    if cfg.protocol != want {
        return Err(HarnessError::ProtocolMismatch {
            expected: want.as_str(),
            got: cfg.protocol.as_str(),
        });
    }
    Ok(())
}

/// Exposed for wiring-equivalence tests: the exact per-episode stats a
/// single agent slot produces under a given seed and shield.
pub fn agent_stream_stats(
    cfg: &ExperimentConfig,
    agent_seed: u64,
    shield: ShieldHandle,
) -> Result<Vec<EpisodeStats>, HarnessError> {
    let pool = make_pool(cfg, agent_seed)?;
    run_agent_stream(cfg, agent_seed, shield, pool.as_ref()).map(|(stats, _)| stats)
}
