//! Lava gridworld: a fixed room where hazard placement is resampled every
//! episode from a long-tailed distribution, and the hazards are invisible.
//! The agent can only tell instances apart through a cluster-identity
//! component in the observation, so avoiding lava is a memory problem, not a
//! perception problem. That is precisely the gap a shield fills.

pub mod instance;

pub use instance::{
    total_config_count, InstanceDist, InstanceIndex, LavaConfig, LavaType, CLUSTER_CAP,
    TAIL_THRESHOLD,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pomdp::{
    ActionId, EnvError, EnvSpec, Environment, ObsLayout, Observation, OneHot, SafetyLabel,
    StateKey, Transition, CELL_FLOOR, CELL_OOB, CELL_WALL, KEY_LAYOUT_LAVAGRID, WINDOW,
};

pub const ACTION_TURN_LEFT: ActionId = ActionId(0);
pub const ACTION_TURN_RIGHT: ActionId = ActionId(1);
pub const ACTION_FORWARD: ActionId = ActionId(2);

pub const GOAL_REWARD: f64 = 10.0;
pub const LAVA_PENALTY: f64 = -1000.0;

/// Product of (1 - p) over eligible tiles the calibrated schedule must hit.
pub const LAVA_FREE_TARGET: f64 = 0.94;
pub const CALIBRATION_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum LavaGridError {
    #[error("bad layout: {0}")]
    BadLayout(String),
    #[error("schedule has {got} entries but the layout has {want} eligible tiles")]
    ScheduleLength { got: usize, want: usize },
    #[error("probability {0} outside [0, cap]")]
    BadProbability(f64),
    #[error("calibration infeasible: lava-free mass cannot reach {LAVA_FREE_TARGET} (closest {closest})")]
    InfeasibleCalibration { closest: f64 },
    #[error("goal index {got} out of range ({count} goals active)")]
    BadGoal { got: usize, count: usize },
    #[error("config references tile {0} beyond the eligible list")]
    BadConfigTile(u8),
    #[error("cannot place agent at ({0}, {1}): not a standable cell")]
    BadPlacement(u16, u16),
    #[error("state space too large to enumerate ({0} states, limit 1000000)")]
    StateSpaceTooLarge(usize),
}

/// Static room geometry. Instances only vary lava on the eligible tiles;
/// walls, start, and goals never move.
#[derive(Debug, Clone, PartialEq)]
pub struct LavaGridLayout {
    width: u16,
    height: u16,
    walls: Vec<bool>,
    start: (u16, u16),
    goals: Vec<(u16, u16)>,
    lava_eligible: Vec<(u16, u16)>,
    /// Ceiling on any single tile's lava probability.
    p_cap: f64,
    max_l1: u16,
    /// Cell index -> position in `lava_eligible`, for O(1) lava lookups.
    eligible_at: Vec<Option<u8>>,
    /// Shortest-path distance from start over floor, ignoring lava.
    path_dist: Vec<Option<u16>>,
}

impl LavaGridLayout {
    /// The reference room: 9x9 with a short interior wall segment, start in
    /// one corner, goal cells in the other three. Exactly 42 tiles can burn.
    pub fn full() -> Self {
        Self::new(
            9,
            9,
            &[(4, 3), (4, 4), (4, 5)],
            (1, 1),
            vec![(7, 7), (7, 1), (1, 7)],
            None,
        )
        .expect("reference layout is valid")
    }

    /// Scaled-down room for fast runs: 8x8, a 12-tile hazard band in the
    /// middle of the room, same three-corner goal arrangement.
    pub fn desk() -> Self {
        let band: Vec<(u16, u16)> = (2..=4)
            .flat_map(|y| (2..=5).map(move |x| (x, y)))
            .collect();
        Self::new(8, 8, &[], (1, 1), vec![(6, 6), (6, 1), (1, 6)], Some(band))
            .expect("desk layout is valid")
    }

    /// Minimal lava-free room for sanity checks on the learner itself.
    pub fn tiny() -> Self {
        Self::new(5, 5, &[], (1, 1), vec![(3, 3)], Some(Vec::new()))
            .expect("tiny layout is valid")
    }

    /// `eligible`: None means "every interior floor cell that is not start or
    /// a goal"; Some(list) names the burnable tiles explicitly.
    pub fn new(
        width: u16,
        height: u16,
        interior_walls: &[(u16, u16)],
        start: (u16, u16),
        goals: Vec<(u16, u16)>,
        eligible: Option<Vec<(u16, u16)>>,
    ) -> Result<Self, LavaGridError> {
        let bad = |m: String| Err(LavaGridError::BadLayout(m));
        if width < 3 || height < 3 {
            return bad(format!("{width}x{height} leaves no interior"));
        }
        let (w, h) = (width as usize, height as usize);
        let mut walls = vec![false; w * h];
        for x in 0..w {
            walls[x] = true;
            walls[(h - 1) * w + x] = true;
        }
        for y in 0..h {
            walls[y * w] = true;
            walls[y * w + w - 1] = true;
        }
        for &(x, y) in interior_walls {
            if x == 0 || y == 0 || x >= width - 1 || y >= height - 1 {
                return bad(format!("interior wall ({x}, {y}) on or outside the perimeter"));
            }
            walls[y as usize * w + x as usize] = true;
        }
        let is_wall = |p: (u16, u16)| walls[p.1 as usize * w + p.0 as usize];
        if is_wall(start) {
            return bad("start is a wall".into());
        }
        if goals.is_empty() {
            return bad("at least one goal required".into());
        }
        for &g in &goals {
            if g.0 >= width || g.1 >= height || is_wall(g) {
                return bad(format!("goal ({}, {}) is not a floor cell", g.0, g.1));
            }
            if g == start {
                return bad("goal coincides with start".into());
            }
        }
        let lava_eligible = match eligible {
            Some(list) => {
                for &c in &list {
                    if c.0 >= width || c.1 >= height || is_wall(c) {
                        return bad(format!("eligible tile ({}, {}) is not floor", c.0, c.1));
                    }
                    if c == start || goals.contains(&c) {
                        return bad("start and goals can never burn".into());
                    }
                }
                let mut dedup = list.clone();
                dedup.sort_unstable();
                dedup.dedup();
                if dedup.len() != list.len() {
                    return bad("duplicate eligible tiles".into());
                }
                list
            }
            None => {
                let mut list = Vec::new();
                for y in 1..height - 1 {
                    for x in 1..width - 1 {
                        let c = (x, y);
                        if !is_wall(c) && c != start && !goals.contains(&c) {
                            list.push(c);
                        }
                    }
                }
                list
            }
        };
        if lava_eligible.len() > u8::MAX as usize {
            return bad("too many eligible tiles".into());
        }

        let path_dist = bfs_from(&walls, width, height, start);
        for &g in &goals {
            if path_dist[g.1 as usize * w + g.0 as usize].is_none() {
                return bad(format!("goal ({}, {}) unreachable from start", g.0, g.1));
            }
        }
        for &c in &lava_eligible {
            if path_dist[c.1 as usize * w + c.0 as usize].is_none() {
                return bad(format!("eligible tile ({}, {}) unreachable", c.0, c.1));
            }
        }

        let mut eligible_at = vec![None; w * h];
        for (i, &(x, y)) in lava_eligible.iter().enumerate() {
            eligible_at[y as usize * w + x as usize] = Some(i as u8);
        }

        let floors: Vec<(u16, u16)> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .filter(|&p| !is_wall(p))
            .collect();
        let max_l1 = floors
            .iter()
            .flat_map(|a| floors.iter().map(move |b| l1(*a, *b)))
            .max()
            .unwrap_or(1)
            .max(1);

        Ok(LavaGridLayout {
            width,
            height,
            walls,
            start,
            goals,
            lava_eligible,
            p_cap: 0.5,
            max_l1,
            eligible_at,
            path_dist,
        })
    }

    /// Lowers the per-tile probability ceiling. Mostly a testing knob.
    pub fn with_p_cap(mut self, cap: f64) -> Self {
        assert!(cap > 0.0 && cap <= 0.5, "cap must lie in (0, 0.5]");
        self.p_cap = cap;
        self
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn start(&self) -> (u16, u16) {
        self.start
    }

    pub fn goals(&self) -> &[(u16, u16)] {
        &self.goals
    }

    pub fn lava_eligible(&self) -> &[(u16, u16)] {
        &self.lava_eligible
    }

    pub fn p_cap(&self) -> f64 {
        self.p_cap
    }

    pub fn max_l1(&self) -> u16 {
        self.max_l1
    }

    pub fn is_wall(&self, x: u16, y: u16) -> bool {
        self.walls[y as usize * self.width as usize + x as usize]
    }

    fn cell(&self, x: u16, y: u16) -> usize {
        y as usize * self.width as usize + x as usize
    }

    /// BFS distance from start, walls blocking, lava ignored.
    pub fn path_distance(&self, x: u16, y: u16) -> Option<u16> {
        self.path_dist[self.cell(x, y)]
    }
}

fn l1(a: (u16, u16), b: (u16, u16)) -> u16 {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

fn bfs_from(walls: &[bool], width: u16, height: u16, from: (u16, u16)) -> Vec<Option<u16>> {
    let w = width as usize;
    let mut dist = vec![None; w * height as usize];
    let mut queue = std::collections::VecDeque::new();
    dist[from.1 as usize * w + from.0 as usize] = Some(0);
    queue.push_back(from);
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[y as usize * w + x as usize].expect("visited");
        for (nx, ny) in neighbors(x, y, width, height) {
            let idx = ny as usize * w + nx as usize;
            if !walls[idx] && dist[idx].is_none() {
                dist[idx] = Some(d + 1);
                queue.push_back((nx, ny));
            }
        }
    }
    dist
}

fn neighbors(x: u16, y: u16, width: u16, height: u16) -> impl Iterator<Item = (u16, u16)> {
    [(1i32, 0i32), (0, 1), (-1, 0), (0, -1)]
        .into_iter()
        .filter_map(move |(dx, dy)| {
            let nx = x as i32 + dx;
            let ny = y as i32 + dy;
            (nx >= 0 && ny >= 0 && nx < i32::from(width) && ny < i32::from(height))
                .then_some((nx as u16, ny as u16))
        })
}

/// Per-tile lava probabilities growing exponentially with shortest-path
/// distance from start: p_i = min(cap, c * growth^d_i), with c solved
/// numerically so the lava-free product hits the calibration target. The
/// passed `p0` only seeds the bracket for the solve.
pub fn tile_schedule(
    layout: &LavaGridLayout,
    p0: f64,
    growth: f64,
) -> Result<Vec<f64>, LavaGridError> {
    if !(p0 > 0.0) || !p0.is_finite() {
        return Err(LavaGridError::BadProbability(p0));
    }
    if !(growth > 0.0) || !growth.is_finite() {
        return Err(LavaGridError::BadProbability(growth));
    }
    if layout.lava_eligible.is_empty() {
        return Ok(Vec::new());
    }
    let cap = layout.p_cap;
    let shapes: Vec<f64> = layout
        .lava_eligible
        .iter()
        .map(|&(x, y)| {
            let d = layout.path_distance(x, y).expect("eligible tiles reachable");
            growth.powi(i32::from(d))
        })
        .collect();
    let product = |c: f64| -> f64 {
        shapes
            .iter()
            .map(|&s| 1.0 - (c * s).min(cap))
            .product()
    };
    let floor = (1.0 - cap).powi(shapes.len() as i32);
    if floor > LAVA_FREE_TARGET + CALIBRATION_TOL {
        return Err(LavaGridError::InfeasibleCalibration { closest: floor });
    }
    let mut lo = 0.0f64;
    let mut hi = p0;
    let mut guard = 0;
    while product(hi) > LAVA_FREE_TARGET {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(LavaGridError::InfeasibleCalibration { closest: product(hi) });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if product(mid) > LAVA_FREE_TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let achieved = product(c);
    if (achieved - LAVA_FREE_TARGET).abs() > CALIBRATION_TOL {
        return Err(LavaGridError::InfeasibleCalibration { closest: achieved });
    }
    Ok(shapes.iter().map(|&s| (c * s).min(cap)).collect())
}

/// Uniform per-tile probability, no calibration. Used by the goal-cycling
/// protocol, which fixes the rate instead of the lava-free mass.
pub fn flat_schedule(layout: &LavaGridLayout, p: f64) -> Result<Vec<f64>, LavaGridError> {
    if !(0.0..=layout.p_cap).contains(&p) {
        return Err(LavaGridError::BadProbability(p));
    }
    Ok(vec![p; layout.lava_eligible.len()])
}

#[derive(Debug, Clone)]
pub struct LavaGridEnv {
    layout: LavaGridLayout,
    dist: InstanceDist,
    shaping_sign: f64,
    goal_count: usize,
    spec: EnvSpec,
    config: LavaConfig,
    lava_at: Vec<Option<LavaType>>,
    cluster: InstanceIndex,
    pos: (u16, u16),
    facing: u8,
    active_goal: u8,
    terminal: bool,
    started: bool,
}

impl LavaGridEnv {
    /// `goal_count` of 1 fixes the primary goal; more than 1 makes reset
    /// draw the active goal uniformly from the first `goal_count` goals.
    pub fn new(
        layout: LavaGridLayout,
        schedule: Vec<f64>,
        goal_count: usize,
        shaping_sign: f64,
    ) -> Result<Self, LavaGridError> {
        if schedule.len() != layout.lava_eligible.len() {
            return Err(LavaGridError::ScheduleLength {
                got: schedule.len(),
                want: layout.lava_eligible.len(),
            });
        }
        for &p in &schedule {
            if !(0.0..=layout.p_cap).contains(&p) {
                return Err(LavaGridError::BadProbability(p));
            }
        }
        if goal_count == 0 || goal_count > layout.goals.len() {
            return Err(LavaGridError::BadGoal {
                got: goal_count,
                count: layout.goals.len(),
            });
        }
        assert!(
            shaping_sign == 1.0 || shaping_sign == -1.0,
            "shaping sign is a direction, not a scale"
        );
        let dist = InstanceDist::build(schedule);
        let spec = EnvSpec::new(
            3,
            0.99,
            ObsLayout {
                cluster_count: dist.cluster_count(),
                goal_delta_scale: (
                    f64::from(layout.width - 1),
                    f64::from(layout.height - 1),
                ),
            },
        );
        let cells = layout.walls.len();
        let start = layout.start;
        Ok(LavaGridEnv {
            layout,
            dist,
            shaping_sign,
            goal_count,
            spec,
            config: LavaConfig::empty(),
            lava_at: vec![None; cells],
            cluster: InstanceIndex(0),
            pos: start,
            facing: 0,
            active_goal: 0,
            terminal: true,
            started: false,
        })
    }

    pub fn layout(&self) -> &LavaGridLayout {
        &self.layout
    }

    pub fn dist(&self) -> &InstanceDist {
        &self.dist
    }

    pub fn cluster(&self) -> InstanceIndex {
        self.cluster
    }

    pub fn config(&self) -> &LavaConfig {
        &self.config
    }

    pub fn active_goal(&self) -> usize {
        self.active_goal as usize
    }

    pub fn goal_count(&self) -> usize {
        self.goal_count
    }

    pub fn position(&self) -> (u16, u16) {
        self.pos
    }

    pub fn facing(&self) -> u8 {
        self.facing
    }

    /// Starts an episode on a caller-chosen configuration instead of a
    /// sampled one. This is how fixed instance pools and diagnostics drive
    /// the environment.
    pub fn reset_to(
        &mut self,
        config: LavaConfig,
        active_goal: usize,
    ) -> Result<Observation, LavaGridError> {
        if active_goal >= self.goal_count {
            return Err(LavaGridError::BadGoal {
                got: active_goal,
                count: self.goal_count,
            });
        }
        for &(tile, _) in config.iter() {
            if tile as usize >= self.layout.lava_eligible.len() {
                return Err(LavaGridError::BadConfigTile(tile));
            }
        }
        self.cluster = self.dist.classify(&config);
        self.install(config, active_goal as u8);
        Ok(self.observe())
    }

    /// Diagnostic: move the agent mid-episode. The target must be standable.
    pub fn set_state(&mut self, x: u16, y: u16, facing: u8) -> Result<(), LavaGridError> {
        let standable = self.started
            && !self.terminal
            && x < self.layout.width
            && y < self.layout.height
            && !self.layout.is_wall(x, y)
            && self.lava_at[self.layout.cell(x, y)].is_none()
            && self.goal_cell() != (x, y);
        if !standable {
            return Err(LavaGridError::BadPlacement(x, y));
        }
        self.pos = (x, y);
        self.facing = facing & 3;
        Ok(())
    }

    /// Key the environment would mint for an arbitrary agent pose in the
    /// current episode.
    pub fn state_key_at(&self, pos: (u16, u16), facing: u8) -> StateKey {
        let mut b = Vec::with_capacity(11);
        b.push(KEY_LAYOUT_LAVAGRID);
        b.extend_from_slice(&self.cluster.0.to_le_bytes());
        b.extend_from_slice(&pos.0.to_le_bytes());
        b.extend_from_slice(&pos.1.to_le_bytes());
        b.push(facing & 3);
        b.push(self.active_goal);
        StateKey::from_bytes(b)
    }

    /// Exhaustive ground truth for the current episode: every (state, action)
    /// pair from a reachable pose whose execution enters lava.
    pub fn catastrophic_set(&self) -> Result<Vec<(StateKey, ActionId)>, LavaGridError> {
        let standable: Vec<bool> = (0..self.layout.walls.len())
            .map(|i| {
                !self.layout.walls[i]
                    && self.lava_at[i].is_none()
                    && self.goal_cell()
                        != (
                            (i % self.layout.width as usize) as u16,
                            (i / self.layout.width as usize) as u16,
                        )
            })
            .collect();
        let states = standable.iter().filter(|&&s| s).count() * 4;
        if states > 1_000_000 {
            return Err(LavaGridError::StateSpaceTooLarge(states));
        }
        // Reachability: flood fill from start over standable cells.
        let mut seen = vec![false; standable.len()];
        let mut queue = std::collections::VecDeque::new();
        let start = self.layout.start;
        if standable[self.layout.cell(start.0, start.1)] {
            seen[self.layout.cell(start.0, start.1)] = true;
            queue.push_back(start);
        }
        while let Some((x, y)) = queue.pop_front() {
            for (nx, ny) in neighbors(x, y, self.layout.width, self.layout.height) {
                let idx = self.layout.cell(nx, ny);
                if standable[idx] && !seen[idx] {
                    seen[idx] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        let mut out = Vec::new();
        for y in 0..self.layout.height {
            for x in 0..self.layout.width {
                if !seen[self.layout.cell(x, y)] {
                    continue;
                }
                for facing in 0..4u8 {
                    let (dx, dy) = dir_vec(facing);
                    let nx = i32::from(x) + dx;
                    let ny = i32::from(y) + dy;
                    if nx < 0 || ny < 0 || nx >= i32::from(self.layout.width) || ny >= i32::from(self.layout.height) {
                        continue;
                    }
                    if self.lava_at[self.layout.cell(nx as u16, ny as u16)].is_some() {
                        out.push((self.state_key_at((x, y), facing), ACTION_FORWARD));
                    }
                }
            }
        }
        Ok(out)
    }

    fn install(&mut self, config: LavaConfig, active_goal: u8) {
        self.lava_at.iter_mut().for_each(|c| *c = None);
        for &(tile, t) in config.iter() {
            let (x, y) = self.layout.lava_eligible[tile as usize];
            self.lava_at[self.layout.cell(x, y)] = Some(t);
        }
        self.config = config;
        self.active_goal = active_goal;
        self.pos = self.layout.start;
        self.facing = 0;
        self.terminal = false;
        self.started = true;
    }

    fn goal_cell(&self) -> (u16, u16) {
        self.layout.goals[self.active_goal as usize]
    }

    fn shaping(&self, pos: (u16, u16)) -> f64 {
        self.shaping_sign * f64::from(l1(pos, self.goal_cell())) / f64::from(self.layout.max_l1)
    }

    fn observe(&self) -> Observation {
        let mut window = [[CELL_OOB; WINDOW]; WINDOW];
        let (fx, fy) = dir_vec(self.facing);
        let (rx, ry) = dir_vec((self.facing + 1) & 3);
        for (i, row) in window.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let ahead = 4 - i as i32;
                let side = j as i32 - 2;
                let x = i32::from(self.pos.0) + fx * ahead + rx * side;
                let y = i32::from(self.pos.1) + fy * ahead + ry * side;
                *cell = if x < 0
                    || y < 0
                    || x >= i32::from(self.layout.width)
                    || y >= i32::from(self.layout.height)
                {
                    CELL_OOB
                } else if self.layout.is_wall(x as u16, y as u16) {
                    CELL_WALL
                } else {
                    // Lava and goals both render as floor; hazards are
                    // invisible and the goal is carried by goal_delta.
                    CELL_FLOOR
                };
            }
        }
        let goal = self.goal_cell();
        Observation {
            window,
            goal_delta: (
                i64::from(goal.0) - i64::from(self.pos.0),
                i64::from(goal.1) - i64::from(self.pos.1),
            ),
            instance: OneHot::new(self.dist.cluster_count(), self.cluster.0 as usize),
        }
    }
}

fn dir_vec(facing: u8) -> (i32, i32) {
    match facing & 3 {
        0 => (1, 0),  // east
        1 => (0, 1),  // south
        2 => (-1, 0), // west
        _ => (0, -1), // north
    }
}

impl Environment for LavaGridEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Samples a fresh configuration (and, in goal-cycling mode, the active
    /// goal) from a stream derived only from `seed`.
    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (config, cluster) = self.dist.sample(&mut rng);
        let goal = if self.goal_count > 1 {
            rng.gen_range(0..self.goal_count) as u8
        } else {
            0
        };
        self.cluster = cluster;
        self.install(config, goal);
        self.observe()
    }

    fn step(&mut self, action: ActionId) -> Result<Transition, EnvError> {
        if !self.started || self.terminal {
            return Err(EnvError::EpisodeOver);
        }
        if action.index() >= self.spec.action_count {
            return Err(EnvError::InvalidAction {
                action: action.0,
                count: self.spec.action_count,
            });
        }
        let from_key = self.state_key();
        let mut reward;
        let mut label = SafetyLabel::Safe;
        match action {
            ACTION_TURN_LEFT => {
                self.facing = (self.facing + 3) & 3;
                reward = self.shaping(self.pos);
            }
            ACTION_TURN_RIGHT => {
                self.facing = (self.facing + 1) & 3;
                reward = self.shaping(self.pos);
            }
            _ => {
                let (dx, dy) = dir_vec(self.facing);
                let nx = i32::from(self.pos.0) + dx;
                let ny = i32::from(self.pos.1) + dy;
                let blocked = nx < 0
                    || ny < 0
                    || nx >= i32::from(self.layout.width)
                    || ny >= i32::from(self.layout.height)
                    || self.layout.is_wall(nx as u16, ny as u16);
                if blocked {
                    reward = self.shaping(self.pos);
                } else {
                    let target = (nx as u16, ny as u16);
                    if let Some(_t) = self.lava_at[self.layout.cell(target.0, target.1)] {
                        self.pos = target;
                        self.terminal = true;
                        reward = LAVA_PENALTY;
                        label = SafetyLabel::Catastrophic;
                    } else if target == self.goal_cell() {
                        self.pos = target;
                        self.terminal = true;
                        reward = GOAL_REWARD;
                    } else {
                        self.pos = target;
                        reward = self.shaping(self.pos);
                    }
                }
            }
        }
        // Guard against -0.0 leaking into serialized metrics.
        if reward == 0.0 {
            reward = 0.0;
        }
        Ok(Transition {
            obs: self.observe(),
            reward,
            terminal: self.terminal,
            label,
            state_key: from_key,
            action,
        })
    }

    fn state_key(&self) -> StateKey {
        self.state_key_at(self.pos, self.facing)
    }
}

#[cfg(test)]
mod tests;
