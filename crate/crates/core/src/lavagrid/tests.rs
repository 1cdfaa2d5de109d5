use super::*;
use crate::pomdp::{Environment, CELL_FLOOR, CELL_OOB, CELL_WALL};
use std::collections::BTreeSet;

fn desk_env() -> LavaGridEnv {
    let layout = LavaGridLayout::desk();
    let sched = tile_schedule(&layout, 0.005, 1.0).unwrap();
    LavaGridEnv::new(layout, sched, 1, -1.0).unwrap()
}

#[test]
fn full_layout_geometry() {
    let l = LavaGridLayout::full();
    assert_eq!(l.width(), 9);
    assert_eq!(l.height(), 9);
    assert_eq!(l.start(), (1, 1));
    assert_eq!(l.goals(), &[(7, 7), (7, 1), (1, 7)]);
    assert_eq!(l.lava_eligible().len(), 42);
    assert!(l.is_wall(4, 3) && l.is_wall(4, 4) && l.is_wall(4, 5));
    assert!(l.is_wall(0, 0) && l.is_wall(8, 8) && l.is_wall(4, 0));
    assert_eq!(l.max_l1(), 12);
    // Start, goals, walls never appear among eligible tiles.
    for &c in l.lava_eligible() {
        assert_ne!(c, (1, 1));
        assert!(!l.goals().contains(&c));
        assert!(!l.is_wall(c.0, c.1));
    }
    // The wall segment is thin enough to route around monotonically, so
    // shortest-path distance stays at L1 everywhere.
    assert_eq!(l.path_distance(5, 4), Some(7));
    assert_eq!(l.path_distance(7, 7), Some(12));
    assert_eq!(l.path_distance(4, 3), None); // walls have no distance
}

#[test]
fn desk_layout_geometry() {
    let l = LavaGridLayout::desk();
    assert_eq!((l.width(), l.height()), (8, 8));
    assert_eq!(l.lava_eligible().len(), 12);
    assert_eq!(l.goals(), &[(6, 6), (6, 1), (1, 6)]);
    assert_eq!(l.max_l1(), 10);
    let band: BTreeSet<(u16, u16)> = (2..=4u16)
        .flat_map(|y| (2..=5u16).map(move |x| (x, y)))
        .collect();
    let actual: BTreeSet<(u16, u16)> = l.lava_eligible().iter().copied().collect();
    assert_eq!(actual, band);
}

#[test]
fn tiny_layout_is_lava_free() {
    let l = LavaGridLayout::tiny();
    assert!(l.lava_eligible().is_empty());
    assert_eq!(l.max_l1(), 4);
    assert_eq!(tile_schedule(&l, 0.005, 1.0).unwrap(), Vec::<f64>::new());
}

#[test]
fn layout_validation_rejects_nonsense() {
    let bad = |r: Result<LavaGridLayout, LavaGridError>| {
        assert!(matches!(r, Err(LavaGridError::BadLayout(_))));
    };
    bad(LavaGridLayout::new(2, 5, &[], (1, 1), vec![(1, 3)], None));
    bad(LavaGridLayout::new(5, 5, &[], (0, 0), vec![(3, 3)], None));
    bad(LavaGridLayout::new(5, 5, &[], (1, 1), vec![], None));
    bad(LavaGridLayout::new(5, 5, &[], (1, 1), vec![(1, 1)], None));
    bad(LavaGridLayout::new(5, 5, &[(4, 2)], (1, 1), vec![(3, 3)], None));
    // Goal sealed off by walls.
    bad(LavaGridLayout::new(
        7,
        7,
        &[(4, 1), (4, 2), (4, 3), (4, 4), (4, 5), (5, 5)],
        (1, 1),
        vec![(5, 1)],
        Some(vec![]),
    ));
    // Eligible tile on the start cell.
    bad(LavaGridLayout::new(
        5,
        5,
        &[],
        (1, 1),
        vec![(3, 3)],
        Some(vec![(1, 1)]),
    ));
    // Duplicate eligible tiles.
    bad(LavaGridLayout::new(
        5,
        5,
        &[],
        (1, 1),
        vec![(3, 3)],
        Some(vec![(2, 2), (2, 2)]),
    ));
}

#[test]
fn uniform_schedule_matches_closed_form() {
    let l = LavaGridLayout::full();
    let sched = tile_schedule(&l, 0.005, 1.0).unwrap();
    assert_eq!(sched.len(), 42);
    let expected = 1.0 - LAVA_FREE_TARGET.powf(1.0 / 42.0);
    for &p in &sched {
        assert!((p - expected).abs() < 1e-9, "{p} vs {expected}");
    }
    let product: f64 = sched.iter().map(|&p| 1.0 - p).product();
    assert!((product - LAVA_FREE_TARGET).abs() <= CALIBRATION_TOL);
}

#[test]
fn growing_schedule_calibrates_and_orders_by_distance() {
    let l = LavaGridLayout::full();
    let sched = tile_schedule(&l, 0.005, 2.0).unwrap();
    let product: f64 = sched.iter().map(|&p| 1.0 - p).product();
    assert!((product - LAVA_FREE_TARGET).abs() <= CALIBRATION_TOL);
    let cells = l.lava_eligible();
    for i in 0..cells.len() {
        assert!(sched[i] > 0.0 && sched[i] <= l.p_cap());
        for j in 0..cells.len() {
            let di = l.path_distance(cells[i].0, cells[i].1).unwrap();
            let dj = l.path_distance(cells[j].0, cells[j].1).unwrap();
            if di < dj {
                assert!(sched[i] <= sched[j] + 1e-15);
            }
        }
    }
    // Growth spreads the rates: nearest and farthest tiles must differ.
    let (lo, hi) = sched
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    assert!(hi > lo * 4.0);
}

#[test]
fn calibration_infeasible_under_tight_cap() {
    let l = LavaGridLayout::desk().with_p_cap(0.001);
    match tile_schedule(&l, 0.0005, 1.0) {
        Err(LavaGridError::InfeasibleCalibration { closest }) => {
            let floor = 0.999f64.powi(12);
            assert!((closest - floor).abs() < 1e-12);
        }
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn flat_schedule_is_uniform_and_bounded() {
    let l = LavaGridLayout::desk();
    assert_eq!(flat_schedule(&l, 0.005).unwrap(), vec![0.005; 12]);
    assert!(matches!(
        flat_schedule(&l, 0.75),
        Err(LavaGridError::BadProbability(_))
    ));
    assert!(matches!(
        flat_schedule(&l, -0.1),
        Err(LavaGridError::BadProbability(_))
    ));
}

#[test]
fn schedule_argument_validation() {
    let l = LavaGridLayout::desk();
    assert!(matches!(
        tile_schedule(&l, 0.0, 1.0),
        Err(LavaGridError::BadProbability(_))
    ));
    assert!(matches!(
        tile_schedule(&l, 0.005, f64::NAN),
        Err(LavaGridError::BadProbability(_))
    ));
    let sched = tile_schedule(&l, 0.005, 1.0).unwrap();
    assert!(matches!(
        LavaGridEnv::new(LavaGridLayout::full(), sched, 1, -1.0),
        Err(LavaGridError::ScheduleLength { got: 12, want: 42 })
    ));
}

#[test]
fn window_geometry_facing_east() {
    let mut env = desk_env();
    env.reset_to(LavaConfig::empty(), 0).unwrap();
    let obs = env.reset_to(LavaConfig::empty(), 0).unwrap();
    // Agent at (1, 1) facing east: window cell (i, j) covers (5 - i, j - 1).
    assert_eq!(obs.window[4][2], CELL_FLOOR); // self
    assert_eq!(obs.window[4][1], CELL_WALL); // (1, 0) top border
    assert_eq!(obs.window[4][0], CELL_OOB); // (1, -1)
    assert_eq!(obs.window[0][2], CELL_FLOOR); // (5, 1)
    assert_eq!(obs.window[0][0], CELL_OOB); // (5, -1)
    assert_eq!(obs.window[4][3], CELL_FLOOR); // (1, 2)
    for i in 0..WINDOW {
        assert_eq!(obs.window[i][1], CELL_WALL, "row y=0 is border wall");
        assert_eq!(obs.window[i][0], CELL_OOB, "row y=-1 is out of bounds");
    }
    assert_eq!(obs.goal_delta, (5, 5));
    assert_eq!(obs.instance.index, 0);
}

#[test]
fn window_geometry_facing_west() {
    let mut env = desk_env();
    env.reset_to(LavaConfig::empty(), 0).unwrap();
    env.set_state(1, 1, 3).unwrap();
    let obs = env.step(ACTION_TURN_LEFT).unwrap().obs; // now facing west
    // Facing west at (1, 1): fwd (-1, 0), right north (0, -1);
    // cell (i, j) covers (1 - (4 - i), 1 - (j - 2)) = (i - 3, 3 - j).
    assert_eq!(obs.window[4][2], CELL_FLOOR);
    assert_eq!(obs.window[3][2], CELL_WALL); // (0, 1) left border
    assert_eq!(obs.window[2][2], CELL_OOB); // (-1, 1)
    assert_eq!(obs.window[4][3], CELL_WALL); // (1, 0)
    assert_eq!(obs.window[4][1], CELL_FLOOR); // (1, 2)
    assert_eq!(obs.window[4][0], CELL_FLOOR); // (1, 3)
}

#[test]
fn interior_wall_is_visible() {
    let layout = LavaGridLayout::full();
    let sched = tile_schedule(&layout, 0.005, 1.0).unwrap();
    let mut env = LavaGridEnv::new(layout, sched, 1, -1.0).unwrap();
    let obs = env.reset_to(LavaConfig::empty(), 0).unwrap();
    // From (1, 1) facing east, (4, 3) lands at window[1][4].
    assert_eq!(obs.window[1][4], CELL_WALL);
    assert_eq!(obs.window[1][3], CELL_FLOOR); // (4, 2) is floor
}

#[test]
fn lava_and_goals_render_as_floor() {
    let mut env = desk_env();
    let tile0 = env.layout().lava_eligible()[0];
    assert_eq!(tile0, (2, 2));
    let with_lava = LavaConfig::from_cells(vec![(0, LavaType::Red)]);

    let plain = env.reset_to(LavaConfig::empty(), 0).unwrap();
    env.set_state(1, 2, 0).unwrap();
    let plain_here = env.state_key(); // pose fixed; compare windows below
    let obs_plain = env.step(ACTION_TURN_LEFT).unwrap().obs;

    let burning = env.reset_to(with_lava.clone(), 0).unwrap();
    env.set_state(1, 2, 0).unwrap();
    let obs_burning = env.step(ACTION_TURN_LEFT).unwrap().obs;

    // Same pose, lava directly ahead in one episode only: identical windows
    // and goal offsets, different instance identity.
    assert_eq!(obs_plain.window, obs_burning.window);
    assert_eq!(obs_plain.goal_delta, obs_burning.goal_delta);
    assert_ne!(obs_plain.instance.index, obs_burning.instance.index);
    assert_eq!(plain.window, burning.window);
    assert_ne!(plain_here, env.state_key_at((1, 2), 0)); // cluster differs in key
}

#[test]
fn turning_changes_facing_only() {
    let mut env = desk_env();
    env.reset_to(LavaConfig::empty(), 0).unwrap();
    assert_eq!(env.facing(), 0);
    env.step(ACTION_TURN_LEFT).unwrap();
    assert_eq!(env.facing(), 3);
    env.step(ACTION_TURN_RIGHT).unwrap();
    env.step(ACTION_TURN_RIGHT).unwrap();
    assert_eq!(env.facing(), 1);
    assert_eq!(env.position(), (1, 1));
}

#[test]
fn forward_into_wall_stays_put() {
    let mut env = desk_env();
    env.reset_to(LavaConfig::empty(), 0).unwrap();
    env.step(ACTION_TURN_LEFT).unwrap(); // facing north, border ahead
    let t = env.step(ACTION_FORWARD).unwrap();
    assert_eq!(env.position(), (1, 1));
    assert!(!t.terminal);
    assert_eq!(t.label, SafetyLabel::Safe);
    // Shaping at the unmoved position: -L1((1,1),(6,6)) / 10.
    assert!((t.reward - (-1.0)).abs() < 1e-12);
}

#[test]
fn tiny_walkthrough_rewards_frozen() {
    let layout = LavaGridLayout::tiny();
    let mut env = LavaGridEnv::new(layout, Vec::new(), 1, -1.0).unwrap();
    env.reset(7);
    let mut rewards = Vec::new();
    for a in [
        ACTION_FORWARD,
        ACTION_FORWARD,
        ACTION_TURN_RIGHT,
        ACTION_FORWARD,
        ACTION_FORWARD,
    ] {
        let t = env.step(a).unwrap();
        rewards.push((t.reward, t.terminal, t.label));
    }
    assert_eq!(
        rewards,
        vec![
            (-0.75, false, SafetyLabel::Safe),
            (-0.5, false, SafetyLabel::Safe),
            (-0.5, false, SafetyLabel::Safe),
            (-0.25, false, SafetyLabel::Safe),
            (10.0, true, SafetyLabel::Safe),
        ]
    );
    assert!(matches!(env.step(ACTION_FORWARD), Err(EnvError::EpisodeOver)));
}

#[test]
fn positive_shaping_flag_flips_sign() {
    let layout = LavaGridLayout::tiny();
    let mut env = LavaGridEnv::new(layout, Vec::new(), 1, 1.0).unwrap();
    env.reset(7);
    let t = env.step(ACTION_FORWARD).unwrap();
    assert!((t.reward - 0.75).abs() < 1e-12);
}

#[test]
fn stepping_into_lava_is_catastrophic() {
    let mut env = desk_env();
    let cfg = LavaConfig::from_cells(vec![(0, LavaType::Blue)]); // lava at (2, 2)
    env.reset_to(cfg, 0).unwrap();
    env.step(ACTION_FORWARD).unwrap(); // (2, 1)
    env.step(ACTION_TURN_RIGHT).unwrap(); // facing south
    let key_before = env.state_key();
    let t = env.step(ACTION_FORWARD).unwrap();
    assert_eq!(t.reward, LAVA_PENALTY);
    assert!(t.terminal);
    assert_eq!(t.label, SafetyLabel::Catastrophic);
    assert_eq!(t.state_key, key_before);
    assert_eq!(t.action, ACTION_FORWARD);
    assert_eq!(env.position(), (2, 2));
    assert!(matches!(env.step(ACTION_FORWARD), Err(EnvError::EpisodeOver)));
}

#[test]
fn invalid_action_rejected() {
    let mut env = desk_env();
    env.reset(3);
    assert!(matches!(
        env.step(ActionId(3)),
        Err(EnvError::InvalidAction { action: 3, count: 3 })
    ));
    // A rejected action must not consume the step.
    assert_eq!(env.position(), (1, 1));
}

#[test]
fn step_before_reset_is_an_error() {
    let layout = LavaGridLayout::desk();
    let sched = tile_schedule(&layout, 0.005, 1.0).unwrap();
    let mut env = LavaGridEnv::new(layout, sched, 1, -1.0).unwrap();
    assert!(matches!(env.step(ACTION_FORWARD), Err(EnvError::EpisodeOver)));
}

#[test]
fn state_key_layout_frozen() {
    let mut env = desk_env();
    env.reset_to(LavaConfig::empty(), 0).unwrap();
    let key = env.state_key();
    let b = key.as_bytes();
    assert_eq!(b.len(), 11);
    assert_eq!(b[0], KEY_LAYOUT_LAVAGRID);
    assert_eq!(u32::from_le_bytes(b[1..5].try_into().unwrap()), 0); // cluster
    assert_eq!(u16::from_le_bytes(b[5..7].try_into().unwrap()), 1); // x
    assert_eq!(u16::from_le_bytes(b[7..9].try_into().unwrap()), 1); // y
    assert_eq!(b[9], 0); // facing east
    assert_eq!(b[10], 0); // goal 0
    env.step(ACTION_TURN_RIGHT).unwrap();
    assert_eq!(env.state_key().as_bytes()[9], 1);
}

#[test]
fn reset_is_deterministic_in_seed() {
    let mut a = desk_env();
    let mut b = desk_env();
    for seed in 0..50u64 {
        let oa = a.reset(seed);
        let ob = b.reset(seed);
        assert_eq!(oa, ob);
        assert_eq!(a.config(), b.config());
        assert_eq!(a.cluster(), b.cluster());
    }
    // And different seeds eventually draw different configs.
    let mut distinct = BTreeSet::new();
    for seed in 0..200u64 {
        a.reset(seed);
        distinct.insert(a.cluster());
    }
    assert!(distinct.len() > 1);
}

#[test]
fn goal_cycling_draws_each_goal() {
    let layout = LavaGridLayout::desk();
    let sched = flat_schedule(&layout, 0.005).unwrap();
    let mut env = LavaGridEnv::new(layout, sched, 3, -1.0).unwrap();
    let mut seen = BTreeSet::new();
    for seed in 0..60u64 {
        env.reset(seed);
        seen.insert(env.active_goal());
    }
    assert_eq!(seen, BTreeSet::from([0, 1, 2]));
    // Fixed-goal mode never cycles.
    let mut fixed = desk_env();
    for seed in 0..20u64 {
        fixed.reset(seed);
        assert_eq!(fixed.active_goal(), 0);
    }
}

#[test]
fn goal_delta_tracks_active_goal() {
    let layout = LavaGridLayout::desk();
    let sched = flat_schedule(&layout, 0.005).unwrap();
    let mut env = LavaGridEnv::new(layout, sched, 3, -1.0).unwrap();
    let o1 = env.reset_to(LavaConfig::empty(), 1).unwrap();
    assert_eq!(o1.goal_delta, (5, 0)); // (6, 1) from (1, 1)
    let o2 = env.reset_to(LavaConfig::empty(), 2).unwrap();
    assert_eq!(o2.goal_delta, (0, 5)); // (1, 6)
    // Goal identity is part of the state key.
    assert_eq!(env.state_key().as_bytes()[10], 2);
}

#[test]
fn reaching_an_inactive_goal_does_not_terminate() {
    let layout = LavaGridLayout::desk();
    let sched = flat_schedule(&layout, 0.005).unwrap();
    let mut env = LavaGridEnv::new(layout, sched, 3, -1.0).unwrap();
    env.reset_to(LavaConfig::empty(), 0).unwrap(); // active goal (6, 6)
    // Walk east along y=1 through the inactive goal (6, 1).
    for _ in 0..5 {
        let t = env.step(ACTION_FORWARD).unwrap();
        assert!(!t.terminal);
    }
    assert_eq!(env.position(), (6, 1));
}

#[test]
fn reset_to_validation() {
    let mut env = desk_env();
    assert!(matches!(
        env.reset_to(LavaConfig::empty(), 1),
        Err(LavaGridError::BadGoal { got: 1, count: 1 })
    ));
    let bad = LavaConfig::from_cells(vec![(12, LavaType::Red)]);
    assert!(matches!(
        env.reset_to(bad, 0),
        Err(LavaGridError::BadConfigTile(12))
    ));
}

#[test]
fn set_state_rejects_unstandable_cells() {
    let mut env = desk_env();
    env.reset_to(LavaConfig::from_cells(vec![(0, LavaType::Red)]), 0)
        .unwrap();
    assert!(env.set_state(3, 3, 2).is_ok());
    assert!(matches!(
        env.set_state(0, 0, 0),
        Err(LavaGridError::BadPlacement(0, 0))
    ));
    assert!(matches!(
        env.set_state(2, 2, 0), // lava
        Err(LavaGridError::BadPlacement(2, 2))
    ));
    assert!(matches!(
        env.set_state(6, 6, 0), // active goal
        Err(LavaGridError::BadPlacement(6, 6))
    ));
}

#[test]
fn catastrophic_set_walled_lava_cell() {
    let layout = LavaGridLayout::full();
    let sched = tile_schedule(&layout, 0.005, 1.0).unwrap();
    let mut env = LavaGridEnv::new(layout, sched, 1, -1.0).unwrap();
    let tile = env
        .layout()
        .lava_eligible()
        .iter()
        .position(|&c| c == (3, 3))
        .unwrap() as u8;
    env.reset_to(LavaConfig::from_cells(vec![(tile, LavaType::Purple)]), 0)
        .unwrap();
    let set = env.catastrophic_set().unwrap();
    // (4, 3) is a wall, so only three poses point into the lava.
    let expected: BTreeSet<_> = [
        (env.state_key_at((2, 3), 0), ACTION_FORWARD), // east of it
        (env.state_key_at((3, 2), 1), ACTION_FORWARD), // south of it
        (env.state_key_at((3, 4), 3), ACTION_FORWARD), // north of it
    ]
    .into_iter()
    .collect();
    assert_eq!(set.into_iter().collect::<BTreeSet<_>>(), expected);
}

#[test]
fn catastrophic_set_empty_when_lava_free() {
    let mut env = desk_env();
    env.reset_to(LavaConfig::empty(), 0).unwrap();
    assert_eq!(env.catastrophic_set().unwrap(), Vec::new());
}

#[test]
fn labels_match_catastrophic_set_exhaustively() {
    // Every reachable (pose, action) on several sampled desk instances:
    // the step label must agree with membership in the enumerated set.
    let mut env = desk_env();
    for seed in [2u64, 11, 23, 40] {
        env.reset(seed);
        let truth: BTreeSet<_> = env.catastrophic_set().unwrap().into_iter().collect();
        let w = env.layout().width();
        let h = env.layout().height();
        let mut checked = 0usize;
        for y in 0..h {
            for x in 0..w {
                for facing in 0..4u8 {
                    let mut probe = env.clone();
                    if probe.set_state(x, y, facing).is_err() {
                        continue;
                    }
                    for action in 0..3u8 {
                        let mut probe2 = probe.clone();
                        let key = probe2.state_key();
                        let t = probe2.step(ActionId(action)).unwrap();
                        let in_set = truth.contains(&(key.clone(), ActionId(action)));
                        assert_eq!(
                            t.label.is_catastrophic(),
                            in_set,
                            "seed {seed} pose ({x},{y},{facing}) action {action}"
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }
}

#[test]
fn spec_reports_observation_layout() {
    let env = desk_env();
    let spec = env.spec();
    assert_eq!(spec.action_count, 3);
    assert_eq!(spec.obs.cluster_count, env.dist().cluster_count());
    assert_eq!(spec.obs.goal_delta_scale, (7.0, 7.0));
}
