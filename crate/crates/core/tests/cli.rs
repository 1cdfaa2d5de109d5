//! End-to-end checks of the command-line binary: every verb, exit codes,
//! artifact files, and byte determinism across reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shieldbench::pomdp::{ActionId, StateKey};
use shieldbench::shield::{BloomShield, Shield, ShieldKey, TabularShield};

const TINY_SINGLE: &str = "\
[experiment]
protocol = single
seeds = 1, 2
episodes = 6

[env]
layout = tiny
schedule = flat
flat_p = 0.0

[shield]
kind = tabular

[agent]
hidden = 8
segment = 32
";

const DESK_GOAL: &str = "\
[experiment]
protocol = goal
seeds = 1
episodes = 4

[env]
layout = desk
schedule = flat
flat_p = 0.005
goal_count = 3

[shield]
kind = tabular

[agent]
hidden = 8
segment = 32

[eval]
eval_every = 2
eval_probes = 1
";

const TINY_MULTI: &str = "\
[experiment]
protocol = multi
seeds = 1
episodes = 4
agent_count = 2
workers = 2

[env]
layout = tiny
schedule = flat
flat_p = 0.0

[shield]
kind = tabular
mode = shared

[agent]
hidden = 8
segment = 32
";

struct Workdir {
    dir: tempfile::TempDir,
}

impl Workdir {
    fn new() -> Self {
        Workdir {
            dir: tempfile::tempdir().expect("tempdir"),
        }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_shieldbench"));
        c.args(args).current_dir(self.path());
        c.env_remove("SHIELDBENCH_SEED_OFFSET");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().expect("spawn binary")
    }
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

#[test]
fn run_writes_artifacts_and_reruns_byte_identical() {
    let w = Workdir::new();
    let cfg = w.write("exp.cfg", TINY_SINGLE);
    let cfg = cfg.to_str().unwrap();

    let out = w.run(&["run", "--config", cfg, "--out", "one"]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("final_qtr_return"), "{text}");
    assert!(text.contains("artifacts written"), "{text}");

    for name in [
        "metrics_seed1.csv",
        "metrics_seed2.csv",
        "shield_seed1_0.bin",
        "shield_seed2_0.bin",
        "aggregate.csv",
        "summary.json",
        "config.json",
    ] {
        assert!(w.path().join("one").join(name).exists(), "missing {name}");
    }

    let out = w.run(&["run", "--config", cfg, "--out", "two", "--quiet"]);
    assert_exit(&out, 0);
    assert!(!stdout(&out).contains("final_qtr_return"));

    for name in ["metrics_seed1.csv", "metrics_seed2.csv", "aggregate.csv"] {
        let a = fs::read(w.path().join("one").join(name)).unwrap();
        let b = fs::read(w.path().join("two").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let metrics = fs::read_to_string(w.path().join("one/metrics_seed1.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 6, "header plus one row per episode");
    assert!(metrics.starts_with("run_seed,episode,"));
}

#[test]
fn set_overrides_reach_the_run() {
    let w = Workdir::new();
    let cfg = w.write("exp.cfg", TINY_SINGLE);
    let out = w.run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "episodes=3",
        "--set",
        "seeds=9",
        "--out",
        "o",
        "--quiet",
    ]);
    assert_exit(&out, 0);
    let metrics = fs::read_to_string(w.path().join("o/metrics_seed9.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    let summary = fs::read_to_string(w.path().join("o/summary.json")).unwrap();
    assert!(summary.contains("\"episodes\": 3"), "{summary}");
    assert!(summary.contains("\"degenerate_sample\": true"), "{summary}");
}

#[test]
fn seed_offset_env_shifts_every_seed() {
    let w = Workdir::new();
    let cfg = w.write("exp.cfg", TINY_SINGLE);
    let out = w
        .cmd(&["run", "--config", cfg.to_str().unwrap(), "--out", "o", "--quiet"])
        .env("SHIELDBENCH_SEED_OFFSET", "10")
        .output()
        .unwrap();
    assert_exit(&out, 0);
    assert!(w.path().join("o/metrics_seed11.csv").exists());
    assert!(w.path().join("o/metrics_seed12.csv").exists());
    let summary = fs::read_to_string(w.path().join("o/summary.json")).unwrap();
    assert!(summary.contains("\"seed_offset\": 10"), "{summary}");

    let out = w
        .cmd(&["validate", "--config", cfg.to_str().unwrap()])
        .env("SHIELDBENCH_SEED_OFFSET", "ten")
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("SHIELDBENCH_SEED_OFFSET"));
}

#[test]
fn validate_reports_ok_and_rejects_bad_configs() {
    let w = Workdir::new();
    let cfg = w.write("exp.cfg", TINY_SINGLE);
    let cfg = cfg.to_str().unwrap();

    let out = w.run(&["validate", "--config", cfg]);
    assert_exit(&out, 0);
    assert!(stdout(&out).contains("config ok"));

    // parse-level rejection
    let out = w.run(&["validate", "--config", cfg, "--set", "kind=bogus"]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("kind"));

    // cross-field rejection
    let out = w.run(&["validate", "--config", cfg, "--set", "shaping_sign=0"]);
    assert_exit(&out, 2);
}

#[test]
fn usage_errors_exit_two() {
    let w = Workdir::new();

    let out = w.run(&["run", "--config", "nope.cfg"]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("nope.cfg"));

    let out = w.run(&[]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("usage:"));

    let out = w.run(&["frobnicate"]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("frobnicate"));

    let out = w.run(&["run", "--config"]);
    assert_exit(&out, 2);

    let out = w.run(&["validate", "--frob"]);
    assert_exit(&out, 2);
}

#[test]
fn goal_run_emits_eval_csv() {
    let w = Workdir::new();
    let cfg = w.write("goal.cfg", DESK_GOAL);
    let out = w.run(&["run", "--config", cfg.to_str().unwrap(), "--out", "g", "--quiet"]);
    assert_exit(&out, 0);
    let eval = fs::read_to_string(w.path().join("g/eval_seed1.csv")).unwrap();
    assert!(eval.starts_with("episode,env_steps,"), "{eval}");
    assert_eq!(eval.lines().count(), 1 + 2, "evaluated after episodes 2 and 4");
}

#[test]
fn multi_shared_run_writes_one_shield() {
    let w = Workdir::new();
    let cfg = w.write("multi.cfg", TINY_MULTI);
    let out = w.run(&["run", "--config", cfg.to_str().unwrap(), "--out", "m", "--quiet"]);
    assert_exit(&out, 0);
    assert!(w.path().join("m/shield_seed1_0.bin").exists());
    assert!(!w.path().join("m/shield_seed1_1.bin").exists());
}

fn key(state: &[u8], action: u8) -> ShieldKey {
    ShieldKey::new(StateKey::from_bytes(state.to_vec()), ActionId(action))
}

fn write_tabular(w: &Workdir, name: &str, keys: &[ShieldKey]) -> PathBuf {
    let mut s = TabularShield::new();
    for k in keys {
        s.record(k.clone());
    }
    let p = w.path().join(name);
    fs::write(&p, Shield::Tabular(s).serialize()).unwrap();
    p
}

#[test]
fn shield_inspect_and_merge() {
    let w = Workdir::new();
    let a = write_tabular(&w, "a.bin", &[key(&[1, 2, 3], 0), key(&[1, 2, 3], 1)]);
    let b = write_tabular(&w, "b.bin", &[key(&[1, 2, 3], 1), key(&[9, 9, 9], 2)]);

    let out = w.run(&["shield-inspect", a.to_str().unwrap()]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("variant: tabular"), "{text}");
    assert!(text.contains("entries: 2"), "{text}");

    let out = w.run(&["shield-inspect", a.to_str().unwrap(), "--keys"]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    let hex_lines: Vec<&str> = text
        .lines()
        .filter(|l| l.len() == 8 && l.chars().all(|c| c.is_ascii_hexdigit()))
        .collect();
    assert_eq!(hex_lines, vec!["01020300", "01020301"]);

    let m = w.path().join("m.bin");
    let out = w.run(&[
        "shield-merge",
        "--out",
        m.to_str().unwrap(),
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let merged = Shield::deserialize(&fs::read(&m).unwrap()).unwrap();
    match merged {
        Shield::Tabular(t) => assert_eq!(t.len(), 3, "union of {{2}} and {{2}} with one overlap"),
        other => panic!("expected tabular, got {}", other.variant_name()),
    }

    // a bloom input is a data error, not a usage error
    let bloom = w.path().join("c.bin");
    fs::write(&bloom, Shield::Bloom(BloomShield::with_expected(10, 0.01)).serialize()).unwrap();
    let out = w.run(&[
        "shield-merge",
        "--out",
        m.to_str().unwrap(),
        a.to_str().unwrap(),
        bloom.to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
    assert!(stderr(&out).contains("bloom"), "{}", stderr(&out));

    let out = w.run(&["shield-merge", "--out", m.to_str().unwrap(), a.to_str().unwrap()]);
    assert_exit(&out, 2);

    let garbage = w.write("junk.bin", "not a shield");
    let out = w.run(&["shield-inspect", garbage.to_str().unwrap()]);
    assert_exit(&out, 1);
}

#[test]
fn plot_renders_svg_from_aggregates() {
    let w = Workdir::new();
    let cfg = w.write("exp.cfg", TINY_SINGLE);
    let out = w.run(&["run", "--config", cfg.to_str().unwrap(), "--out", "o", "--quiet"]);
    assert_exit(&out, 0);

    let agg = w.path().join("o/aggregate.csv");
    let out = w.run(&["plot", "--out", "plots", agg.to_str().unwrap()]);
    assert_exit(&out, 0);
    let svg = fs::read_to_string(w.path().join("plots/plot.svg")).unwrap();
    assert!(svg.starts_with("<svg"), "{}", &svg[..60.min(svg.len())]);
    assert!(svg.contains("aggregate"), "legend uses the file stem");

    let out = w.run(&["plot", "--out", "plots"]);
    assert_exit(&out, 2);

    let bad = w.write("bad.csv", "episode,n,return_mean,return_se,mistake_rate_mean,mistake_rate_se\n");
    let out = w.run(&["plot", "--out", "p2", bad.to_str().unwrap()]);
    assert_exit(&out, 1);
    assert!(!w.path().join("p2/plot.svg").exists());
}
