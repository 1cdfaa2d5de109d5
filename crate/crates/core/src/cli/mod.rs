//! Command-line front end: run experiments from config files, validate
//! configs, inspect and merge shield files, render plots.

pub mod config;
pub mod plot;


use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::harness::{
    self, aggregate, final_quartile_return, ExperimentConfig, Protocol, RunArtifact,
};
use crate::shield::{Shield, TabularShield};

pub const SEED_OFFSET_VAR: &str = "SHIELDBENCH_SEED_OFFSET";

const USAGE: &str = "\
usage: shieldbench <command> [options]

commands:
  run            --config PATH [--set K=V]... [--out DIR] [--quiet]
  validate       --config PATH [--set K=V]...
  shield-inspect FILE [--keys]
  shield-merge   --out FILE IN1 IN2 [IN...]
  plot           --out DIR IN1.csv [IN.csv...]

exit codes: 0 success, 1 runtime failure, 2 usage or config error.
The environment variable SHIELDBENCH_SEED_OFFSET (integer) shifts every seed.
";

/// Errors carry their exit class: usage/config problems exit 2, failures
/// during a legitimate operation exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Entry point for `main`: prints errors to stderr, returns the exit code.
pub fn dispatch(args: &[String]) -> i32 {
    match execute(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            if matches!(e, CliError::Usage(_)) {
                eprint!("{USAGE}");
            }
            e.exit_code()
        }
    }
}

pub fn execute(args: &[String]) -> Result<(), CliError> {
    let verb = args
        .first()
        .ok_or_else(|| CliError::Usage("no command given".into()))?;
    let rest = &args[1..];
    match verb.as_str() {
        "run" => cmd_run(rest),
        "validate" => cmd_validate(rest),
        "shield-inspect" => cmd_shield_inspect(rest),
        "shield-merge" => cmd_shield_merge(rest),
        "plot" => cmd_plot(rest),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

/// Flags shared by run/validate.
#[derive(Debug, Default)]
struct CommonFlags {
    config: Option<PathBuf>,
    sets: Vec<String>,
    out: Option<PathBuf>,
    quiet: bool,
    positional: Vec<String>,
    keys: bool,
}

fn parse_flags(args: &[String]) -> Result<CommonFlags, CliError> {
    let mut flags = CommonFlags::default();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--config needs a path".into()))?;
                flags.config = Some(PathBuf::from(v));
            }
            "--set" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--set needs key=value".into()))?;
                flags.sets.push(v.clone());
            }
            "--out" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--out needs a path".into()))?;
                flags.out = Some(PathBuf::from(v));
            }
            "--quiet" => flags.quiet = true,
            "--keys" => flags.keys = true,
            other if other.starts_with('-') => {
                return Err(CliError::Usage(format!("unknown flag `{other}`")));
            }
            other => flags.positional.push(other.to_string()),
        }
    }
    Ok(flags)
}

fn seed_offset() -> Result<i64, CliError> {
    match std::env::var(SEED_OFFSET_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(CliError::Config(format!("{SEED_OFFSET_VAR}: {e}"))),
        Ok(text) => text
            .trim()
            .parse::<i64>()
            .map_err(|e| CliError::Config(format!("{SEED_OFFSET_VAR}=`{text}`: {e}"))),
    }
}

/// Shared front half of run/validate: file, overrides, seed offset,
/// cross-field validation.
fn load_config(flags: &CommonFlags) -> Result<(ExperimentConfig, i64), CliError> {
    let path = flags
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    let mut cfg = config::load(&text, &flags.sets)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let offset = seed_offset()?;
    if offset != 0 {
        for s in &mut cfg.seeds {
            *s = s.wrapping_add_signed(offset);
        }
    }
    cfg.validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, offset))
}

fn cmd_validate(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args)?;
    if !flags.positional.is_empty() {
        return Err(CliError::Usage(format!(
            "validate takes no positional arguments, got `{}`",
            flags.positional[0]
        )));
    }
    let (cfg, offset) = load_config(&flags)?;
    if !flags.quiet {
        println!(
            "config ok: protocol={} seeds={:?} episodes={} (seed offset {offset})",
            cfg.protocol.as_str(),
            cfg.seeds,
            cfg.episodes
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    episodes: usize,
    total_steps: u64,
    total_mistakes: u64,
    total_repeats: u64,
    final_quartile_return: Option<f64>,
    wall_clock_secs: f64,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: &'a ExperimentConfig,
    seed_offset: i64,
    per_seed: Vec<SeedSummary>,
    degenerate_sample: bool,
}

fn seed_summary(a: &RunArtifact) -> SeedSummary {
    SeedSummary {
        seed: a.run_seed,
        episodes: a.rows.len(),
        total_steps: a.total_steps(),
        total_mistakes: a.total_mistakes(),
        total_repeats: a.total_repeats(),
        final_quartile_return: if a.rows.is_empty() {
            None
        } else {
            Some(final_quartile_return(a))
        },
        wall_clock_secs: a.wall_clock_secs,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_run(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args)?;
    if !flags.positional.is_empty() {
        return Err(CliError::Usage(format!(
            "run takes no positional arguments, got `{}`",
            flags.positional[0]
        )));
    }
    let (cfg, offset) = load_config(&flags)?;
    let out = flags.out.unwrap_or_else(|| PathBuf::from("results"));
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;

    let artifacts = harness::run(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;

    for a in &artifacts {
        write_file(
            &out.join(format!("metrics_seed{}.csv", a.run_seed)),
            a.metrics_csv().as_bytes(),
        )?;
        for (i, bytes) in a.shields.iter().enumerate() {
            write_file(&out.join(format!("shield_seed{}_{i}.bin", a.run_seed)), bytes)?;
        }
        if cfg.protocol == Protocol::Goal && cfg.eval.is_some() {
            write_file(
                &out.join(format!("eval_seed{}.csv", a.run_seed)),
                a.eval_csv().as_bytes(),
            )?;
        }
    }

    let refs: Vec<&RunArtifact> = artifacts.iter().collect();
    let summary = aggregate(&refs).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join("aggregate.csv"), summary.to_csv().as_bytes())?;

    let summary_file = SummaryFile {
        config: &cfg,
        seed_offset: offset,
        per_seed: artifacts.iter().map(seed_summary).collect(),
        degenerate_sample: summary.degenerate_sample,
    };
    let json = serde_json::to_string_pretty(&summary_file)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join("summary.json"), json.as_bytes())?;

    write_file(
        &out.join("config.json"),
        serde_json::to_string_pretty(&cfg)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .as_bytes(),
    )?;

    if !flags.quiet {
        print!("{}", summary_table(&artifacts));
        if summary.degenerate_sample {
            println!("note: single seed; standard errors are not meaningful");
        }
        println!("artifacts written to {}", out.display());
    }
    Ok(())
}

fn summary_table(artifacts: &[RunArtifact]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>10} {:>10} {:>9} {:>16} {:>9}",
        "seed", "steps", "mistakes", "repeats", "final_qtr_return", "wall_s"
    );
    for a in artifacts {
        let fq = if a.rows.is_empty() {
            "-".to_string()
        } else {
            format!("{:.3}", final_quartile_return(a))
        };
        let _ = writeln!(
            out,
            "{:>8} {:>10} {:>10} {:>9} {:>16} {:>9.2}",
            a.run_seed,
            a.total_steps(),
            a.total_mistakes(),
            a.total_repeats(),
            fq,
            a.wall_clock_secs
        );
    }
    out
}

fn read_shield(path: &str) -> Result<Shield, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Runtime(format!("{path}: {e}")))?;
    Shield::deserialize(&bytes).map_err(|e| CliError::Runtime(format!("{path}: {e}")))
}

fn cmd_shield_inspect(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args)?;
    if flags.positional.len() != 1 {
        return Err(CliError::Usage(
            "shield-inspect takes exactly one shield file".into(),
        ));
    }
    let path = &flags.positional[0];
    let shield = read_shield(path)?;
    println!("file: {path}");
    println!("variant: {}", shield.variant_name());
    match &shield {
        Shield::Tabular(s) => {
            println!("entries: {}", s.len());
            println!(
                "key_width: {}",
                s.key_width().map_or("(empty)".into(), |w| w.to_string())
            );
            if flags.keys {
                for k in s.iter() {
                    println!("{}", crate::ppo::hex(&k.to_bytes()));
                }
            }
        }
        Shield::Bounded(s) => {
            println!("entries: {}", s.len());
            println!("capacity: {}", s.capacity());
            if flags.keys {
                for k in s.iter_by_recency() {
                    println!("{}", crate::ppo::hex(&k.to_bytes()));
                }
            }
        }
        Shield::Bloom(s) => {
            println!("bits: {}", s.m());
            println!("hashes: {}", s.k());
            println!("inserted: {}", s.inserted());
            println!("target_fp: {}", s.target_fp());
            if flags.keys {
                return Err(CliError::Usage(
                    "--keys: a bloom filter stores no key list".into(),
                ));
            }
        }
        Shield::Parametric(s) => {
            println!("state_width: {}", s.state_width());
            println!("action_count: {}", s.action_count());
            println!("threshold: {}", s.threshold());
            if flags.keys {
                return Err(CliError::Usage(
                    "--keys: a parametric shield stores no key list".into(),
                ));
            }
        }
    }
    Ok(())
}

fn cmd_shield_merge(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args)?;
    let out = flags
        .out
        .ok_or_else(|| CliError::Usage("shield-merge needs --out FILE".into()))?;
    if flags.positional.len() < 2 {
        return Err(CliError::Usage(
            "shield-merge needs at least two input shields".into(),
        ));
    }
    let mut merged = TabularShield::new();
    for path in &flags.positional {
        match read_shield(path)? {
            Shield::Tabular(s) => merged
                .merge(&s)
                .map_err(|e| CliError::Runtime(format!("{path}: {e}")))?,
            other => {
                return Err(CliError::Runtime(format!(
                    "{path}: merge supports tabular shields only, found {}",
                    other.variant_name()
                )))
            }
        }
    }
    let bytes = Shield::Tabular(merged).serialize();
    write_file(&out, &bytes)?;
    println!("merged {} shields into {}", flags.positional.len(), out.display());
    Ok(())
}

fn cmd_plot(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args)?;
    let out = flags
        .out
        .ok_or_else(|| CliError::Usage("plot needs --out DIR".into()))?;
    if flags.positional.is_empty() {
        return Err(CliError::Usage("plot needs at least one aggregate CSV".into()));
    }
    let mut series = Vec::with_capacity(flags.positional.len());
    for path in &flags.positional {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{path}: {e}")))?;
        series.push(
            plot::parse_summary_csv(path, &text)
                .map_err(|e| CliError::Runtime(e.to_string()))?,
        );
    }
    let svg = plot::render(&series);
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let file = out.join("plot.svg");
    write_file(&file, svg.as_bytes())?;
    println!("wrote {}", file.display());
    Ok(())
}
