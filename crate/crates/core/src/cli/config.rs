//! Text config format: `[section]` headers over flat `key = value` lines.
//! `#` starts a comment. Keys are globally unique, so `--set key=value`
//! overrides need no section prefix.

use std::collections::BTreeMap;

use crate::harness::{
    EnvConfig, EvalConfig, ExperimentConfig, LayoutName, Protocol, ScheduleSpec, ShieldMode,
    ShieldSpec,
};
use crate::ppo::PpoConfig;

/// Where a value came from, for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
    Default,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => write!(f, "--set"),
            Origin::Default => write!(f, "default"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {0}: expected `key = value` or `[section]`, got `{1}`")]
    Malformed(usize, String),
    #[error("line {0}: unknown section `[{1}]`")]
    UnknownSection(usize, String),
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: Origin, key: String },
    #[error("line {0}: key `{1}` belongs to section [{2}], not [{3}]")]
    WrongSection(usize, String, &'static str, String),
    #[error("line {0}: duplicate key `{1}` (first set at line {2})")]
    DuplicateKey(usize, String, usize),
    #[error("line {0}: key `{1}` appears before any section header")]
    NoSection(usize, String),
    #[error("{origin}: key `{key}`: {problem}")]
    BadValue {
        origin: Origin,
        key: &'static str,
        problem: String,
    },
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("{origin}: key `{key}` is not meaningful here: {why}")]
    IrrelevantKey {
        origin: Origin,
        key: &'static str,
        why: &'static str,
    },
    #[error("--set argument `{0}` is not of the form key=value")]
    MalformedOverride(String),
}

/// (section, key) table; placement is enforced, lookups go by key alone.
const KEYS: &[(&str, &str)] = &[
    ("experiment", "protocol"),
    ("experiment", "seeds"),
    ("experiment", "episodes"),
    ("experiment", "max_steps"),
    ("experiment", "instance_pool"),
    ("experiment", "workers"),
    ("experiment", "agent_count"),
    ("env", "layout"),
    ("env", "schedule"),
    ("env", "growth"),
    ("env", "flat_p"),
    ("env", "shaping_sign"),
    ("env", "goal_count"),
    ("shield", "kind"),
    ("shield", "mode"),
    ("shield", "capacity"),
    ("shield", "expected"),
    ("shield", "target_fp"),
    ("agent", "hidden"),
    ("agent", "segment"),
    ("agent", "lr"),
    ("agent", "gamma"),
    ("agent", "lam"),
    ("agent", "clip"),
    ("agent", "epochs"),
    ("agent", "minibatch"),
    ("agent", "entropy_coef"),
    ("agent", "value_coef"),
    ("eval", "eval_every"),
    ("eval", "eval_probes"),
];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

fn canonical_key(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(_, k)| *k)
}

#[derive(Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<&'static str, (String, Origin)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (idx, line) in text.lines().enumerate() {
            let n = idx + 1;
            let line = match line.find('#') {
                Some(cut) => &line[..cut],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ParseError::Malformed(n, line.to_string()))?
                    .trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(ParseError::UnknownSection(n, name.to_string()));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ParseError::Malformed(n, line.to_string()))?;
            let key = key.trim();
            let value = value.trim();
            let canonical = canonical_key(key).ok_or_else(|| ParseError::UnknownKey {
                origin: Origin::Line(n),
                key: key.to_string(),
            })?;
            let current = section
                .as_deref()
                .ok_or_else(|| ParseError::NoSection(n, key.to_string()))?;
            let home = section_of(key).expect("canonical key has a section");
            if home != current {
                return Err(ParseError::WrongSection(
                    n,
                    key.to_string(),
                    home,
                    current.to_string(),
                ));
            }
            if let Some((_, Origin::Line(first))) = raw.values.get(canonical) {
                return Err(ParseError::DuplicateKey(n, key.to_string(), *first));
            }
            raw.values
                .insert(canonical, (value.to_string(), Origin::Line(n)));
        }
        Ok(raw)
    }

    /// Applies `--set key=value` pairs; later flags win over earlier ones and
    /// over the file.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), ParseError> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| ParseError::MalformedOverride(s.clone()))?;
            let key = key.trim();
            let canonical = canonical_key(key).ok_or_else(|| ParseError::UnknownKey {
                origin: Origin::Flag,
                key: key.to_string(),
            })?;
            self.values
                .insert(canonical, (value.trim().to_string(), Origin::Flag));
        }
        Ok(())
    }

    fn get(&self, key: &'static str) -> Option<(&str, Origin)> {
        self.values.get(key).map(|(v, o)| (v.as_str(), *o))
    }

    fn parse_with<T>(
        &self,
        key: &'static str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<(T, Origin)>, ParseError> {
        match self.get(key) {
            None => Ok(None),
            Some((text, origin)) => match parse(text) {
                Ok(v) => Ok(Some((v, origin))),
                Err(problem) => Err(ParseError::BadValue {
                    origin,
                    key,
                    problem,
                }),
            },
        }
    }

    fn required<T>(
        &self,
        key: &'static str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ParseError> {
        self.parse_with(key, parse)?
            .map(|(v, _)| v)
            .ok_or(ParseError::MissingKey(key))
    }

    fn optional<T>(
        &self,
        key: &'static str,
        default: T,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ParseError> {
        Ok(self.parse_with(key, parse)?.map(|(v, _)| v).unwrap_or(default))
    }

    /// Errors when `key` is present; used for keys another choice rules out.
    fn forbid(&self, key: &'static str, why: &'static str) -> Result<(), ParseError> {
        match self.get(key) {
            Some((_, origin)) => Err(ParseError::IrrelevantKey { origin, key, why }),
            None => Ok(()),
        }
    }

    pub fn build(&self) -> Result<ExperimentConfig, ParseError> {
        let protocol = self.required("protocol", |s| match s {
            "single" => Ok(Protocol::Single),
            "multi" => Ok(Protocol::Multi),
            "goal" => Ok(Protocol::Goal),
            other => Err(format!("expected single|multi|goal, got `{other}`")),
        })?;
        let episodes = self.required("episodes", parse_num::<u32>)?;
        let seeds = self.optional("seeds", vec![1, 2, 3, 4, 5], |s| {
            s.split(',')
                .map(|part| parse_num::<u64>(part.trim()))
                .collect::<Result<Vec<u64>, String>>()
                .and_then(|v| {
                    if v.is_empty() {
                        Err("empty seed list".into())
                    } else {
                        Ok(v)
                    }
                })
        })?;

        let layout = self.required("layout", |s| match s {
            "tiny" => Ok(LayoutName::Tiny),
            "desk" => Ok(LayoutName::Desk),
            "full" => Ok(LayoutName::Full),
            other => Err(format!("expected tiny|desk|full, got `{other}`")),
        })?;
        let schedule = match self.required("schedule", |s| match s {
            "calibrated" | "flat" => Ok(s.to_string()),
            other => Err(format!("expected calibrated|flat, got `{other}`")),
        })? {
            s if s == "calibrated" => {
                self.forbid("flat_p", "schedule = calibrated has no flat probability")?;
                ScheduleSpec::Calibrated {
                    growth: self.optional("growth", 2.0, parse_num::<f64>)?,
                }
            }
            _ => {
                self.forbid("growth", "schedule = flat has no growth factor")?;
                ScheduleSpec::Flat {
                    p: self.required("flat_p", parse_num::<f64>)?,
                }
            }
        };
        let shaping_sign = self.optional("shaping_sign", -1.0, parse_num::<f64>)?;
        let goal_count = self.optional(
            "goal_count",
            if protocol == Protocol::Goal { 3 } else { 1 },
            parse_num::<usize>,
        )?;

        let kind = self.optional("kind", "none".to_string(), |s| match s {
            "none" | "tabular" | "bounded" | "bloom" => Ok(s.to_string()),
            other => Err(format!("expected none|tabular|bounded|bloom, got `{other}`")),
        })?;
        let shield = match kind.as_str() {
            "none" => {
                self.forbid("capacity", "shield kind none takes no capacity")?;
                self.forbid("expected", "shield kind none takes no expected count")?;
                self.forbid("target_fp", "shield kind none takes no target_fp")?;
                ShieldSpec::None
            }
            "tabular" => {
                self.forbid("capacity", "tabular shields are unbounded")?;
                self.forbid("expected", "tabular shields take no expected count")?;
                self.forbid("target_fp", "tabular shields take no target_fp")?;
                ShieldSpec::Tabular
            }
            "bounded" => {
                self.forbid("expected", "bounded shields take no expected count")?;
                self.forbid("target_fp", "bounded shields take no target_fp")?;
                ShieldSpec::Bounded {
                    capacity: self.required("capacity", parse_num::<usize>)?,
                }
            }
            _ => {
                self.forbid("capacity", "bloom shields take no capacity")?;
                ShieldSpec::Bloom {
                    expected: self.required("expected", parse_num::<u64>)?,
                    target_fp: self.required("target_fp", parse_num::<f64>)?,
                }
            }
        };

        let shield_mode = self.optional("mode", ShieldMode::None, |s| match s {
            "none" => Ok(ShieldMode::None),
            "individual" => Ok(ShieldMode::Individual),
            "shared" => Ok(ShieldMode::Shared),
            other => Err(format!("expected none|individual|shared, got `{other}`")),
        })?;
        if protocol != Protocol::Multi {
            self.forbid("mode", "shield mode applies to the multi protocol only")?;
            self.forbid("agent_count", "agent_count applies to the multi protocol only")?;
        }
        let agent_count = self.optional(
            "agent_count",
            if protocol == Protocol::Multi { 10 } else { 1 },
            parse_num::<usize>,
        )?;

        let defaults = PpoConfig::default();
        let agent = PpoConfig {
            hidden: self.optional("hidden", defaults.hidden, parse_num)?,
            segment: self.optional("segment", defaults.segment, parse_num)?,
            lr: self.optional("lr", defaults.lr, parse_num)?,
            gamma: self.optional("gamma", defaults.gamma, parse_num)?,
            lam: self.optional("lam", defaults.lam, parse_num)?,
            clip: self.optional("clip", defaults.clip, parse_num)?,
            epochs: self.optional("epochs", defaults.epochs, parse_num)?,
            minibatch: self.optional("minibatch", defaults.minibatch, parse_num)?,
            entropy_coef: self.optional("entropy_coef", defaults.entropy_coef, parse_num)?,
            value_coef: self.optional("value_coef", defaults.value_coef, parse_num)?,
        };

        let eval_every = self.parse_with("eval_every", parse_num::<u32>)?;
        let eval_probes = self.parse_with("eval_probes", parse_num::<u32>)?;
        let eval = match (eval_every, eval_probes) {
            (None, None) => None,
            (Some((every, _)), Some((probes, _))) => Some(EvalConfig {
                every_episodes: every,
                probes_per_goal: probes,
            }),
            (Some((_, origin)), None) => {
                return Err(ParseError::BadValue {
                    origin,
                    key: "eval_every",
                    problem: "eval_probes must be set alongside eval_every".into(),
                })
            }
            (None, Some((_, origin))) => {
                return Err(ParseError::BadValue {
                    origin,
                    key: "eval_probes",
                    problem: "eval_every must be set alongside eval_probes".into(),
                })
            }
        };

        Ok(ExperimentConfig {
            protocol,
            seeds,
            agent_count,
            shield_mode,
            shield,
            episodes,
            max_steps: self.parse_with("max_steps", parse_num::<usize>)?.map(|(v, _)| v),
            env: EnvConfig {
                layout,
                schedule,
                shaping_sign,
                goal_count,
            },
            agent,
            instance_pool: self
                .parse_with("instance_pool", parse_num::<usize>)?
                .map(|(v, _)| v),
            workers: self.optional("workers", 1, parse_num)?,
            eval,
        })
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
}

/// File text + overrides to a validated-shape (not yet cross-checked) config.
pub fn load(text: &str, sets: &[String]) -> Result<ExperimentConfig, ParseError> {
    let mut raw = RawConfig::parse(text)?;
    raw.apply_overrides(sets)?;
    raw.build()
}
