//! Flat key = value run configuration with layered precedence:
//! command-line flags over config file over built-in defaults. The
//! resolved configuration (with per-key provenance) is written into every
//! run directory and parses back bit-for-bit.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use pacs_core::eval::EvalSpec;
use pacs_core::objectives::{GradientMode, WeightScope};
use pacs_core::scores::{Estimator, StdKind};
use pacs_core::tasks::{Task, TaskConfig};
use pacs_core::trainer::{Algorithm, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Cli,
    Sweep,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Cli => "cli",
            Source::Sweep => "sweep",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    source: Source,
}

/// All recognized keys with their defaults.
const DEFAULTS: &[(&str, &str)] = &[
    ("algo", "pacs"),
    ("task", "modsum"),
    ("steps", "300"),
    ("seed", "0"),
    ("group-size", "8"),
    ("groups-per-step", "4"),
    ("lr", "0.003"),
    ("beta", "1.0"),
    ("estimator", "rloo"),
    ("gradient-mode", "full"),
    ("weighting", "on"),
    ("weight-scope", "batch"),
    ("clip-eps", "0.2"),
    ("kl-beta", "0.0"),
    ("reset-period", "100"),
    ("temperature", "1.0"),
    ("top-p", "1.0"),
    ("context-window", "4"),
    ("hidden", "32"),
    ("std-mode", "population"),
    ("score-clamp", "off"),
    ("inner-epochs", "1"),
    ("gamma", "1.0"),
    ("lam", "1.0"),
    ("value-hidden", "16"),
    ("modulus", "10"),
    ("copy-symbols", "4"),
    ("copy-len", "2"),
    ("t-max", "4"),
    ("use-terminal", "on"),
    ("eval-problems", "20"),
    ("eval-n", "32"),
    ("eval-k", "1,2,4,8"),
    ("eval-temperature", "0.6"),
    ("eval-top-p", "0.96"),
    ("eval-seed", "17"),
    ("sweep-beta", ""),
    ("sweep-estimator", ""),
    ("sweep-weighting", ""),
    ("sweep-gradient-mode", ""),
    ("out", ""),
];

#[derive(Clone, Debug)]
pub struct Settings {
    entries: BTreeMap<&'static str, Entry>,
}

fn known_key(key: &str) -> Option<&'static str> {
    DEFAULTS.iter().map(|(k, _)| *k).find(|k| *k == key)
}

impl Settings {
    pub fn defaults() -> Self {
        let entries = DEFAULTS
            .iter()
            .map(|&(k, v)| {
                (
                    k,
                    Entry {
                        value: v.to_string(),
                        source: Source::Default,
                    },
                )
            })
            .collect();
        Settings { entries }
    }

    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<(), String> {
        let key = known_key(key).ok_or_else(|| format!("unknown configuration key {key:?}"))?;
        self.entries.insert(
            key,
            Entry {
                value: value.trim().to_string(),
                source,
            },
        );
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), lineno + 1))?;
            self.set(key.trim(), value, Source::File)
                .map_err(|e| format!("{}:{}: {e}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.entries[known_key(key).expect("settings key")].value
    }

    /// Resolved configuration: every key, its value, and where it came from.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (key, entry) in &self.entries {
            out.push_str(&format!("{key} = {}  # {}\n", entry.value, entry.source));
        }
        out
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, String> {
        self.get(key)
            .parse::<T>()
            .map_err(|_| format!("invalid value {:?} for key {key:?}", self.get(key)))
    }

    fn parse_switch(&self, key: &str) -> Result<bool, String> {
        match self.get(key) {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            other => Err(format!(
                "invalid value {other:?} for key {key:?}; expected on or off"
            )),
        }
    }

    fn parse_optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        match self.get(key) {
            "off" | "none" | "" => Ok(None),
            v => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| format!("invalid value {v:?} for key {key:?}")),
        }
    }

    pub fn task(&self) -> Result<Task, String> {
        let cfg = TaskConfig {
            modulus: self.parse("modulus")?,
            copy_symbols: self.parse("copy-symbols")?,
            copy_len: self.parse("copy-len")?,
            max_len: self.parse("t-max")?,
            use_terminal: self.parse_switch("use-terminal")?,
        };
        Task::from_id(self.get("task"), &cfg).map_err(|e| e.to_string())
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig, String> {
        let algorithm = Algorithm::from_id(self.get("algo")).ok_or_else(|| {
            format!(
                "unknown algorithm id {:?} for key \"algo\"; valid ids are: pacs, ppo, grpo",
                self.get("algo")
            )
        })?;
        let estimator = Estimator::from_id(self.get("estimator")).ok_or_else(|| {
            format!(
                "unknown estimator id {:?} for key \"estimator\"; valid ids are: rloo, grpo, dr-grpo",
                self.get("estimator")
            )
        })?;
        let gradient_mode = GradientMode::from_id(self.get("gradient-mode")).ok_or_else(|| {
            format!(
                "unknown gradient mode {:?} for key \"gradient-mode\"; valid ids are: direct, full",
                self.get("gradient-mode")
            )
        })?;
        let weight_scope = WeightScope::from_id(self.get("weight-scope")).ok_or_else(|| {
            format!(
                "unknown scope {:?} for key \"weight-scope\"; valid ids are: batch, group",
                self.get("weight-scope")
            )
        })?;
        let std_kind = match self.get("std-mode") {
            "population" => StdKind::Population,
            "sample" => StdKind::Sample,
            other => {
                return Err(format!(
                    "unknown std mode {other:?} for key \"std-mode\"; valid ids are: population, sample"
                ))
            }
        };
        let mut config = TrainerConfig::new(algorithm, self.task()?);
        config.group_size = self.parse("group-size")?;
        config.groups_per_step = self.parse("groups-per-step")?;
        config.learning_rate = self.parse("lr")?;
        config.beta = self.parse("beta")?;
        config.estimator = estimator;
        config.gradient_mode = gradient_mode;
        config.weighting = self.parse_switch("weighting")?;
        config.weight_scope = weight_scope;
        config.clip_eps = self.parse("clip-eps")?;
        config.kl_beta = self.parse("kl-beta")?;
        config.reset_period = self.parse_optional("reset-period")?;
        config.total_steps = self.parse("steps")?;
        config.seed = self.parse("seed")?;
        config.temperature = self.parse("temperature")?;
        config.top_p = self.parse("top-p")?;
        config.context_window = self.parse("context-window")?;
        config.hidden = self.parse("hidden")?;
        config.std_kind = std_kind;
        config.score_clamp = self.parse_optional("score-clamp")?;
        config.inner_epochs = self.parse("inner-epochs")?;
        config.gamma = self.parse("gamma")?;
        config.lam = self.parse("lam")?;
        config.value_hidden = self.parse("value-hidden")?;
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }

    pub fn eval_spec(&self) -> Result<EvalSpec, String> {
        let k_grid = parse_list::<usize>(self.get("eval-k"), "eval-k")?;
        if k_grid.is_empty() {
            return Err("eval-k must list at least one k".into());
        }
        Ok(EvalSpec {
            problems: self.parse("eval-problems")?,
            n: self.parse("eval-n")?,
            k_grid,
            temperature: self.parse("eval-temperature")?,
            top_p: self.parse("eval-top-p")?,
            seed: self.parse("eval-seed")?,
        })
    }

    /// Sweep axes in declaration order: (key, values). Only explicitly
    /// configured axes are returned.
    pub fn sweep_axes(&self) -> Result<Vec<(&'static str, Vec<String>)>, String> {
        let specs: [(&'static str, &'static str); 4] = [
            ("sweep-beta", "beta"),
            ("sweep-estimator", "estimator"),
            ("sweep-weighting", "weighting"),
            ("sweep-gradient-mode", "gradient-mode"),
        ];
        let mut axes = Vec::new();
        for (sweep_key, target_key) in specs {
            let raw = self.get(sweep_key).trim();
            if raw.is_empty() {
                continue;
            }
            let values: Vec<String> = raw
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(format!("axis {sweep_key:?} is empty"));
            }
            axes.push((target_key, values));
        }
        Ok(axes)
    }

    pub fn out_dir(&self) -> Option<&str> {
        let v = self.get("out");
        (!v.is_empty()).then_some(v)
    }
}

pub fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>, String> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| format!("invalid entry {s:?} in list {key:?}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_build_a_valid_config() {
        let s = Settings::defaults();
        let cfg = s.trainer_config().unwrap();
        assert_eq!(cfg.group_size, 8);
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.reset_period, Some(100));
        let spec = s.eval_spec().unwrap();
        assert_eq!(spec.k_grid, vec![1, 2, 4, 8]);
    }

    #[test]
    fn precedence_is_cli_over_file_over_default() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "steps = 50\nseed = 3").unwrap();
        let mut s = Settings::defaults();
        s.load_file(file.path()).unwrap();
        s.set("steps", "7", Source::Cli).unwrap();
        assert_eq!(s.get("steps"), "7");
        assert_eq!(s.get("seed"), "3");
        assert_eq!(s.get("lr"), "0.003");
        let text = s.resolved_text();
        assert!(text.contains("steps = 7  # cli"));
        assert!(text.contains("seed = 3  # file"));
        assert!(text.contains("lr = 0.003  # default"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut s = Settings::defaults();
        s.set("algo", "grpo", Source::Cli).unwrap();
        s.set("steps", "12", Source::File).unwrap();
        let text = s.resolved_text();
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(text.as_bytes()).unwrap();
        let mut back = Settings::defaults();
        back.load_file(file.path()).unwrap();
        for (key, _) in DEFAULTS {
            assert_eq!(s.get(key), back.get(key), "key {key}");
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "algorithm = pacs").unwrap();
        let mut s = Settings::defaults();
        let err = s.load_file(file.path()).unwrap_err();
        assert!(err.contains("algorithm"));
    }

    #[test]
    fn unknown_algo_lists_valid_ids() {
        let mut s = Settings::defaults();
        s.set("algo", "dapo", Source::Cli).unwrap();
        let err = s.trainer_config().unwrap_err();
        assert!(err.contains("dapo") && err.contains("pacs, ppo, grpo"));
    }

    #[test]
    fn reset_period_off_disables_resets() {
        let mut s = Settings::defaults();
        s.set("reset-period", "off", Source::Cli).unwrap();
        assert_eq!(s.trainer_config().unwrap().reset_period, None);
    }

    #[test]
    fn sweep_axes_follow_declaration_order() {
        let mut s = Settings::defaults();
        s.set("sweep-estimator", "rloo,grpo,dr-grpo", Source::Cli)
            .unwrap();
        s.set("sweep-beta", "0.1,1", Source::Cli).unwrap();
        let axes = s.sweep_axes().unwrap();
        assert_eq!(axes[0].0, "beta");
        assert_eq!(axes[0].1, vec!["0.1", "1"]);
        assert_eq!(axes[1].0, "estimator");
        assert_eq!(axes[1].1.len(), 3);
    }
}
