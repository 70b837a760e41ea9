//! TOML configuration files.
//!
//! Every setting is addressed as `section.key`. Unknown keys are rejected, as are
//! mode parameters that the selected mode does not take. Manifests written by runs
//! use the same format and can be fed back as configs.
//!
//! ```toml
//! [env]
//! name = "cartpole"
//!
//! [mode]
//! tag = "self_data_mix"
//! p_self = 0.5
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::agent::{EpsilonSchedule, TargetVariant};
use crate::env::{EnvName, StickyConfig};
use crate::neural::{OptimizerConfig, OptimizerKind};
use crate::tandem::{ExperimentConfig, ExperimentMode};
use crate::{Error, Result};

pub const DEFAULT_FORK_ITER: usize = 50;
pub const DEFAULT_P_SELF: f64 = 0.5;
pub const DEFAULT_N_PASSIVE: usize = 2;
pub const DEFAULT_TIED_K: usize = 1;
pub const DEFAULT_REPLAY_SIZE: usize = 5_000;
pub const DEFAULT_EPSILONS: [f64; 4] = [0.0, 0.01, 0.1, 1.0];
pub const DEFAULT_DEPTHS: [usize; 3] = [1, 2, 3];
pub const DEFAULT_WIDTHS: [usize; 3] = [32, 64, 128];

const KEYS: &[&str] = &[
    "experiment.seed",
    "experiment.iterations",
    "experiment.steps_per_iteration",
    "experiment.learning_starts",
    "experiment.update_period",
    "experiment.target_sync_period",
    "experiment.batch_size",
    "experiment.eval_steps",
    "experiment.gamma",
    "experiment.record_wall_time",
    "env.name",
    "env.sticky",
    "network.hidden_layers",
    "network.hidden_units",
    "optimizer.kind",
    "optimizer.learning_rate",
    "optimizer.rho",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.epsilon",
    "epsilon.start",
    "epsilon.train",
    "epsilon.warmup_steps",
    "epsilon.eval",
    "replay.active_capacity",
    "replay.passive_capacity",
    "metrics.n_probe",
    "metrics.overestimation",
    "mode.tag",
];

const MODE_TAGS: &[&str] = &[
    "vanilla",
    "bootstrap_variant",
    "eps_sweep",
    "sticky",
    "replay_size",
    "fork_fixed_policy",
    "fork_fixed_replay",
    "groundhog",
    "self_data_mix",
    "update_ratio",
    "sarsa_eval",
    "mc_eval",
    "distill",
    "tied_layers",
    "arch_sweep",
    "optimizer_choice",
];

fn mode_params(tag: &str) -> &'static [&'static str] {
    match tag {
        "bootstrap_variant" => &["variant"],
        "eps_sweep" => &["epsilons"],
        "sticky" => &["sticky"],
        "replay_size" => &["capacity"],
        "fork_fixed_policy" => &["fork_iter", "post_fork_epsilon"],
        "fork_fixed_replay" | "groundhog" | "sarsa_eval" => &["fork_iter"],
        "mc_eval" => &["fork_iter", "fresh_init"],
        "self_data_mix" => &["p_self"],
        "update_ratio" => &["n_passive"],
        "tied_layers" => &["k"],
        "arch_sweep" => &["depths", "widths"],
        "optimizer_choice" => &["optimizer"],
        _ => &[],
    }
}

/// Raw `section.key → value` entries of a configuration text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("syntax", e.to_string().trim_end()))?;
        Self::from_table(&table)
    }

    pub fn from_table(table: &toml::Table) -> Result<Self> {
        let mut entries = BTreeMap::new();
        flatten("", table, &mut entries)?;
        Ok(Self { entries })
    }

    /// All `section.key → value` pairs, in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.trim().to_string(), value.trim().to_string());
    }

    /// Applies a `section.key=value` override, replacing any value from the file.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must have the form section.key=value"))?;
        if !key.contains('.') {
            return Err(Error::config(key.trim(), "override keys are written section.key"));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        self.set(key, value);
        Ok(())
    }

    /// Resolves every key against the defaults and validates the result.
    pub fn to_config(&self) -> Result<ExperimentConfig> {
        let mut reader = Reader {
            entries: self.entries.clone(),
        };
        let config = reader.build()?;
        if let Some(key) = reader.entries.keys().next() {
            let message = match key.strip_prefix("mode.") {
                Some(param) if MODE_TAGS.iter().any(|t| mode_params(t).contains(&param)) => {
                    format!("not a parameter of mode `{}`", config.mode.tag())
                }
                _ => "unknown key".to_string(),
            };
            return Err(Error::config(key.clone(), message));
        }
        config.validate()?;
        Ok(config)
    }
}

/// Parses configuration text straight into a validated config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    ConfigFile::parse(text)?.to_config()
}

/// Collapses nested tables into `a.b.c` keys with scalar values rendered as text;
/// arrays become comma-separated lists.
fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, String>) -> Result<()> {
    for (name, value) in table {
        let key = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        let text = match value {
            toml::Value::Table(inner) => {
                flatten(&key, inner, out)?;
                continue;
            }
            toml::Value::Array(items) => items
                .iter()
                .map(|item| scalar(&key, item))
                .collect::<Result<Vec<_>>>()?
                .join(","),
            other => scalar(&key, other)?,
        };
        out.insert(key, text);
    }
    Ok(())
}

fn scalar(key: &str, value: &toml::Value) -> Result<String> {
    match value {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(format!("{f:?}")),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(Error::config(key, "expected a number, string, boolean or list of those")),
    }
}

struct Reader {
    entries: BTreeMap<String, String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<String> {
        debug_assert!(KEYS.contains(&key) || key.starts_with("mode."));
        self.entries.remove(key)
    }

    fn parsed<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}"))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|item| {
                    item.parse::<T>()
                        .map_err(|e| Error::config(key, format!("cannot parse `{item}`: {e}")))
                })
                .collect(),
        }
    }

    fn build(&mut self) -> Result<ExperimentConfig> {
        let env: EnvName = self.parsed("env.name", ExperimentConfig::default().env)?;
        let d = ExperimentConfig::for_env(env);
        let sticky = StickyConfig {
            repeat_probability: self.parsed("env.sticky", d.sticky.repeat_probability)?,
        };

        let kind: OptimizerKind = self.parsed("optimizer.kind", d.optimizer.kind)?;
        let learning_rate = self.parsed("optimizer.learning_rate", d.optimizer.learning_rate)?;
        let base = match kind {
            OptimizerKind::RmsProp => OptimizerConfig::rmsprop(learning_rate),
            OptimizerKind::Adam => OptimizerConfig::adam(learning_rate),
        };
        let optimizer = OptimizerConfig {
            kind,
            learning_rate,
            rho: self.parsed("optimizer.rho", base.rho)?,
            beta1: self.parsed("optimizer.beta1", base.beta1)?,
            beta2: self.parsed("optimizer.beta2", base.beta2)?,
            epsilon: self.parsed("optimizer.epsilon", base.epsilon)?,
        };

        let train = self.parsed("epsilon.train", d.epsilon.train)?;
        let epsilon = EpsilonSchedule {
            start: self.parsed("epsilon.start", train)?,
            train,
            warmup_steps: self.parsed("epsilon.warmup_steps", d.epsilon.warmup_steps)?,
            eval: self.parsed("epsilon.eval", d.epsilon.eval)?,
        };

        let active_capacity = self.parsed("replay.active_capacity", d.active_capacity)?;
        let passive_capacity = self.parsed("replay.passive_capacity", active_capacity)?;
        let iterations = self.parsed("experiment.iterations", d.iterations)?;

        let tag = self.take("mode.tag").unwrap_or_else(|| "vanilla".to_string());
        let tag = tag.trim().to_ascii_lowercase();
        let mode = match tag.as_str() {
            "vanilla" => ExperimentMode::Vanilla,
            "bootstrap_variant" => ExperimentMode::BootstrapVariant(self.parsed("mode.variant", TargetVariant::Vanilla)?),
            "eps_sweep" => ExperimentMode::EpsSweep(self.list("mode.epsilons", &DEFAULT_EPSILONS)?),
            "sticky" => ExperimentMode::Sticky(self.parsed("mode.sticky", StickyConfig::DEFAULT_PROBABILITY)?),
            "replay_size" => ExperimentMode::ReplaySize(self.parsed("mode.capacity", DEFAULT_REPLAY_SIZE)?),
            "fork_fixed_policy" => ExperimentMode::ForkFixedPolicy {
                fork_iter: self.parsed("mode.fork_iter", DEFAULT_FORK_ITER)?,
                post_fork_epsilon: self.parsed("mode.post_fork_epsilon", epsilon.train)?,
            },
            "fork_fixed_replay" => ExperimentMode::ForkFixedReplay {
                fork_iter: self.parsed("mode.fork_iter", DEFAULT_FORK_ITER)?,
            },
            "groundhog" => ExperimentMode::Groundhog {
                fork_iter: self.parsed("mode.fork_iter", DEFAULT_FORK_ITER)?,
            },
            "self_data_mix" => ExperimentMode::SelfDataMix {
                p_self: self.parsed("mode.p_self", DEFAULT_P_SELF)?,
            },
            "update_ratio" => ExperimentMode::UpdateRatio {
                n_passive: self.parsed("mode.n_passive", DEFAULT_N_PASSIVE)?,
            },
            "sarsa_eval" => ExperimentMode::SarsaEval {
                fork_iter: self.parsed("mode.fork_iter", DEFAULT_FORK_ITER)?,
            },
            "mc_eval" => ExperimentMode::MonteCarloEval {
                fork_iter: self.parsed("mode.fork_iter", DEFAULT_FORK_ITER)?,
                fresh_init: self.parsed("mode.fresh_init", false)?,
            },
            "distill" => ExperimentMode::Distill,
            "tied_layers" => ExperimentMode::TiedLayers {
                k: self.parsed("mode.k", DEFAULT_TIED_K)?,
            },
            "arch_sweep" => ExperimentMode::ArchSweep {
                depths: self.list("mode.depths", &DEFAULT_DEPTHS)?,
                widths: self.list("mode.widths", &DEFAULT_WIDTHS)?,
            },
            "optimizer_choice" => ExperimentMode::OptimizerChoice(self.parsed("mode.optimizer", OptimizerKind::RmsProp)?),
            other => {
                return Err(Error::config(
                    "mode.tag",
                    format!("unknown mode `{other}` (expected one of {})", MODE_TAGS.join(", ")),
                ))
            }
        };

        Ok(ExperimentConfig {
            mode,
            env,
            sticky,
            hidden_layers: self.parsed("network.hidden_layers", d.hidden_layers)?,
            hidden_units: self.parsed("network.hidden_units", d.hidden_units)?,
            optimizer,
            gamma: self.parsed("experiment.gamma", d.gamma)?,
            epsilon,
            active_capacity,
            passive_capacity,
            iterations,
            steps_per_iteration: self.parsed("experiment.steps_per_iteration", d.steps_per_iteration)?,
            learning_starts: self.parsed("experiment.learning_starts", d.learning_starts)?,
            update_period: self.parsed("experiment.update_period", d.update_period)?,
            target_sync_period: self.parsed("experiment.target_sync_period", d.target_sync_period)?,
            batch_size: self.parsed("experiment.batch_size", d.batch_size)?,
            eval_steps: self.parsed("experiment.eval_steps", d.eval_steps)?,
            n_probe: self.parsed("metrics.n_probe", d.n_probe)?,
            overestimation: self.parsed("metrics.overestimation", d.overestimation)?,
            seed: self.parsed("experiment.seed", d.seed)?,
            record_wall_time: self.parsed("experiment.record_wall_time", d.record_wall_time)?,
        })
    }
}

fn list<T: std::fmt::Debug>(items: &[T]) -> String {
    let items: Vec<String> = items.iter().map(|v| format!("{v:?}")).collect();
    format!("[{}]", items.join(", "))
}

fn quoted(s: &str) -> String {
    format!("\"{s}\"")
}

/// Every resolved setting as a TOML document. Floats use the shortest exact
/// representation, so parsing the manifest reproduces `config`.
pub fn manifest(config: &ExperimentConfig) -> String {
    let mut out = String::from("# resolved experiment configuration\n");
    let mut line = |key: &str, value: String| {
        let _ = writeln!(out, "{key} = {value}");
    };
    // TOML integers are signed 64-bit; larger seeds are written as strings.
    let seed = config.seed.to_string();
    line("experiment.seed", if config.seed > i64::MAX as u64 { quoted(&seed) } else { seed });
    line("experiment.iterations", config.iterations.to_string());
    line("experiment.steps_per_iteration", config.steps_per_iteration.to_string());
    line("experiment.learning_starts", config.learning_starts.to_string());
    line("experiment.update_period", config.update_period.to_string());
    line("experiment.target_sync_period", config.target_sync_period.to_string());
    line("experiment.batch_size", config.batch_size.to_string());
    line("experiment.eval_steps", config.eval_steps.to_string());
    line("experiment.gamma", format!("{:?}", config.gamma));
    line("experiment.record_wall_time", config.record_wall_time.to_string());
    line("env.name", quoted(config.env.as_str()));
    line("env.sticky", format!("{:?}", config.sticky.repeat_probability));
    line("network.hidden_layers", config.hidden_layers.to_string());
    line("network.hidden_units", config.hidden_units.to_string());
    line("optimizer.kind", quoted(config.optimizer.kind.as_str()));
    line("optimizer.learning_rate", format!("{:?}", config.optimizer.learning_rate));
    line("optimizer.rho", format!("{:?}", config.optimizer.rho));
    line("optimizer.beta1", format!("{:?}", config.optimizer.beta1));
    line("optimizer.beta2", format!("{:?}", config.optimizer.beta2));
    line("optimizer.epsilon", format!("{:?}", config.optimizer.epsilon));
    line("epsilon.start", format!("{:?}", config.epsilon.start));
    line("epsilon.train", format!("{:?}", config.epsilon.train));
    line("epsilon.warmup_steps", config.epsilon.warmup_steps.to_string());
    line("epsilon.eval", format!("{:?}", config.epsilon.eval));
    line("replay.active_capacity", config.active_capacity.to_string());
    line("replay.passive_capacity", config.passive_capacity.to_string());
    line("metrics.n_probe", config.n_probe.to_string());
    line("metrics.overestimation", quoted(config.overestimation.as_str()));
    line("mode.tag", quoted(config.mode.tag()));
    match &config.mode {
        ExperimentMode::Vanilla | ExperimentMode::Distill => {}
        ExperimentMode::BootstrapVariant(v) => line("mode.variant", quoted(v.as_str())),
        ExperimentMode::EpsSweep(values) => line("mode.epsilons", list(values)),
        ExperimentMode::Sticky(p) => line("mode.sticky", format!("{p:?}")),
        ExperimentMode::ReplaySize(c) => line("mode.capacity", c.to_string()),
        ExperimentMode::ForkFixedPolicy {
            fork_iter,
            post_fork_epsilon,
        } => {
            line("mode.fork_iter", fork_iter.to_string());
            line("mode.post_fork_epsilon", format!("{post_fork_epsilon:?}"));
        }
        ExperimentMode::ForkFixedReplay { fork_iter }
        | ExperimentMode::Groundhog { fork_iter }
        | ExperimentMode::SarsaEval { fork_iter } => line("mode.fork_iter", fork_iter.to_string()),
        ExperimentMode::MonteCarloEval { fork_iter, fresh_init } => {
            line("mode.fork_iter", fork_iter.to_string());
            line("mode.fresh_init", fresh_init.to_string());
        }
        ExperimentMode::SelfDataMix { p_self } => line("mode.p_self", format!("{p_self:?}")),
        ExperimentMode::UpdateRatio { n_passive } => line("mode.n_passive", n_passive.to_string()),
        ExperimentMode::TiedLayers { k } => line("mode.k", k.to_string()),
        ExperimentMode::ArchSweep { depths, widths } => {
            line("mode.depths", list(depths));
            line("mode.widths", list(widths));
        }
        ExperimentMode::OptimizerChoice(kind) => line("mode.optimizer", quoted(kind.as_str())),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unset_keys_take_the_environment_defaults() {
        let grid = parse_config("[env]\nname = \"gridworld\"\n").unwrap();
        assert_eq!(grid, ExperimentConfig::for_env(EnvName::GridWorld));
        assert_eq!(grid.epsilon.train, 0.1);
        let pinned = parse_config("[env]\nname = \"gridworld\"\n[epsilon]\ntrain = 0.01\n").unwrap();
        assert_eq!(pinned.epsilon.train, 0.01);
    }

    #[test]
    fn sections_and_dotted_keys() {
        let cfg = parse_config(
            "experiment.iterations = 7\n[env]\nname = \"gridworld\"\n\n# comment\n[mode]\ntag = \"self_data_mix\"\np_self = 0.25 # inline\n",
        )
        .unwrap();
        assert_eq!(cfg.env, EnvName::GridWorld);
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.mode, ExperimentMode::SelfDataMix { p_self: 0.25 });
    }

    #[test]
    fn unknown_key_is_named() {
        match parse_config("[network]\nlayers = 3\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "network.layers"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn foreign_mode_parameter_rejected() {
        match parse_config("[mode]\ntag = \"vanilla\"\np_self = 0.5\n") {
            Err(Error::Config { key, message }) => {
                assert_eq!(key, "mode.p_self");
                assert!(message.contains("vanilla"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oversized_tied_k_names_k() {
        let text = "[network]\nhidden_layers = 2\n[mode]\ntag = \"tied_layers\"\nk = 99\n";
        match parse_config(text) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "mode.k"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_names_key() {
        match parse_config("[experiment]\nbatch_size = \"lots\"\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "experiment.batch_size"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(parse_config("[env]\nname = \"cartpole\"\nname = \"acrobot\"\n").is_err());
    }

    #[test]
    fn override_replaces_file_value() {
        let mut file = ConfigFile::parse("[mode]\ntag = \"self_data_mix\"\np_self = 0.1\n").unwrap();
        file.apply_override("mode.p_self=0.5").unwrap();
        let cfg = file.to_config().unwrap();
        assert!(manifest(&cfg).contains("mode.tag = \"self_data_mix\"\nmode.p_self = 0.5\n"));
        assert!(file.apply_override("p_self").is_err());
    }

    #[test]
    fn rmsprop_kind_picks_its_own_defaults() {
        let cfg = parse_config("[optimizer]\nkind = \"rmsprop\"\nlearning_rate = 0.00025\n").unwrap();
        assert_eq!(cfg.optimizer, OptimizerConfig::rmsprop(0.00025));
    }

    #[test]
    fn manifest_round_trips_every_mode() {
        let modes = [
            ExperimentMode::Vanilla,
            ExperimentMode::BootstrapVariant(TargetVariant::SameTargetPi),
            ExperimentMode::EpsSweep(vec![0.0, 0.1, 1.0]),
            ExperimentMode::Sticky(0.3),
            ExperimentMode::ReplaySize(250_000),
            ExperimentMode::ForkFixedPolicy {
                fork_iter: 3,
                post_fork_epsilon: 0.07,
            },
            ExperimentMode::ForkFixedReplay { fork_iter: 2 },
            ExperimentMode::Groundhog { fork_iter: 4 },
            ExperimentMode::SelfDataMix { p_self: 0.1 },
            ExperimentMode::UpdateRatio { n_passive: 3 },
            ExperimentMode::SarsaEval { fork_iter: 5 },
            ExperimentMode::MonteCarloEval {
                fork_iter: 6,
                fresh_init: true,
            },
            ExperimentMode::Distill,
            ExperimentMode::TiedLayers { k: 2 },
            ExperimentMode::ArchSweep {
                depths: vec![0, 4],
                widths: vec![8],
            },
            ExperimentMode::OptimizerChoice(OptimizerKind::RmsProp),
        ];
        for mode in modes {
            let cfg = ExperimentConfig {
                mode,
                gamma: 0.1 + 0.2,
                iterations: 10,
                seed: 17,
                ..ExperimentConfig::default()
            };
            assert_eq!(parse_config(&manifest(&cfg)).unwrap(), cfg);
        }
    }
}
