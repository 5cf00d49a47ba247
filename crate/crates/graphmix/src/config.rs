//! Run configuration: one TOML file with `[env]`, `[model]`, `[train]` and
//! `[io]` tables. Omitted keys take their defaults and unknown keys are
//! rejected.
//!
//! ```toml
//! [env]
//! name = "coop_grid"
//! n_agents = 3
//!
//! [train]
//! total_steps = 200000
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use graphmix_core::envs::{CoopGrid, CoopGridConfig, Env, Environment, TwoStep, TwoStepConfig};
use graphmix_core::model::{GraphMix, ModelConfig, ModelDims};
use graphmix_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Environment table, selected by its `name` key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    TwoStep(TwoStepConfig),
    CoopGrid(CoopGridConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<Env, graphmix_core::Error> {
        Ok(match self {
            EnvConfig::TwoStep(c) => Env::TwoStep(TwoStep::new(c.clone())?),
            EnvConfig::CoopGrid(c) => Env::CoopGrid(CoopGrid::new(c.clone())?),
        })
    }

    /// Local-loss weight used when `[train]` does not set one: the tabular
    /// game has no credit to assign, the grid task does.
    pub fn default_lambda_local(&self) -> f64 {
        match self {
            EnvConfig::TwoStep(_) => 0.0,
            EnvConfig::CoopGrid(_) => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Used when neither `--out` nor `GRAPHMIX_OUT` is given.
    pub out_dir: PathBuf,
    /// A checkpoint is written after every this many evaluations and at
    /// the end of the run.
    pub checkpoint_evals: u64,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: PathBuf::from("runs/default"), checkpoint_evals: 1 }
    }
}

/// Everything that determines a run, given its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl RunConfig {
    /// Reads a TOML config, or the resolved config recorded in a run's
    /// `manifest.jsonl`.
    pub fn load(path: &Path) -> Result<RunConfig, Error> {
        let text = fs::read_to_string(path).map_err(Error::read(path))?;
        let invalid = |message: String| Error::Config { path: path.to_path_buf(), message };
        let config = if path.extension().is_some_and(|e| e == "jsonl") {
            let first = text.lines().next().ok_or_else(|| invalid("empty manifest".into()))?;
            let record: serde_json::Value = serde_json::from_str(first).map_err(|e| invalid(e.to_string()))?;
            let config = record.get("config").ok_or_else(|| invalid("manifest has no `config` record".into()))?;
            RunConfig::deserialize(config).map_err(|e| invalid(e.to_string()))?
        } else {
            RunConfig::parse(&text).map_err(invalid)?
        };
        config.validate().map_err(invalid)?;
        Ok(config)
    }

    /// Parses TOML text and fills per-environment defaults.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let lambda_set = table.get("train").and_then(|t| t.get("lambda_local")).is_some();
        if !lambda_set {
            config.train.lambda_local = config.env.default_lambda_local();
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        let env = self.env.build().map_err(|e| e.to_string())?;
        let model = self.model_for(&env).map_err(|e| e.to_string())?;
        graphmix_core::trainer::check_transfer(&model, env.spec()).map_err(|e| e.to_string())?;
        if self.io.checkpoint_evals == 0 {
            return Err("`io.checkpoint_evals` must be positive".into());
        }
        Ok(())
    }

    /// The model sized to `env`'s observation, action and state spaces.
    pub fn model_for(&self, env: &Env) -> Result<GraphMix, graphmix_core::Error> {
        let s = env.spec();
        GraphMix::new(self.model.clone(), ModelDims { obs_dim: s.obs_dim, n_actions: s.n_actions, state_dim: s.state_dim })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_grid_config_takes_defaults() {
        let c = RunConfig::parse("[env]\nname = \"coop_grid\"\n").unwrap();
        assert_eq!(c.env, EnvConfig::CoopGrid(CoopGridConfig::default()));
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.buffer_size, 5000);
        assert_eq!(c.train.target_period, 200);
        assert_eq!(c.train.lambda_local, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn lambda_default_depends_on_env_unless_set() {
        let c = RunConfig::parse("[env]\nname = \"two_step\"\n").unwrap();
        assert_eq!(c.train.lambda_local, 0.0);
        let c = RunConfig::parse("[env]\nname = \"two_step\"\n[train]\nlambda_local = 0.5\n").unwrap();
        assert_eq!(c.train.lambda_local, 0.5);
        let c = RunConfig::parse("[env]\nname = \"coop_grid\"\n[train]\nlambda_local = 0.0\n").unwrap();
        assert_eq!(c.train.lambda_local, 0.0);
    }

    #[test]
    fn payoff_tables_are_nested_arrays() {
        let text = "[env]\nname = \"two_step\"\nphase_b = [[0.0, 1.0], [1.0, 9.0]]\ngamma = 0.5\n";
        let c = RunConfig::parse(text).unwrap();
        match c.env {
            EnvConfig::TwoStep(t) => {
                assert_eq!(t.phase_b, vec![vec![0.0, 1.0], vec![1.0, 9.0]]);
                assert_eq!(t.gamma, 0.5);
            }
            other => panic!("wrong env {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::parse("[env]\nname = \"coop_grid\"\n\n[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(err.contains("line 5"), "{err}");
        let err = RunConfig::parse("[env]\nname = \"coop_grid\"\ngrid = 4\n").unwrap_err();
        assert!(err.contains("grid"), "{err}");
        let err = RunConfig::parse("[env]\nname = \"coop_grid\"\n[extra]\n").unwrap_err();
        assert!(err.contains("extra"), "{err}");
        let err = RunConfig::parse("[env]\nname = \"maze\"\n").unwrap_err();
        assert!(err.contains("maze"), "{err}");
    }

    #[test]
    fn validation_names_bad_values() {
        let c = RunConfig::parse("[env]\nname = \"coop_grid\"\n[train]\nlr = -1.0\n").unwrap();
        assert!(c.validate().unwrap_err().contains("lr"));
        let c = RunConfig::parse("[env]\nname = \"coop_grid\"\nn_agents = 7\n").unwrap();
        assert!(c.validate().unwrap_err().contains("max_agents"));
    }

    #[test]
    fn json_round_trip_preserves_config() {
        let c = RunConfig::parse("[env]\nname = \"coop_grid\"\nn_agents = 5\n[model]\nmixer = \"gcn\"\n").unwrap();
        let back: RunConfig = serde_json::from_value(c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
