//! Run configuration: every parameter group a subcommand may read, loaded
//! from TOML with defaults for anything left out.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tokplan::bench::ChainConfig;
use tokplan::codec::Vocabulary;
use tokplan::model::ModelConfig;
use tokplan::planner::PipelineConfig;
use tokplan::reward::RewardConfig;
use tokplan::rl::RlConfig;
use tokplan::scene::SceneConfig;
use tokplan::train::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: 2000, test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Also run the step, NMS-radius and goal-count sweeps.
    pub sweeps: bool,
    pub steps: Vec<usize>,
    pub nms_radii: Vec<f64>,
    pub goal_counts: Vec<usize>,
    /// Sampled draws per goal used by the step sweep.
    pub sweep_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sweeps: false, steps: vec![1, 2, 3, 4, 5], nms_radii: vec![0.0, 0.6, 1.2, 2.4, 4.8], goal_counts: vec![1, 2, 3, 4, 5, 6], sweep_draws: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub chain: ChainConfig,
    pub clips: usize,
    pub frames: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { chain: ChainConfig::default(), clips: 4, frames: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vocab: Vocabulary,
    /// Defaults to the tiny preset for `vocab`.
    pub model: Option<ModelConfig>,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub rl: RlConfig,
    pub pipeline: PipelineConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            vocab: Vocabulary::default(),
            model: None,
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            rl: RlConfig::default(),
            pipeline: PipelineConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| ModelConfig::tiny(&self.vocab))
    }

    pub fn hash(&self) -> String {
        tokplan::hash::hash_json(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[train]\nsteps = 12\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn toml_round_trip_keeps_hash() {
        let cfg = RunConfig { seed: 3, model: Some(ModelConfig::tiny(&Vocabulary::default())), ..RunConfig::default() };
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
