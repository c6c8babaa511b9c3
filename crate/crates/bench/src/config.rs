//! TOML configuration: sections `plant`, `forecaster`, `env`, `reward`,
//! `agent` and `experiment`. Every key is optional; unknown keys are
//! rejected.

use std::path::Path;

use calender::envloop::{EpisodeConfig, RewardConfig};
use calender::forecast::ForecasterConfig;
use calender::mpdppo::{PpoConfig, Variant};
use calender::neuro::BranchSpec;
use calender::plantgen::{Excitation, PlantParams};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_error, Error, Result};

/// Per-branch overrides on top of the built-in width/thickness branches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchOverrides {
    pub clip_epsilon: Option<f64>,
    pub discount: Option<f64>,
    pub loss_weight: Option<f64>,
    pub init_sigma: Option<f64>,
    pub hidden_sizes: Option<Vec<usize>>,
}

impl BranchOverrides {
    pub fn apply(&self, mut base: BranchSpec) -> BranchSpec {
        if let Some(v) = self.clip_epsilon {
            base.clip_epsilon = v;
        }
        if let Some(v) = self.discount {
            base.discount = v;
        }
        if let Some(v) = self.loss_weight {
            base.loss_weight = v;
        }
        if let Some(v) = self.init_sigma {
            base.init_sigma = v;
        }
        if let Some(v) = &self.hidden_sizes {
            base.hidden_sizes = v.clone();
        }
        base
    }

    fn validate(&self, key: &str) -> Result<()> {
        let check = |field: &str, v: Option<f64>, ok: fn(f64) -> bool, what: &str| match v {
            Some(x) if !ok(x) => Err(invalid(&format!("{key}.{field}"), format!("{x} {what}"))),
            _ => Ok(()),
        };
        check("clip_epsilon", self.clip_epsilon, |x| x > 0.0 && x < 1.0, "outside (0, 1)")?;
        check("discount", self.discount, |x| x > 0.0 && x <= 1.0, "outside (0, 1]")?;
        check("loss_weight", self.loss_weight, |x| x >= 0.0 && x.is_finite(), "is negative")?;
        check("init_sigma", self.init_sigma, |x| x > 0.0 && x.is_finite(), "is not positive")?;
        if self.hidden_sizes.as_ref().is_some_and(|h| h.contains(&0)) {
            return Err(invalid(&format!("{key}.hidden_sizes"), "layer sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub trunk_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub width: BranchOverrides,
    pub thickness: BranchOverrides,
    pub ppo: PpoConfig,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self {
            trunk_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            width: BranchOverrides::default(),
            thickness: BranchOverrides::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl AgentSection {
    pub fn width_branch(&self) -> BranchSpec {
        self.width.apply(BranchSpec::width())
    }

    pub fn thickness_branch(&self) -> BranchSpec {
        self.thickness.apply(BranchSpec::thickness())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Process {
    /// Trained width and thickness forecasters.
    Forecaster,
    /// The synthetic plant itself.
    Plant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub episodes: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    /// `[width mm, thickness mm]` target pairs.
    pub targets: Vec<[f64; 2]>,
    pub steps_per_episode: Vec<usize>,
    /// Variants run by `run-grid`.
    pub variants: Vec<Variant>,
    pub ablation_target: [f64; 2],
    pub ablation_steps: usize,
    pub dataset_steps: usize,
    pub data_seed: u64,
    pub excitation: Excitation,
    /// Process the agents interact with.
    pub process: Process,
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            episodes: 100,
            eval_episodes: 10,
            seeds: vec![0, 1, 2, 3, 4],
            targets: vec![[480.0, 3.0], [480.0, 2.2], [380.0, 3.0], [380.0, 2.2]],
            steps_per_episode: vec![50, 100],
            variants: vec![Variant::MpdPpo],
            ablation_target: [480.0, 3.0],
            ablation_steps: 100,
            dataset_steps: 50_000,
            data_seed: 0,
            excitation: Excitation::Mixed,
            process: Process::Forecaster,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub plant: PlantParams,
    pub forecaster: ForecasterConfig,
    pub env: EpisodeConfig,
    pub reward: RewardConfig,
    pub agent: AgentSection,
    pub experiment: ExperimentSection,
}

fn section<T>(key: &str, r: calender::Result<T>) -> Result<T> {
    r.map_err(|e| invalid(key, e))
}

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_owned(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        section("plant", self.plant.validate())?;
        section("forecaster", self.forecaster.validate())?;
        section("env", self.env.validate())?;
        section("reward", self.reward.validate())?;
        self.agent.width.validate("agent.width")?;
        self.agent.thickness.validate("agent.thickness")?;
        if self.agent.trunk_hidden.contains(&0) {
            return Err(invalid("agent.trunk_hidden", "layer sizes must be positive"));
        }
        if self.agent.critic_hidden.contains(&0) {
            return Err(invalid("agent.critic_hidden", "layer sizes must be positive"));
        }
        section("agent.ppo", self.agent.ppo.validate())?;
        let x = &self.experiment;
        let positive = [
            ("experiment.episodes", x.episodes),
            ("experiment.eval_episodes", x.eval_episodes),
            ("experiment.ablation_steps", x.ablation_steps),
            ("experiment.workers", x.workers),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if x.seeds.is_empty() {
            return Err(invalid("experiment.seeds", "at least one seed is required"));
        }
        if x.targets.is_empty() {
            return Err(invalid("experiment.targets", "at least one target pair is required"));
        }
        if x.targets.iter().chain([&x.ablation_target]).flatten().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("experiment.targets", "targets must be positive"));
        }
        if x.steps_per_episode.is_empty() || x.steps_per_episode.contains(&0) {
            return Err(invalid("experiment.steps_per_episode", "needs positive episode lengths"));
        }
        if x.variants.is_empty() {
            return Err(invalid("experiment.variants", "at least one variant is required"));
        }
        if x.dataset_steps <= self.forecaster.window + 1 {
            return Err(invalid("experiment.dataset_steps", "shorter than one forecaster window"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    Config::from_toml(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Config> {
        Config::from_toml(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse("").unwrap(), Config::default());
    }

    #[test]
    fn branch_override_round_trips() {
        let c = parse("[agent.width]\nclip_epsilon = 0.2\n[agent.thickness]\nclip_epsilon = 0.05\n").unwrap();
        assert_eq!(c.agent.width_branch().clip_epsilon, 0.2);
        assert_eq!(c.agent.thickness_branch().clip_epsilon, 0.05);
        assert_eq!(c.agent.thickness_branch().action_dims, 2);
    }

    #[test]
    fn reward_clip_is_parsed() {
        let c = parse("[reward]\ntotal_clip = [-5.0, 5.0]\nweights = [0.7, 0.3]\n").unwrap();
        assert_eq!(c.reward.total_clip, [-5.0, 5.0]);
        assert_eq!(c.reward.weights, [0.7, 0.3]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse("[agent.width]\nclip = 0.2\n").unwrap_err().to_string();
        assert!(e.contains("clip"), "{e}");
        assert!(parse("[nonsense]\n").is_err());
        assert!(parse("[experiment]\nepisode = 3\n").is_err());
    }

    #[test]
    fn out_of_range_values_name_their_key() {
        let e = parse("[agent.width]\nclip_epsilon = 1.5\n").unwrap_err().to_string();
        assert!(e.starts_with("agent.width.clip_epsilon"), "{e}");
        let e = parse("[experiment]\nseeds = []\n").unwrap_err().to_string();
        assert!(e.starts_with("experiment.seeds"), "{e}");
        let e = parse("[reward]\ntotal_clip = [5.0, -5.0]\n").unwrap_err().to_string();
        assert!(e.starts_with("reward"), "{e}");
        let e = parse("[agent.ppo]\nepochs = 0\n").unwrap_err().to_string();
        assert!(e.starts_with("agent.ppo"), "{e}");
    }

    #[test]
    fn variants_parse_by_name() {
        let c = parse("[experiment]\nvariants = [\"mpd-ppo\", \"reward-3\"]\n").unwrap();
        assert_eq!(c.experiment.variants, vec![Variant::MpdPpo, Variant::Reward(3)]);
        assert!(parse("[experiment]\nvariants = [\"dqn\"]\n").is_err());
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(load_config(Path::new("/nonexistent/cfg.toml")), Err(Error::Io { .. })));
    }
}
