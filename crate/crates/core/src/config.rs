//! Top-level run configuration (TOML) and stage provenance hashes.

use std::path::{Path, PathBuf};

use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{EnvConfig, HeightDist, ProbeSpec};
use crate::expert::ExpertConfig;
use crate::injector::{FreezePolicy, InjectorConfig};
use crate::train::{LrSchedule, TrainHyper};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub stage_a_per_task: usize,
    pub stage_a_height: HeightDist,
    pub stage_b_per_task: usize,
    pub stage_b_height: HeightDist,
    pub stage_b_decoy_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            stage_a_per_task: 200,
            stage_a_height: HeightDist::Fixed(0.003),
            stage_b_per_task: 20,
            stage_b_height: HeightDist::Mix(vec![HeightDist::Fixed(0.003), HeightDist::Uniform([0.0, 0.2])]),
            stage_b_decoy_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub model: ExpertConfig,
    #[serde(deserialize_with = "expert_train")]
    pub train: TrainHyper,
}

impl Default for ExpertSection {
    fn default() -> Self {
        Self {
            model: ExpertConfig::default(),
            train: TrainHyper {
                steps: 20_000,
                batch_size: 16,
                lr: 5e-4,
                grad_clip: 1.0,
                lr_schedule: LrSchedule::Cosine,
                warmup_steps: 500,
                keep_best: false,
            },
        }
    }
}

/// Keys present in the file replace those of `base`; the rest keep `base`'s values.
fn overlay<'de, D: Deserializer<'de>, T: Serialize + DeserializeOwned>(d: D, base: T) -> Result<T, D::Error> {
    let patch = toml::Table::deserialize(d)?;
    let mut merged = toml::Table::try_from(base).map_err(D::Error::custom)?;
    merged.extend(patch);
    merged.try_into().map_err(D::Error::custom)
}

fn expert_train<'de, D: Deserializer<'de>>(d: D) -> Result<TrainHyper, D::Error> {
    overlay(d, ExpertSection::default().train)
}

fn injector_train<'de, D: Deserializer<'de>>(d: D) -> Result<TrainHyper, D::Error> {
    overlay(d, InjectorSection::default().train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectorSection {
    pub model: InjectorConfig,
    #[serde(deserialize_with = "injector_train")]
    pub train: TrainHyper,
    /// Expert groups left trainable during fine-tuning; `["default"]` or `["freeze-all"]` name presets.
    pub freeze_policy: Vec<String>,
    /// Explicit injection sites. Empty means: take them from the skip analysis.
    pub block_ids: Vec<usize>,
}

impl Default for InjectorSection {
    fn default() -> Self {
        Self {
            model: InjectorConfig::default(),
            train: TrainHyper {
                steps: 4_000,
                batch_size: 16,
                lr: 5e-4,
                grad_clip: 1.0,
                lr_schedule: LrSchedule::Cosine,
                warmup_steps: 200,
                keep_best: false,
            },
            freeze_policy: vec!["default".into()],
            block_ids: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurgeonSection {
    pub epsilon: f64,
    pub max_count: usize,
    pub failure_floor: f64,
    pub window_max: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for SurgeonSection {
    fn default() -> Self {
        Self { epsilon: 0.05, max_count: 5, failure_floor: 0.1, window_max: 5, episodes: 100, seeds: vec![0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub train_height: f64,
    pub height_probe: f64,
    pub arms: Vec<String>,
    /// Actions executed from each sampled chunk before re-planning.
    pub exec_horizon: usize,
    /// Evaluate a best-loss checkpoint instead of the last one. Watermarks the report.
    pub best_checkpoint: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            episodes: 100,
            train_height: 0.003,
            height_probe: 0.052,
            arms: vec!["pc-injected".into(), "ablation-2d".into()],
            exec_horizon: 8,
            best_checkpoint: false,
        }
    }
}

impl EvalSection {
    pub fn probes(&self) -> Vec<(String, ProbeSpec)> {
        let at = |h: f64, decoy: bool| ProbeSpec { table_height: HeightDist::Fixed(h), decoy, ..Default::default() };
        vec![
            ("multitask".into(), at(self.train_height, false)),
            ("height".into(), at(self.height_probe, false)),
            ("decoy".into(), at(self.train_height, true)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub env: EnvConfig,
    pub data: DataSection,
    pub expert: ExpertSection,
    pub injector: InjectorSection,
    pub surgeon: SurgeonSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            data: DataSection::default(),
            expert: ExpertSection::default(),
            injector: InjectorSection::default(),
            surgeon: SurgeonSection::default(),
            eval: EvalSection::default(),
        }
    }
}

pub const ARMS: [&str; 3] = ["pc-injected", "ablation-2d", "stage-a"];

fn hash_json<S: Serialize>(v: &S) -> String {
    let value = serde_json::to_value(v).expect("config serialises");
    hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serialises")))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            ConfigError::Parse(format!("line {line}: {}", e.message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.expert.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.injector.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        FreezePolicy::from_names(&self.injector.freeze_policy).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.injector.model.num_points != self.env.num_points {
            return inv(format!(
                "injector expects {} points but the environment produces {}",
                self.injector.model.num_points, self.env.num_points
            ));
        }
        if self.data.stage_a_per_task == 0 || self.data.stage_b_per_task == 0 {
            return inv("demo counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.data.stage_b_decoy_fraction) {
            return inv("decoy fraction must lie in [0, 1]".into());
        }
        for (name, t) in [("expert", &self.expert.train), ("injector", &self.injector.train)] {
            if t.batch_size == 0 || !(t.lr > 0.0) || !(t.grad_clip > 0.0) {
                return inv(format!("{name} training needs positive batch size, lr and clip"));
            }
        }
        if self.eval.episodes == 0 || self.eval.seeds.is_empty() || self.surgeon.episodes == 0 || self.surgeon.seeds.is_empty() {
            return inv("evaluation needs episodes and seeds".into());
        }
        if let Some(a) = self.eval.arms.iter().find(|a| !ARMS.contains(&a.as_str())) {
            return inv(format!("unknown arm {a:?}"));
        }
        if self.eval.best_checkpoint && !self.injector.train.keep_best {
            return inv("eval.best_checkpoint needs injector.train.keep_best".into());
        }
        if self.eval.exec_horizon == 0 {
            return inv("exec_horizon must be positive".into());
        }
        Ok(())
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        FreezePolicy::from_names(&self.injector.freeze_policy).expect("validated")
    }

    /// Hash of everything that determines the generated datasets.
    pub fn data_hash(&self) -> String {
        hash_json(&("data", self.seed, &self.env, &self.data))
    }

    pub fn expert_hash(&self) -> String {
        hash_json(&("expert", self.data_hash(), &self.expert))
    }

    pub fn skip_hash(&self) -> String {
        hash_json(&("skip", self.expert_hash(), &self.surgeon, self.eval.exec_horizon, self.eval.train_height))
    }

    pub fn injector_hash(&self) -> String {
        hash_json(&("injector", self.skip_hash(), &self.injector))
    }

    pub fn eval_hash(&self) -> String {
        hash_json(&("eval", self.injector_hash(), &self.eval))
    }

    /// Hash of the whole run, excluding the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hash_json(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[expert.train]\nsteps = 10\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.expert.train.steps, 10);
        assert_eq!(c.expert.train, TrainHyper { steps: 10, ..ExpertSection::default().train });
        let c = RunConfig::from_toml("[injector.train]\nlr = 0.5\n").unwrap();
        assert_eq!(c.injector.train, TrainHyper { lr: 0.5, ..InjectorSection::default().train });
        assert!(RunConfig::from_toml("[injector.train]\nlearning_rate = 0.5\n").is_err());
        assert_eq!(c.data, DataSection::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[injector]\nfreeze_policy = [\"heads\"]"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[env]\nnum_points = 256"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[eval]\narms = [\"pointnet\"]"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn stage_hashes_chain() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.episodes = 7;
        assert_eq!(a.injector_hash(), b.injector_hash());
        assert_ne!(a.eval_hash(), b.eval_hash());
        let mut c = a.clone();
        c.data.stage_b_per_task = 3;
        assert_ne!(a.expert_hash(), c.expert_hash());
        assert_ne!(a.eval_hash(), c.eval_hash());
        let mut d = a.clone();
        d.out_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), d.config_hash());
    }
}
