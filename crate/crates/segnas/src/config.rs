//! TOML run configuration. Every section mirrors a core config; missing keys
//! take the core defaults and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use segnas_core::controller::ControllerConfig;
use segnas_core::graph::AuxHead;
use segnas_core::nn::AdamConfig;
use segnas_core::search::{Ablation, FullTrainConfig, PSchedule, SearchConfig, SearchMode};
use segnas_core::tasks::{StubConfig, SyntheticTaskConfig, TeacherConfig};
use segnas_core::train::EncoderSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise: f64,
    pub train_images: usize,
    pub meta_val_fraction: f64,
    pub holdout_images: usize,
    pub seed: u64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let d = SyntheticTaskConfig::default();
        Self {
            image_size: d.image_size,
            num_classes: d.num_classes,
            min_shapes: d.min_shapes,
            max_shapes: d.max_shapes,
            noise: d.noise,
            train_images: d.train_images,
            meta_val_fraction: d.meta_val_fraction,
            holdout_images: d.holdout_images,
            seed: d.seed,
        }
    }
}

impl TaskSection {
    pub fn to_core(&self) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            image_size: self.image_size,
            num_classes: self.num_classes,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            noise: self.noise,
            train_images: self.train_images,
            meta_val_fraction: self.meta_val_fraction,
            holdout_images: self.holdout_images,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubSection {
    pub seed: u64,
    pub prefit_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for StubSection {
    fn default() -> Self {
        let d = StubConfig::default();
        Self {
            seed: d.seed,
            prefit_epochs: d.prefit_epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

impl StubSection {
    pub fn to_core(&self) -> StubConfig {
        StubConfig {
            seed: self.seed,
            prefit_epochs: self.prefit_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub adapt_channels: usize,
    pub max_epochs: usize,
    pub check_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let d = TeacherConfig::default();
        Self {
            adapt_channels: d.adapt_channels,
            max_epochs: d.max_epochs,
            check_every: d.check_every,
            batch_size: d.batch_size,
            lr: d.lr,
            threshold: d.threshold,
            seed: d.seed,
        }
    }
}

impl TeacherSection {
    pub fn to_core(&self) -> TeacherConfig {
        TeacherConfig {
            adapt_channels: self.adapt_channels,
            max_epochs: self.max_epochs,
            check_every: self.check_every,
            batch_size: self.batch_size,
            lr: self.lr,
            threshold: self.threshold,
            seed: self.seed,
        }
    }
}

fn parse_aux(s: &str) -> Result<AuxHead, ConfigError> {
    AuxHead::parse(s).ok_or_else(|| ConfigError::Invalid(format!("aux must be none, classifier or cell, got `{s}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub total_architectures: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub p_start: f64,
    pub p_end: f64,
    pub p_schedule: String,
    pub polyak_decays: [f64; 2],
    pub kd_coeff: f64,
    pub aux_coeff: f64,
    pub mode: String,
    pub polyak: bool,
    pub kd: bool,
    pub aux: String,
    pub adapt_channels: usize,
    pub batch_size: usize,
    pub decoder_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub encoder_lr: f64,
    pub encoder_momentum: f64,
    pub eval_batch: usize,
    pub seed: u64,
    pub top_k: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            total_architectures: d.total_architectures,
            stage1_epochs: d.stage1_epochs,
            stage2_epochs: d.stage2_epochs,
            p_start: d.p_start,
            p_end: d.p_end,
            p_schedule: d.p_schedule.name().into(),
            polyak_decays: [d.polyak_decays.0, d.polyak_decays.1],
            kd_coeff: d.kd_coeff,
            aux_coeff: d.aux_coeff,
            mode: d.mode.name().into(),
            polyak: d.ablation.polyak,
            kd: d.ablation.kd,
            aux: d.ablation.aux.name().into(),
            adapt_channels: d.adapt_channels,
            batch_size: d.batch_size,
            decoder_lr: d.decoder_lr,
            adam_beta1: d.adam.beta1,
            adam_beta2: d.adam.beta2,
            adam_eps: d.adam.eps,
            encoder_lr: d.encoder.lr,
            encoder_momentum: d.encoder.momentum,
            eval_batch: d.eval_batch,
            seed: d.seed,
            top_k: d.top_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub ppo_clip: f64,
    pub ppo_epochs: usize,
    pub batch_size: usize,
    pub baseline_decay: f64,
    pub entropy_coeff: f64,
    pub init_range: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let d = ControllerConfig::default();
        Self {
            layers: d.layers,
            hidden: d.hidden,
            embed_dim: d.embed_dim,
            lr: d.lr,
            ppo_clip: d.ppo_clip,
            ppo_epochs: d.ppo_epochs,
            batch_size: d.batch_size,
            baseline_decay: d.baseline_decay,
            entropy_coeff: d.entropy_coeff,
            init_range: d.init_range,
            adam_beta1: d.adam.beta1,
            adam_beta2: d.adam.beta2,
            adam_eps: d.adam.eps,
        }
    }
}

impl ControllerSection {
    pub fn to_core(&self) -> ControllerConfig {
        ControllerConfig {
            layers: self.layers,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            lr: self.lr,
            ppo_clip: self.ppo_clip,
            ppo_epochs: self.ppo_epochs,
            batch_size: self.batch_size,
            baseline_decay: self.baseline_decay,
            entropy_coeff: self.entropy_coeff,
            init_range: self.init_range,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FullTrainSection {
    pub stage_epochs: Vec<usize>,
    pub aux_coeffs: Vec<f64>,
    pub arm: String,
    pub adapt_channels: usize,
    pub decoder_lr: f64,
    pub encoder_lr: f64,
    pub encoder_momentum: f64,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for FullTrainSection {
    fn default() -> Self {
        let d = FullTrainConfig::default();
        Self {
            stage_epochs: d.stage_epochs,
            aux_coeffs: d.aux_coeffs,
            arm: d.arm.name().into(),
            adapt_channels: d.adapt_channels,
            decoder_lr: d.decoder_lr,
            encoder_lr: d.encoder.lr,
            encoder_momentum: d.encoder.momentum,
            batch_size: d.batch_size,
            eval_batch: d.eval_batch,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Cache directory for the dataset, encoder features and teacher logits.
    pub artifacts_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            artifacts_dir: PathBuf::from("artifacts"),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSection,
    pub stub: StubSection,
    pub teacher: TeacherSection,
    pub search: SearchSection,
    pub controller: ControllerSection,
    pub full_train: FullTrainSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task
            .to_core()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.search_config()?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.full_train_config()?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.run.workers == 0 {
            return Err(ConfigError::Invalid("run.workers must be positive".into()));
        }
        Ok(())
    }

    pub fn search_config(&self) -> Result<SearchConfig, ConfigError> {
        let s = &self.search;
        Ok(SearchConfig {
            total_architectures: s.total_architectures,
            stage1_epochs: s.stage1_epochs,
            stage2_epochs: s.stage2_epochs,
            p_start: s.p_start,
            p_end: s.p_end,
            p_schedule: PSchedule::parse(&s.p_schedule)
                .ok_or_else(|| ConfigError::Invalid(format!("p_schedule must be linear or constant, got `{}`", s.p_schedule)))?,
            polyak_decays: (s.polyak_decays[0], s.polyak_decays[1]),
            kd_coeff: s.kd_coeff,
            aux_coeff: s.aux_coeff,
            mode: SearchMode::parse(&s.mode)
                .ok_or_else(|| ConfigError::Invalid(format!("mode must be rl or random, got `{}`", s.mode)))?,
            ablation: Ablation {
                polyak: s.polyak,
                kd: s.kd,
                aux: parse_aux(&s.aux)?,
            },
            adapt_channels: s.adapt_channels,
            batch_size: s.batch_size,
            decoder_lr: s.decoder_lr,
            adam: AdamConfig {
                beta1: s.adam_beta1,
                beta2: s.adam_beta2,
                eps: s.adam_eps,
            },
            encoder: EncoderSpec {
                lr: s.encoder_lr,
                momentum: s.encoder_momentum,
            },
            eval_batch: s.eval_batch,
            seed: s.seed,
            top_k: s.top_k,
            controller: self.controller.to_core(),
        })
    }

    pub fn full_train_config(&self) -> Result<FullTrainConfig, ConfigError> {
        let f = &self.full_train;
        Ok(FullTrainConfig {
            stage_epochs: f.stage_epochs.clone(),
            aux_coeffs: f.aux_coeffs.clone(),
            arm: parse_aux(&f.arm)?,
            adapt_channels: f.adapt_channels,
            decoder_lr: f.decoder_lr,
            adam: AdamConfig {
                beta1: self.search.adam_beta1,
                beta2: self.search.adam_beta2,
                eps: self.search.adam_eps,
            },
            encoder: EncoderSpec {
                lr: f.encoder_lr,
                momentum: f.encoder_momentum,
            },
            batch_size: f.batch_size,
            eval_batch: f.eval_batch,
            seed: f.seed,
        })
    }

    /// Compact JSON of the effective configuration, for log headers.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_core_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.search_config().unwrap(), SearchConfig::default());
        assert_eq!(cfg.task.to_core(), SyntheticTaskConfig::default());
        assert_eq!(cfg.full_train_config().unwrap(), FullTrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[search]\nstage3_epochs = 2\n"), Err(ConfigError::Parse { .. })));
        assert!(matches!(RunConfig::from_toml("[nonsense]\n"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[search]\nmode = \"greedy\"\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[search]\np_end = 2.0\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[task]\nimage_size = 30\n"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml("[search]\nmode = \"random\"\naux = \"classifier\"\n[controller]\nlr = 0.002\n").unwrap();
        let s = cfg.search_config().unwrap();
        assert_eq!(s.mode, SearchMode::Random);
        assert_eq!(s.ablation.aux, AuxHead::Classifier);
        assert_eq!(s.controller.lr, 0.002);
    }

    #[test]
    fn json_echo_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_value(cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
