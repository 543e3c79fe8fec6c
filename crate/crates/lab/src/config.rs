//! TOML configuration. Every key is optional; missing keys take the desk
//! defaults. Unknown keys are rejected so typos surface as errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sent_core::baselines::{BaselineConfig, BaselineMode};
use sent_core::curriculum::{DuplicateMode, ProfileConfig};
use sent_core::dynamics::{DynamicsCheckConfig, InstanceSpec};
use sent_core::grpo::{GrpoSpec, Normalization};
use sent_core::harness::{TrainConfig, WarmStartSpec};
use sent_core::sent::{CovThreshold, EntropyThreshold, KlCoefficients, ThresholdSpec};
use sent_core::task_env::{GeneratorSpec, Vocabulary};

use crate::experiment::ExperimentConfig;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "SENT_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    /// When set, `--seed` has to be given on the command line.
    pub deterministic: bool,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub warm_start: WarmStartSection,
    pub profile: ProfileSection,
    pub curriculum: CurriculumSection,
    pub train: TrainSection,
    pub objective: ObjectiveSection,
    pub eval: EvalSection,
    pub dynamics: DynamicsSection,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: None,
            deterministic: true,
            out_dir: PathBuf::from("out"),
            data: DataSection::default(),
            warm_start: WarmStartSection::default(),
            profile: ProfileSection::default(),
            curriculum: CurriculumSection::default(),
            train: TrainSection::default(),
            objective: ObjectiveSection::default(),
            eval: EvalSection::default(),
            dynamics: DynamicsSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub min_steps: u32,
    pub max_steps: u32,
    pub max_operand: u64,
    pub min_modulus: u64,
    pub max_modulus: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GeneratorSpec::default();
        Self {
            count: g.count,
            min_steps: g.min_steps,
            max_steps: g.max_steps,
            max_operand: g.max_operand,
            min_modulus: g.min_modulus,
            max_modulus: g.max_modulus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartSection {
    pub correct_base: f64,
    pub correct_drop: f64,
    pub correct_floor: f64,
    pub distractors: usize,
    pub exploration: f64,
}

impl Default for WarmStartSection {
    fn default() -> Self {
        let w = WarmStartSpec::default();
        Self {
            correct_base: w.correct_base,
            correct_drop: w.correct_drop,
            correct_floor: w.correct_floor,
            distractors: w.distractors,
            exploration: w.exploration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicateKey {
    Deduplicate,
    CountDuplicates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub samples: usize,
    pub duplicates: DuplicateKey,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self { samples: 8, duplicates: DuplicateKey::Deduplicate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub stages: usize,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self { stages: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: String,
    pub eta: f64,
    pub group_size: usize,
    pub queries_per_step: usize,
    pub max_response_len: usize,
    pub temperature: f64,
    pub total_steps: usize,
    pub passes: usize,
    pub context_window: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: BaselineMode::Sent.name().to_string(),
            eta: t.eta,
            group_size: t.group_size,
            queries_per_step: t.queries_per_step,
            max_response_len: t.max_response_len,
            temperature: t.temperature,
            total_steps: t.total_steps,
            passes: t.passes,
            context_window: t.context_window,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKey {
    SequenceMean,
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyModeKey {
    Absolute,
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovModeKey {
    Absolute,
    TopFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    /// Clip range; a negative value disables clipping.
    pub epsilon: f64,
    pub beta: f64,
    pub normalization: NormalizationKey,
    pub beta_low: f64,
    pub beta_high: f64,
    pub entropy_mode: EntropyModeKey,
    pub entropy_value: f64,
    pub cov_mode: CovModeKey,
    pub cov_value: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub rho: f64,
    pub r_clip: f64,
    pub omega_low: f64,
    pub omega_high: f64,
    pub k_cov: f64,
    pub cov_beta: f64,
    pub tau_he: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let b = BaselineConfig::default();
        Self {
            epsilon: 0.2,
            beta: b.grpo.beta,
            normalization: NormalizationKey::SequenceMean,
            beta_low: b.kl.beta_low,
            beta_high: b.kl.beta_high,
            entropy_mode: EntropyModeKey::Percentile,
            entropy_value: 0.8,
            cov_mode: CovModeKey::TopFraction,
            cov_value: 0.0002,
            lambda: b.lambda,
            alpha: b.alpha,
            kappa: b.kappa,
            rho: b.rho,
            r_clip: b.r_clip,
            omega_low: b.omega_low,
            omega_high: b.omega_high,
            k_cov: b.k_cov,
            cov_beta: b.cov_beta,
            tau_he: b.tau_he,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub hardest_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![8], hardest_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub instances: usize,
    pub eta0: f64,
    pub halvings: usize,
    pub update_trials: usize,
    pub min_vocab: usize,
    pub max_vocab: usize,
    pub max_states: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        let d = DynamicsCheckConfig::default();
        Self {
            instances: d.instances,
            eta0: d.eta0,
            halvings: d.halvings,
            update_trials: d.update_trials,
            min_vocab: d.instance.min_vocab,
            max_vocab: d.instance.max_vocab,
            max_states: d.instance.max_states,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub grpo_beta: f64,
    pub k: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3, 4, 5], grpo_beta: 0.001, k: 8 }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::parse(&text).map_err(|source| ConfigError::Parse { path: path.to_owned(), source })
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn mode(&self) -> Result<BaselineMode, ConfigError> {
        BaselineMode::from_name(&self.train.mode)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown objective mode `{}`", self.train.mode)))
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::arithmetic()
    }

    pub fn generator(&self) -> GeneratorSpec {
        let d = &self.data;
        GeneratorSpec {
            count: d.count,
            min_steps: d.min_steps,
            max_steps: d.max_steps,
            max_operand: d.max_operand,
            min_modulus: d.min_modulus,
            max_modulus: d.max_modulus,
            vocab: self.vocab(),
        }
    }

    pub fn warm_start_spec(&self) -> WarmStartSpec {
        let w = &self.warm_start;
        WarmStartSpec {
            correct_base: w.correct_base,
            correct_drop: w.correct_drop,
            correct_floor: w.correct_floor,
            distractors: w.distractors,
            exploration: w.exploration,
        }
    }

    pub fn profile_config(&self) -> ProfileConfig {
        ProfileConfig {
            samples: self.profile.samples,
            max_len: self.train.max_response_len,
            duplicates: match self.profile.duplicates {
                DuplicateKey::Deduplicate => DuplicateMode::Deduplicate,
                DuplicateKey::CountDuplicates => DuplicateMode::CountDuplicates,
            },
        }
    }

    pub fn objective_config(&self) -> Result<BaselineConfig, ConfigError> {
        let o = &self.objective;
        Ok(BaselineConfig {
            mode: self.mode()?,
            grpo: GrpoSpec {
                epsilon: (o.epsilon >= 0.0).then_some(o.epsilon),
                beta: o.beta,
                normalization: match o.normalization {
                    NormalizationKey::SequenceMean => Normalization::SequenceMean,
                    NormalizationKey::TokenMean => Normalization::TokenMean,
                },
            },
            lambda: o.lambda,
            alpha: o.alpha,
            kappa: o.kappa,
            rho: o.rho,
            r_clip: o.r_clip,
            omega_low: o.omega_low,
            omega_high: o.omega_high,
            k_cov: o.k_cov,
            cov_beta: o.cov_beta,
            tau_he: o.tau_he,
            thresholds: ThresholdSpec {
                entropy: match o.entropy_mode {
                    EntropyModeKey::Absolute => EntropyThreshold::Absolute(o.entropy_value),
                    EntropyModeKey::Percentile => EntropyThreshold::Percentile(o.entropy_value),
                },
                cov: match o.cov_mode {
                    CovModeKey::Absolute => CovThreshold::Absolute(o.cov_value),
                    CovModeKey::TopFraction => CovThreshold::TopFraction(o.cov_value),
                },
            },
            kl: KlCoefficients::new(o.beta_low, o.beta_high).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        })
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let t = &self.train;
        let cfg = TrainConfig {
            eta: t.eta,
            group_size: t.group_size,
            queries_per_step: t.queries_per_step,
            max_response_len: t.max_response_len,
            temperature: t.temperature,
            total_steps: t.total_steps,
            passes: t.passes,
            context_window: t.context_window,
            checkpoint_every: t.checkpoint_every,
            seed,
            objective: self.objective_config()?,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn dynamics_config(&self, seed: u64) -> DynamicsCheckConfig {
        let d = &self.dynamics;
        let base = DynamicsCheckConfig::default();
        DynamicsCheckConfig {
            seed,
            instances: d.instances,
            eta0: d.eta0,
            halvings: d.halvings,
            update_trials: d.update_trials,
            instance: InstanceSpec {
                min_vocab: d.min_vocab,
                max_vocab: d.max_vocab,
                max_states: d.max_states,
                beta_low: self.objective.beta_low,
                beta_high: self.objective.beta_high,
                ..base.instance
            },
            ..base
        }
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig, ConfigError> {
        Ok(ExperimentConfig {
            data: self.generator(),
            warm_start: self.warm_start_spec(),
            profile: self.profile_config(),
            stages: self.curriculum.stages,
            train: self.train_config(0)?,
            grpo_beta: self.experiment.grpo_beta,
            hardest_fraction: self.eval.hardest_fraction,
            eval_k: self.experiment.k,
        })
    }

    /// Output directory: the explicit flag, then [`OUT_DIR_ENV`], then the
    /// config value.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_owned();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}
