//! Pipeline configuration: a nested key-value (TOML) file mirroring
//! `PipelineConfig`. Every subsection has defaults, so a config file only
//! needs the keys it overrides.
//!
//! The top-level `seed` derives every stage seed by the fixed offsets in
//! [`crate::seeding::offsets`]; `seed` values inside subsections are
//! overwritten by the pipeline so a run is a pure function of the master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irl::IrlConfig;
use crate::oracle::{OracleConfig, ToxicityOracle};
use crate::ppo::PpoConfig;
use crate::world::{FeatureSpec, WorldConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_per_class: usize,
    pub toxic_rate_hi: f64,
    pub toxic_rate_lo: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_per_class: 200, toxic_rate_hi: 0.8, toxic_rate_lo: 0.35 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub context_window: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { context_window: 2, epochs: 40, lr: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub classify_threshold: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { classify_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Fraction of pairs reserved as the extraction held-out split.
    pub heldout_fraction: f64,
    /// Size per class of the freshly generated evaluation corpus.
    pub eval_corpus_per_class: usize,
    /// Fraction of the evaluation corpus used to calibrate the threshold.
    pub calibration_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { heldout_fraction: 0.2, eval_corpus_per_class: 100, calibration_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n_seeds: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { n_seeds: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageMetricsConfig {
    /// Sampled completions per prompt for mean toxicity / toxicity probability.
    pub samples_per_prompt: usize,
    /// Cap on the number of corpus prompts scored per stage.
    pub max_prompts: usize,
}

impl Default for StageMetricsConfig {
    fn default() -> Self {
        Self { samples_per_prompt: 25, max_prompts: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub features: FeatureSpec,
    pub oracle: OracleSettings,
    pub corpus: CorpusConfig,
    pub sft: SftConfig,
    pub rlhf: PpoConfig,
    pub irl: IrlConfig,
    pub eval: EvalConfig,
    pub study: StudyConfig,
    pub metrics: StageMetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            features: FeatureSpec::default(),
            oracle: OracleSettings::default(),
            corpus: CorpusConfig::default(),
            sft: SftConfig::default(),
            rlhf: PpoConfig::default(),
            irl: IrlConfig::default(),
            eval: EvalConfig::default(),
            study: StudyConfig::default(),
            metrics: StageMetricsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.rlhf.validate()?;
        if self.corpus.n_per_class == 0 {
            return Err(Error::Config("corpus.n_per_class must be positive".into()));
        }
        if !(0.0 <= self.corpus.toxic_rate_lo
            && self.corpus.toxic_rate_lo < self.corpus.toxic_rate_hi
            && self.corpus.toxic_rate_hi <= 1.0)
        {
            return Err(Error::Config("corpus rates must satisfy 0 <= lo < hi <= 1".into()));
        }
        if !(0.0 < self.oracle.classify_threshold && self.oracle.classify_threshold < 1.0) {
            return Err(Error::Config("oracle.classify_threshold must lie in (0,1)".into()));
        }
        if self.irl.epsilon <= 0.0 {
            return Err(Error::Config("irl.epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.heldout_fraction) || self.eval.heldout_fraction == 0.0 {
            return Err(Error::Config("eval.heldout_fraction must lie in (0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.eval.calibration_fraction)
            || self.eval.calibration_fraction == 0.0
        {
            return Err(Error::Config("eval.calibration_fraction must lie in (0,1)".into()));
        }
        if self.eval.eval_corpus_per_class == 0 {
            return Err(Error::Config("eval.eval_corpus_per_class must be positive".into()));
        }
        if self.metrics.samples_per_prompt == 0 || self.metrics.max_prompts == 0 {
            return Err(Error::Config("metrics settings must be positive".into()));
        }
        if self.sft.context_window == 0 {
            return Err(Error::Config("sft.context_window must be positive".into()));
        }
        Ok(())
    }

    /// The groundtruth scorer, with the lexicon inherited from the world.
    pub fn oracle(&self) -> ToxicityOracle {
        ToxicityOracle::new(OracleConfig {
            toxic_lexicon: self.world.toxic_lexicon.clone(),
            classify_threshold: self.oracle.classify_threshold,
        })
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: PipelineConfig =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &PipelineConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}
