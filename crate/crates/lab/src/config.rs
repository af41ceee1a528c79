//! Experiment configuration.
//!
//! Files use one `section.key = value` assignment per line, with values in
//! TOML syntax and `#` comments. Nested settings simply use longer dotted
//! keys (`engine.optim.lr = 1e-4`). Any key left out keeps its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rft_core::diffusion::{MlpConfig, PretrainConfig, ScheduleConfig};
use rft_core::finetune::EngineConfig;
use rft_core::motion::{MotionConfig, Representation};
use rft_core::reward::{RewardConfig, TrainConfig};
use rft_core::spl::SplConfig;

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub samples: usize,
    pub labels: usize,
    pub motion: MotionConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            samples: 120,
            labels: 6,
            motion: MotionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleConfig,
    pub net: MlpConfig,
    /// Clean-estimate preconditioning of the noise predictor.
    pub precondition: bool,
    pub sigma_data: f64,
    pub pretrain: PretrainConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            schedule: ScheduleConfig::default(),
            net: MlpConfig::default(),
            precondition: true,
            sigma_data: 0.5,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub model: RewardConfig,
    /// Train the backbone on forward-noised motions as well.
    pub noise_aware: bool,
    pub semantic: TrainConfig,
    pub preference: TrainConfig,
    pub authenticity: TrainConfig,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            model: RewardConfig::default(),
            noise_aware: true,
            semantic: TrainConfig::default(),
            preference: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            authenticity: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplSection {
    pub enabled: bool,
    pub refine: SplConfig,
}

impl Default for SplSection {
    fn default() -> Self {
        SplSection {
            enabled: true,
            refine: SplConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Candidate motions per retrieval query.
    pub candidates: usize,
    pub ks: Vec<usize>,
    pub repr: Representation,
    /// Generated motions per evaluation label.
    pub per_label: usize,
    /// Labels whose rewards are reported as held out from fine-tuning.
    pub held_out_labels: Vec<usize>,
    /// Evaluation repetitions; confidence intervals need at least two.
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            candidates: 32,
            ks: vec![1, 2, 3],
            repr: Representation::Joint,
            per_label: 16,
            held_out_labels: vec![3, 4, 5],
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub corpus: u64,
    pub reward: u64,
    pub diffusion: u64,
    pub finetune: u64,
    pub eval: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            corpus: 1,
            reward: 2,
            diffusion: 3,
            finetune: 4,
            eval: 5,
        }
    }
}

impl SeedConfig {
    /// Offsets every seed by `base`, for seed-replicated runs.
    pub fn shifted(&self, base: u64) -> Self {
        SeedConfig {
            corpus: self.corpus.wrapping_add(base),
            reward: self.reward.wrapping_add(base),
            diffusion: self.diffusion.wrapping_add(base),
            finetune: self.finetune.wrapping_add(base),
            eval: self.eval.wrapping_add(base),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub diffusion: DiffusionConfig,
    pub reward: RewardSection,
    pub spl: SplSection,
    pub engine: EngineConfig,
    pub eval: EvalConfig,
    pub seeds: SeedConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let diffusion = DiffusionConfig::default();
        let mut engine = EngineConfig::default();
        engine.curriculum.steps = diffusion.schedule.steps;
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            diffusion,
            reward: RewardSection::default(),
            spl: SplSection::default(),
            engine,
            eval: EvalConfig::default(),
            seeds: SeedConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        let bad = |msg: String| Err(LabError::Config(msg));
        if c.labels == 0 || c.samples < c.labels {
            return bad(format!("corpus needs at least one sample per label ({} samples, {} labels)", c.samples, c.labels));
        }
        if self.reward.model.labels != c.labels || self.diffusion.net.labels != c.labels {
            return bad("reward.model.labels and diffusion.net.labels must equal corpus.labels".into());
        }
        if self.diffusion.net.data_dim != c.motion.flat_dim() {
            return bad(format!(
                "diffusion.net.data_dim is {}, the joint view needs {}",
                self.diffusion.net.data_dim,
                c.motion.flat_dim()
            ));
        }
        if self.engine.curriculum.steps != self.diffusion.schedule.steps {
            return bad("engine.curriculum.steps must equal diffusion.schedule.steps".into());
        }
        let labels = self.engine.labels.iter().chain(&self.eval.held_out_labels);
        if let Some(l) = labels.clone().find(|&&l| l >= c.labels) {
            return bad(format!("label {l} out of range for {} labels", c.labels));
        }
        if self.eval.ks.iter().any(|&k| k == 0 || k > self.eval.candidates) {
            return bad("eval.ks must lie in [1, eval.candidates]".into());
        }
        self.engine.aggregator.validate()?;
        self.engine.curriculum.validate()?;
        c.motion.validate()?;
        Ok(())
    }

    pub fn from_flat_str(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Every setting as a `section.key = value` line, sorted by key.
    pub fn to_flat_string(&self) -> Result<String> {
        let table = toml::Table::try_from(self).map_err(|e| LabError::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &toml::Value::Table(table), &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_flat_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_flat_string()?).map_err(|e| LabError::io(path, e))
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
