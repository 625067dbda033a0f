//! TOML experiment configuration and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_preference_dataset, PreferenceDataset};
use crate::env::{derive_seed, EnvConfig, ToyEnv};
use crate::error::{Error, Result};
use crate::eval::DecodeMode;
use crate::judge::{train_reward_model, FeatureMask, JudgeModel, RMTrainConfig};
use crate::training::{Objective, TrainMode, TrainerConfig};

/// Which judge the run optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum JudgeConfig {
    /// The ground-truth judge itself.
    Gt,
    /// A Bradley-Terry model fit to ground-truth preferences over reference
    /// samples on the training prompts.
    Learnt {
        mask: FeatureMask,
        /// Independent preference datasets pooled for RM training.
        #[serde(default = "default_rm_datasets")]
        datasets: usize,
        #[serde(default = "default_rm_k")]
        k: usize,
        data_seed: u64,
        rm: RMTrainConfig,
    },
}

fn default_rm_datasets() -> usize {
    8
}

fn default_rm_k() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_decode")]
    pub decode: DecodeMode,
}

fn default_decode() -> DecodeMode {
    DecodeMode::Exact
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeMode::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Artifact directory; relative paths resolve against the output root.
    pub dir: PathBuf,
    /// Offline training reads this dataset instead of generating one.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub env: EnvConfig,
    pub judge: JudgeConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer
            .validate()
            .map_err(|e| Error::Config(format!("trainer: {e}")))?;
        ToyEnv::build(&self.env).map_err(|e| Error::Config(format!("env: {e}")))?;
        if let JudgeConfig::Learnt { datasets, k, .. } = &self.judge {
            if *datasets == 0 || *k < 2 {
                return Err(Error::Config(
                    "judge: learnt RM needs at least one dataset and k >= 2".into(),
                ));
            }
        }
        if let DecodeMode::Sampled { samples: 0, .. } = self.eval.decode {
            return Err(Error::Config("eval.decode: samples must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        content_hash(self)
    }

    /// Output directory under `root` unless the configured one is absolute.
    pub fn output_dir(&self, root: &Path) -> PathBuf {
        if self.output.dir.is_absolute() {
            self.output.dir.clone()
        } else {
            root.join(&self.output.dir)
        }
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// A grid of cells over a base experiment. Empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub objectives: Vec<Objective>,
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub modes: Vec<TrainMode>,
    #[serde(default)]
    pub judges: Vec<JudgeConfig>,
}

/// One cell of an ablation at one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub objective: Objective,
    pub k: usize,
    pub mode: TrainMode,
    pub judge_label: String,
    pub judge_index: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl AblationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: AblationConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base
            .validate()
            .map_err(|e| Error::Config(format!("base: {e}")))?;
        if cfg.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    pub fn judge_axis(&self) -> Vec<JudgeConfig> {
        if self.judges.is_empty() {
            vec![self.base.judge.clone()]
        } else {
            self.judges.clone()
        }
    }

    /// Cells in row-major order (objective, K, mode, judge, seed); every
    /// cell is validated before any of them runs.
    pub fn cells(&self) -> Result<Vec<AblationCell>> {
        let t = &self.base.trainer;
        let objectives = or_base(&self.objectives, t.objective);
        let ks = or_base(&self.ks, t.k);
        let modes = or_base(&self.modes, t.mode);
        let judges = self.judge_axis();
        let labels: Vec<String> = judges.iter().map(JudgeConfig::label).collect();
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("judges: duplicate judge {l}")));
            }
        }
        let mut cells = Vec::new();
        for &objective in &objectives {
            for &k in &ks {
                for &mode in &modes {
                    for (j, judge) in judges.iter().enumerate() {
                        for &seed in &self.seeds {
                            let mut config = self.base.clone();
                            config.trainer.objective = objective;
                            config.trainer.k = k;
                            config.trainer.mode = mode;
                            config.trainer.seed = seed;
                            config.judge = judge.clone();
                            let cell = AblationCell {
                                objective,
                                k,
                                mode,
                                judge_label: labels[j].clone(),
                                judge_index: j,
                                seed,
                                config,
                            };
                            cell.config.validate().map_err(|e| {
                                Error::Config(format!("cell {}: {e}", cell.name()))
                            })?;
                            cells.push(cell);
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

fn or_base<T: Copy>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Lower-case name a unit enum serializes to.
pub fn serde_name<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

impl JudgeConfig {
    /// `gt`, or `learnt-<mask>`.
    pub fn label(&self) -> String {
        match self {
            JudgeConfig::Gt => "gt".into(),
            JudgeConfig::Learnt { mask, .. } => match mask {
                FeatureMask::Indices(_) => "learnt-indices".into(),
                m => format!("learnt-{}", serde_name(m)),
            },
        }
    }
}

impl AblationCell {
    /// Group key without the seed.
    pub fn group(&self) -> String {
        format!(
            "{}-k{}-{}-{}",
            serde_name(&self.objective),
            self.k,
            serde_name(&self.mode),
            self.judge_label
        )
    }

    pub fn name(&self) -> String {
        format!("{}-s{}", self.group(), self.seed)
    }
}

/// Builds the learnt RM described by the judge block, or `None` for `gt`.
pub fn build_learnt_judge(env: &ToyEnv, judge: &JudgeConfig) -> Result<Option<JudgeModel>> {
    let JudgeConfig::Learnt {
        mask,
        datasets,
        k,
        data_seed,
        rm,
    } = judge
    else {
        return Ok(None);
    };
    let mut examples = Vec::new();
    for i in 0..*datasets {
        let ds: PreferenceDataset = generate_preference_dataset(
            &env.reference,
            &env.gt,
            &env.split.train,
            *k,
            derive_seed(*data_seed, i as u64),
            "reference",
        )?;
        examples.extend(ds.examples);
    }
    Ok(Some(train_reward_model(&env.feature_map, &examples, rm, mask)?))
}
