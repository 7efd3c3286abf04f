use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use dfs_core::analytics::{config_hash, validate_targets};
use dfs_core::backbone::BackboneConfig;
use dfs_core::data::{load_cifar_binary, standardize_pair, CifarKind, Dataset, Split, SyntheticSpec};
use dfs_core::gate::GateConfig;
use dfs_core::trainer::{PretrainConfig, RunConfig, TrainStep};
use dfs_core::{BitOption, DfsError, DfsModel};

/// A configuration problem, reported with the offending field.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Step1,
    Step2,
    Eval,
    Sweep,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Step1 => "step1",
            Stage::Step2 => "step2",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory holding the CIFAR binary batches.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingConfig {
    #[default]
    Learned,
    Static(Vec<BitOption>),
}

fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            routing: RoutingConfig::Learned,
            batch_size: default_eval_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub stage: Option<Stage>,
    /// Model initialization seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub run: Option<RunConfig>,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub targets: Option<Vec<f64>>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub svg: bool,
}

fn core_err(section: &str, e: DfsError) -> ConfigError {
    match e {
        DfsError::Config(m) | DfsError::Usage(m) | DfsError::Input(m) => ConfigError(format!("{section}: {m}")),
        other => ConfigError(format!("{section}: {other}")),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            ConfigError(format!("invalid config field `{field}`: {}", e.inner()))
        })
    }

    /// Replaces the model and training seeds; the dataset seed is kept.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(p) = &mut self.pretrain {
            p.seed = seed;
        }
        if let Some(r) = &mut self.run {
            r.seed = seed;
        }
    }

    pub fn hash(&self) -> dfs_core::Result<String> {
        config_hash(self)
    }

    pub fn group_size(&self) -> Option<usize> {
        Some(self.backbone.n_per_group)
    }

    fn require_data(&self) -> Result<&DataConfig, ConfigError> {
        let Some(d) = &self.data else {
            return bad("data: missing (required for this stage)");
        };
        match d.kind {
            DataKind::Synthetic => {
                d.synthetic.validate().map_err(|e| core_err("data.synthetic", e))?;
                if d.synthetic.image_size != self.backbone.image_size {
                    return bad("data.synthetic.image_size must equal backbone.image_size");
                }
                if d.synthetic.num_classes != self.backbone.num_classes {
                    return bad("data.synthetic.num_classes must equal backbone.num_classes");
                }
                if self.backbone.in_channels != 3 {
                    return bad("backbone.in_channels must be 3 for synthetic data");
                }
            }
            DataKind::Cifar10 | DataKind::Cifar100 => {
                let Some(p) = &d.path else {
                    return bad("data.path: missing (directory of CIFAR binary files)");
                };
                if !p.is_dir() {
                    return bad(format!("data.path: {} is not a directory", p.display()));
                }
                let classes = if d.kind == DataKind::Cifar10 { 10 } else { 100 };
                if self.backbone.num_classes != classes || self.backbone.image_size != 32 || self.backbone.in_channels != 3 {
                    return bad(format!(
                        "backbone: CIFAR needs num_classes {classes}, image_size 32 and in_channels 3"
                    ));
                }
            }
        }
        Ok(d)
    }

    fn require_checkpoint(&self) -> Result<&Path, ConfigError> {
        match &self.init_checkpoint {
            None => bad("init_checkpoint: missing (required for this stage)"),
            Some(p) if !p.is_file() => bad(format!("init_checkpoint: {} does not exist", p.display())),
            Some(p) => Ok(p),
        }
    }

    fn require_run(&self, step: TrainStep) -> Result<&RunConfig, ConfigError> {
        let Some(r) = &self.run else {
            return bad("run: missing (required for this stage)");
        };
        if r.step != step {
            return bad(format!("run.step must be {:?} for this stage", step).to_lowercase());
        }
        r.validate().map_err(|e| core_err("run", e))?;
        Ok(r)
    }

    /// Checks everything the selected stage needs and returns the stage.
    pub fn validate(&self) -> Result<Stage, ConfigError> {
        let Some(stage) = self.stage else {
            return bad("stage: missing (one of pretrain, step1, step2, eval, sweep, report)");
        };
        self.backbone.validate().map_err(|e| core_err("backbone", e))?;
        self.gate.validate().map_err(|e| core_err("gate", e))?;
        match stage {
            Stage::Pretrain => {
                self.require_data()?;
                let Some(p) = &self.pretrain else {
                    return bad("pretrain: missing (required for this stage)");
                };
                p.validate().map_err(|e| core_err("pretrain", e))?;
            }
            Stage::Step1 | Stage::Step2 => {
                self.require_data()?;
                self.require_checkpoint()?;
                self.require_run(if stage == Stage::Step1 { TrainStep::One } else { TrainStep::Two })?;
            }
            Stage::Eval => {
                self.require_data()?;
                self.require_checkpoint()?;
                if let Some(e) = &self.eval {
                    if e.batch_size == 0 {
                        return bad("eval.batch_size must be positive");
                    }
                }
            }
            Stage::Sweep => {
                self.require_data()?;
                self.require_checkpoint()?;
                self.require_run(TrainStep::Two)?;
                let model = self.model().map_err(|e| ConfigError(format!("{e:#}")))?;
                validate_targets(self.targets.as_deref().unwrap_or_default(), model.cp_floor())
                    .map_err(|e| core_err("targets", e))?;
            }
            Stage::Report => match &self.trace {
                None => return bad("trace: missing (path of a decision trace CSV)"),
                Some(p) if !p.is_file() => return bad(format!("trace: {} does not exist", p.display())),
                Some(_) => {}
            },
        }
        Ok(stage)
    }

    pub fn model(&self) -> dfs_core::Result<DfsModel> {
        DfsModel::new(self.backbone.clone(), self.gate.clone(), self.seed)
    }

    /// Train and test splits, standardized with the training statistics.
    pub fn datasets(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let d = self.require_data()?;
        let (mut train, mut test) = match d.kind {
            DataKind::Synthetic => (d.synthetic.generate(Split::Train)?, d.synthetic.generate(Split::Test)?),
            DataKind::Cifar10 | DataKind::Cifar100 => {
                let kind = if d.kind == DataKind::Cifar10 {
                    CifarKind::Cifar10
                } else {
                    CifarKind::Cifar100
                };
                let dir = d.path.as_ref().expect("validated");
                (
                    load_cifar_binary(dir, kind, Split::Train)?,
                    load_cifar_binary(dir, kind, Split::Test)?,
                )
            }
        };
        standardize_pair(&mut train, &mut test);
        Ok((train, test))
    }
}
