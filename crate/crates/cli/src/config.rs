//! Run files: TOML with `[model]`, `[task]`, `[pretrain]`, `[train]`,
//! `[sweep]`, `[memory]` and `[output]` sections. Every section and key is
//! optional; flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use freezetune::data::{SyntheticTask, TaskKind};
use freezetune::train::{OptimizerConfig, OptimizerKind, StepCounter, TrainConfig};
use freezetune::{CodecConfig, ModelConfig, SchedulerKind};
use serde::{Deserialize, Serialize};

/// Source-task pretraining before fine-tuning. Zero steps skips it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    /// Source task; vocab and sequence length follow the fine-tuning task.
    pub kind: TaskKind,
    pub num_classes: Option<usize>,
    pub train_size: usize,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 0,
            lr: 1e-3,
            kind: TaskKind::CopyClass,
            num_classes: None,
            train_size: 4096,
            seed: 1,
        }
    }
}

/// Fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub scheduler: SchedulerKind,
    pub freeze_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds data order and the scheduler.
    pub seed: u64,
    /// Seeds parameter initialization.
    pub init_seed: u64,
    /// 8-bit dense/attention and 4-bit GELU caching.
    pub quant: bool,
    /// Top-10% caching of frozen LayerNorm inputs.
    pub prune: bool,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub step_counter: StepCounter,
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = OptimizerConfig::default();
        Self {
            scheduler: t.scheduler,
            freeze_rate: t.freeze_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            init_seed: 7,
            quant: false,
            prune: false,
            optimizer: o.kind,
            lr: o.lr,
            warmup_frac: o.warmup_frac,
            weight_decay: o.weight_decay,
            step_counter: o.step_counter,
            max_steps: None,
        }
    }
}

impl TrainSection {
    pub fn codecs(&self) -> CodecConfig {
        CodecConfig::from_toggles(self.quant, self.prune)
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            scheduler: self.scheduler,
            freeze_rate: self.freeze_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            codecs: self.codecs(),
            optimizer: OptimizerConfig {
                kind: self.optimizer,
                lr: self.lr,
                warmup_frac: self.warmup_frac,
                weight_decay: self.weight_decay,
                step_counter: self.step_counter,
                ..OptimizerConfig::default()
            },
            max_steps: self.max_steps,
            eval_each_epoch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub freeze_rates: Vec<f64>,
    pub schedulers: Vec<SchedulerKind>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            freeze_rates: vec![0.0, 0.5, 0.9],
            schedulers: vec![
                SchedulerKind::Ils,
                SchedulerKind::Random,
                SchedulerKind::Progressive,
            ],
        }
    }
}

/// Analytic memory report settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub batch_sizes: Vec<usize>,
    /// Defaults to the model's `max_seq_len`.
    pub seq_len: Option<usize>,
    pub freeze_rate: f64,
    pub quant: bool,
    pub prune: bool,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            batch_sizes: vec![32, 64, 128],
            seq_len: None,
            freeze_rate: 0.95,
            quant: true,
            prune: true,
        }
    }
}

impl MemorySection {
    pub fn codecs(&self) -> CodecConfig {
        CodecConfig::from_toggles(self.quant, self.prune)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
        }
    }
}

/// A whole run file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub memory: MemorySection,
    pub output: OutputSection,
}

impl RunFile {
    /// Reads `path`; parse errors carry the line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Source task for pretraining, sharing the fine-tuning task's shape.
    pub fn pretrain_task(&self) -> SyntheticTask {
        SyntheticTask {
            kind: self.pretrain.kind,
            num_classes: self.pretrain.num_classes.unwrap_or(self.model.num_classes),
            train_size: self.pretrain.train_size,
            val_size: 0,
            seed: self.pretrain.seed,
            ..self.task.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("[model]")?;
        self.task.validate().context("[task]")?;
        self.train.to_train_config().validate().context("[train]")?;
        anyhow::ensure!(
            self.task.vocab <= self.model.vocab,
            "[task] vocab {} exceeds [model] vocab {}",
            self.task.vocab,
            self.model.vocab
        );
        anyhow::ensure!(
            self.task.seq_len <= self.model.max_seq_len,
            "[task] seq_len {} exceeds [model] max_seq_len {}",
            self.task.seq_len,
            self.model.max_seq_len
        );
        anyhow::ensure!(
            self.task.num_classes == self.model.num_classes,
            "[task] num_classes {} differs from [model] num_classes {}",
            self.task.num_classes,
            self.model.num_classes
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunFile::parse("").unwrap(), RunFile::default());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let mut run = RunFile::default();
        run.train.scheduler = SchedulerKind::Random;
        run.pretrain.steps = 10;
        let back = RunFile::parse(&run.to_toml().unwrap()).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunFile::parse("[train]\nepochs = 2\nfreeze_rte = 0.5\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 3"), "{msg}");
    }
}
