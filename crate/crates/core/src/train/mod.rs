//! Fine-tuning loop: schedule, freeze, forward, backward, step, measure.

mod optim;
mod runlog;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind, StepCounter};
pub use runlog::{CachedBytes, EvalPoint, IterationLog, RunLog};

use crate::autograd::{ActivationKind, Graph, LayerId};
use crate::compression::CodecConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::memory::account_iteration;
use crate::model::{Batch, Model};
use crate::scheduler::{layer_distance, validate_rate, Scheduler, SchedulerKind};

/// Offset mixed into the run seed for the scheduler's own streams.
const SCHEDULER_SEED_SALT: u64 = 0x005e_ed0f_1a7e;

/// Settings of one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheduler: SchedulerKind,
    pub freeze_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds data order and, salted, the scheduler.
    pub seed: u64,
    pub codecs: CodecConfig,
    pub optimizer: OptimizerConfig,
    /// Stop after this many iterations even if epochs remain.
    pub max_steps: Option<usize>,
    /// Evaluate on the validation set after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerKind::Ils,
            freeze_rate: 0.5,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            codecs: CodecConfig::off(),
            optimizer: OptimizerConfig::default(),
            max_steps: None,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_rate(self.freeze_rate)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        self.optimizer.validate()
    }

    pub fn scheduler_seed(&self) -> u64 {
        self.seed ^ SCHEDULER_SEED_SALT
    }
}

/// Accuracy and mean loss over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax_row(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn correct(logits: &[f32], labels: &[u32]) -> usize {
    let c = logits.len() / labels.len();
    logits
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax_row(row) == l)
        .count()
}

/// Metrics on `data` without recording a tape. Every row is used.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation on an empty dataset".into()));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut hits) = (0.0, 0);
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let mut g = Graph::inference();
        let (logits, l) = model.forward_loss(&mut g, &batch, &CodecConfig::off())?;
        loss += g.value(l).item()? as f64 * chunk.len() as f64;
        hits += correct(g.value(logits).data(), &batch.labels);
    }
    Ok(Metrics {
        loss: loss / data.len() as f64,
        accuracy: hits as f64 / data.len() as f64,
    })
}

/// Batches of one epoch in a seeded shuffled order; the last partial batch is
/// dropped.
fn epoch_batches(data: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size)
        .map(|rows| data.batch(rows))
        .collect()
}

/// Runs the per-iteration protocol over `train`:
/// select frozen layers, apply them, record forward, backward, optimizer step
/// on active layers, then refresh active layers' distances.
pub fn fine_tune(
    model: &mut Model<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<RunLog> {
    config.validate()?;
    let per_epoch = train.len() / config.batch_size;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training rows do not fill one batch of {}",
            train.len(),
            config.batch_size
        )));
    }
    let planned = per_epoch * config.epochs;
    let total = config.max_steps.map_or(planned, |m| m.min(planned));
    let n = model.num_layers();
    let mut scheduler = Scheduler::new(
        config.scheduler,
        config.freeze_rate,
        model.schedulable_layers(),
        n,
        config.scheduler_seed(),
    )?;
    let mut optimizer = Optimizer::new(config.optimizer.clone())?;
    let lr = LrSchedule::new(config.optimizer.lr, config.optimizer.warmup_frac, total);
    let mut log = RunLog::new(model.registry());
    let weights: Vec<_> = (0..n)
        .map(|id| model.layer_params(id).map(|lp| lp.weight))
        .collect::<Result<_>>()?;

    let mut it = 0;
    'epochs: for epoch in 0..config.epochs {
        for batch in epoch_batches(train, config.batch_size, config.seed, epoch)? {
            if it == total {
                break 'epochs;
            }
            let decision = scheduler.decide(it)?;
            model.freeze_set(&decision.frozen_ids)?;

            let mut g = Graph::new();
            let (logits, loss) = model.forward_loss(&mut g, &batch, &config.codecs)?;
            let loss_value = g.value(loss).item()? as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    loss: loss_value,
                    frozen: decision.frozen_ids.clone(),
                });
            }
            let hits = correct(g.value(logits).data(), &batch.labels);
            let cached = CachedBytes::from_records(&g.cache_records());

            model.params.zero_grad();
            g.backward(loss, &mut model.params)?;
            drop(g);

            let before: Vec<(LayerId, Vec<f32>)> = decision
                .active_ids
                .iter()
                .map(|&id| (id, model.params.get(weights[id]).tensor.data().to_vec()))
                .collect();
            let rate = lr.at(it);
            optimizer.step(&mut model.params, rate);
            for (id, snapshot) in &before {
                let after = model.params.get(weights[*id]).tensor.data();
                scheduler.record_distance(*id, layer_distance(snapshot, after));
            }

            let analytic = account_iteration(
                model.config(),
                batch.batch_size,
                batch.seq_len,
                &decision,
                &config.codecs,
            );
            log.push(IterationLog {
                iteration: it,
                epoch,
                loss: loss_value,
                accuracy: hits as f64 / batch.batch_size as f64,
                lr: rate,
                frozen: decision.frozen_ids,
                distances: (0..n).map(|id| scheduler.distance_of(id)).collect(),
                cached,
                analytic_bytes: analytic.total_bytes,
            });
            it += 1;
        }
        if config.eval_each_epoch {
            if let Some(val) = val {
                let m = evaluate(model, val, config.batch_size)?;
                log.evals.push(EvalPoint {
                    epoch,
                    iteration: it,
                    loss: m.loss,
                    accuracy: m.accuracy,
                });
            }
        }
    }
    model.freeze_set(&[])?;
    Ok(log)
}

/// Trains every layer on a source task for `steps` iterations so that later
/// fine-tuning starts from small-update dynamics. Zero steps leave the model
/// unchanged.
pub fn pretrain_synthetic(
    model: &mut Model<f32>,
    data: &Dataset,
    steps: usize,
    config: &TrainConfig,
) -> Result<Option<RunLog>> {
    if steps == 0 {
        return Ok(None);
    }
    let per_epoch = (data.len() / config.batch_size).max(1);
    let run = TrainConfig {
        scheduler: SchedulerKind::None,
        freeze_rate: 0.0,
        epochs: steps.div_ceil(per_epoch),
        max_steps: Some(steps),
        codecs: CodecConfig::off(),
        eval_each_epoch: false,
        ..config.clone()
    };
    fine_tune(model, data, None, &run).map(Some)
}

impl CachedBytes {
    fn from_records(records: &[crate::autograd::CacheRecord]) -> Self {
        let sum = |k: ActivationKind| {
            records
                .iter()
                .filter(|r| r.kind == k)
                .map(|r| r.bytes)
                .sum()
        };
        Self {
            dynamic: sum(ActivationKind::Dynamic),
            static_: sum(ActivationKind::Static),
            semi_static: sum(ActivationKind::SemiStatic),
        }
    }
}
