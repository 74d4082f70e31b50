//! Analytic activation-memory accounting.
//!
//! Every buffer the engine caches during one training iteration is listed as
//! an [`ActivationRecord`] with a symbolic element count. Bytes for an
//! iteration follow from the freeze decision and the codec assignment:
//! dynamic records count only while their layer is active, static records
//! always count, and semi-static records shrink to the frozen codec while
//! their layer is frozen.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::autograd::{ActivationKind, CacheRecord, Graph, LayerId};
use crate::compression::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::model::{Batch, LayerRegistry, LayerRole, Model, ModelConfig, NormPlacement, FFN_MULT};
use crate::scheduler::{frozen_count, validate_rate, FreezeDecision};

/// Bytes per decimal gigabyte, used in every report.
pub const GB: f64 = 1e9;

/// Bytes of a 32-bit index.
const INDEX_BYTES: u64 = 4;

/// A symbolic element count `factor * B * T^t * H^h * heads^g * C^c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CountExpr {
    pub factor: usize,
    pub t: u8,
    pub h: bool,
    pub heads: bool,
    pub classes: bool,
}

impl CountExpr {
    const fn new(factor: usize, t: u8, h: bool) -> Self {
        Self {
            factor,
            t,
            h,
            heads: false,
            classes: false,
        }
    }

    /// `B * T * H`.
    pub const BTH: Self = Self::new(1, 1, true);
    /// `B * T * 4 * H`.
    pub const BT4H: Self = Self::new(FFN_MULT, 1, true);
    /// `B * T`.
    pub const BT: Self = Self::new(1, 1, false);
    /// `B * H`.
    pub const BH: Self = Self::new(1, 0, true);
    /// `B`.
    pub const B: Self = Self::new(1, 0, false);
    /// `B * heads * T * T`.
    pub const BHTT: Self = Self {
        heads: true,
        ..Self::new(1, 2, false)
    };
    /// `B * C`.
    pub const BC: Self = Self {
        classes: true,
        ..Self::new(1, 0, false)
    };

    pub fn eval(&self, config: &ModelConfig, batch: usize, seq_len: usize) -> usize {
        let mut n = self.factor * batch * seq_len.pow(self.t as u32);
        if self.h {
            n *= config.hidden;
        }
        if self.heads {
            n *= config.heads;
        }
        if self.classes {
            n *= config.num_classes;
        }
        n
    }
}

impl fmt::Display for CountExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = vec!["B".to_string()];
        if self.heads {
            parts.push("heads".into());
        }
        parts.extend(std::iter::repeat_n("T".to_string(), self.t as usize));
        if self.factor != 1 {
            parts.push(self.factor.to_string());
        }
        if self.h {
            parts.push("H".into());
        }
        if self.classes {
            parts.push("C".into());
        }
        f.write_str(&parts.join("*"))
    }
}

/// How a record's payload is stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    /// 32-bit integer ids, never compressed.
    Indices,
    /// A float tensor stored through `codec`.
    Tensor { codec: Codec },
}

/// One cached buffer of a training iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationRecord {
    /// Same `<scope>:<role>` name the engine assigns to the saved entry.
    pub name: String,
    /// Layer whose freeze flag governs this record (dynamic and semi-static).
    pub layer: Option<LayerId>,
    pub block: Option<usize>,
    pub kind: ActivationKind,
    pub count: CountExpr,
    pub storage: Storage,
}

impl ActivationRecord {
    /// Bytes when the owning layer is active or frozen, under `frozen_norm`
    /// for semi-static records.
    pub fn bytes(&self, elements: usize, frozen: bool, frozen_norm: Codec) -> u64 {
        match (self.kind, frozen) {
            (ActivationKind::Dynamic, true) => 0,
            (ActivationKind::SemiStatic, true) => frozen_norm.bytes_for(elements),
            _ => match self.storage {
                Storage::Indices => INDEX_BYTES * elements as u64,
                Storage::Tensor { codec } => codec.bytes_for(elements),
            },
        }
    }
}

struct Recorder<'a> {
    registry: &'a LayerRegistry,
    out: Vec<ActivationRecord>,
}

impl Recorder<'_> {
    fn layer(&self, role: LayerRole, block: Option<usize>) -> (LayerId, String) {
        let id = self
            .registry
            .id_of(role, block)
            .expect("registry covers every role");
        (id, self.registry.entries()[id].name.clone())
    }

    fn push(
        &mut self,
        name: String,
        layer: Option<LayerId>,
        block: Option<usize>,
        kind: ActivationKind,
        count: CountExpr,
        storage: Storage,
    ) {
        self.out.push(ActivationRecord {
            name,
            layer,
            block,
            kind,
            count,
            storage,
        });
    }

    fn ids(&mut self, role: LayerRole) {
        let (id, name) = self.layer(role, None);
        self.push(
            format!("{name}:ids"),
            Some(id),
            None,
            ActivationKind::Dynamic,
            CountExpr::BT,
            Storage::Indices,
        );
    }

    fn dense(&mut self, role: LayerRole, block: Option<usize>, count: CountExpr, codec: Codec) {
        let (id, name) = self.layer(role, block);
        let storage = Storage::Tensor { codec };
        self.push(
            format!("{name}:input"),
            Some(id),
            block,
            ActivationKind::Dynamic,
            count,
            storage,
        );
    }

    fn norm(&mut self, role: LayerRole, block: Option<usize>) {
        let (id, name) = self.layer(role, block);
        let raw = Storage::Tensor { codec: Codec::Raw };
        self.push(
            format!("{name}:normed"),
            Some(id),
            block,
            ActivationKind::SemiStatic,
            CountExpr::BTH,
            raw,
        );
        self.push(
            format!("{name}:inv_std"),
            None,
            block,
            ActivationKind::Static,
            CountExpr::BT,
            raw,
        );
    }

    fn fixed(&mut self, name: String, block: Option<usize>, count: CountExpr, storage: Storage) {
        self.push(name, None, block, ActivationKind::Static, count, storage);
    }
}

/// Records of one forward pass of `config`, in engine order.
pub fn activation_records(config: &ModelConfig, codecs: &CodecConfig) -> Vec<ActivationRecord> {
    let registry = LayerRegistry::new(config);
    let mut r = Recorder {
        registry: &registry,
        out: Vec::new(),
    };
    let raw = Storage::Tensor { codec: Codec::Raw };
    let attn = Storage::Tensor {
        codec: codecs.attention,
    };
    let pre = config.norm == NormPlacement::Pre;

    r.ids(LayerRole::WordEmbeddings);
    r.ids(LayerRole::PositionEmbeddings);
    r.ids(LayerRole::TokenTypeEmbeddings);
    r.norm(LayerRole::EmbeddingNorm, None);
    for b in 0..config.layers {
        let blk = Some(b);
        let scope = format!("encoder.layer.{b}.attention.self");
        if pre {
            r.norm(LayerRole::AttentionNorm, blk);
        }
        for role in [LayerRole::Query, LayerRole::Key, LayerRole::Value] {
            r.dense(role, blk, CountExpr::BTH, Codec::Raw);
        }
        r.fixed(format!("{scope}:matmul.lhs"), blk, CountExpr::BTH, attn);
        r.fixed(format!("{scope}:matmul.rhs"), blk, CountExpr::BTH, attn);
        r.fixed(format!("{scope}:softmax.out"), blk, CountExpr::BHTT, attn);
        r.fixed(format!("{scope}:matmul.rhs"), blk, CountExpr::BTH, attn);
        r.dense(LayerRole::AttentionOutput, blk, CountExpr::BTH, Codec::Raw);
        r.norm(
            if pre {
                LayerRole::OutputNorm
            } else {
                LayerRole::AttentionNorm
            },
            blk,
        );
        r.dense(LayerRole::Intermediate, blk, CountExpr::BTH, Codec::Raw);
        let gelu = Storage::Tensor { codec: codecs.gelu };
        r.fixed(
            format!("encoder.layer.{b}.intermediate:gelu.input"),
            blk,
            CountExpr::BT4H,
            gelu,
        );
        r.dense(
            LayerRole::Output,
            blk,
            CountExpr::BT4H,
            codecs.dense_imbalanced,
        );
        if !pre {
            r.norm(LayerRole::OutputNorm, blk);
        }
    }
    r.dense(LayerRole::Pooler, None, CountExpr::BH, Codec::Raw);
    r.fixed("pooler:tanh.out".into(), None, CountExpr::BH, raw);
    r.dense(LayerRole::Classifier, None, CountExpr::BH, Codec::Raw);
    r.fixed("loss:loss.probs".into(), None, CountExpr::BC, raw);
    r.fixed(
        "loss:loss.labels".into(),
        None,
        CountExpr::B,
        Storage::Indices,
    );
    r.out
}

/// Bytes of one record under a decision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordBytes {
    pub name: String,
    pub layer: Option<LayerId>,
    pub kind: ActivationKind,
    pub count: String,
    pub elements: usize,
    pub frozen: bool,
    pub bytes: u64,
}

/// Activation footprint of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub batch: usize,
    pub seq_len: usize,
    pub frozen_layers: usize,
    pub records: Vec<RecordBytes>,
    pub dynamic_bytes: u64,
    pub static_bytes: u64,
    pub semi_static_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryReport {
    pub fn total_gb(&self) -> f64 {
        self.total_bytes as f64 / GB
    }

    /// Bytes summed per owning layer (dynamic and semi-static records).
    pub fn per_layer(&self) -> BTreeMap<LayerId, u64> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            if let Some(l) = r.layer {
                *out.entry(l).or_default() += r.bytes;
            }
        }
        out
    }
}

/// Footprint of one iteration under `decision`.
pub fn account_iteration(
    config: &ModelConfig,
    batch: usize,
    seq_len: usize,
    decision: &FreezeDecision,
    codecs: &CodecConfig,
) -> MemoryReport {
    let mut report = MemoryReport {
        batch,
        seq_len,
        frozen_layers: decision.frozen_ids.len(),
        records: Vec::new(),
        dynamic_bytes: 0,
        static_bytes: 0,
        semi_static_bytes: 0,
        total_bytes: 0,
    };
    for rec in activation_records(config, codecs) {
        let elements = rec.count.eval(config, batch, seq_len);
        let frozen = rec.layer.is_some_and(|l| decision.is_frozen(l));
        let bytes = rec.bytes(elements, frozen, codecs.frozen_norm);
        match rec.kind {
            ActivationKind::Dynamic => report.dynamic_bytes += bytes,
            ActivationKind::Static => report.static_bytes += bytes,
            ActivationKind::SemiStatic => report.semi_static_bytes += bytes,
        }
        report.records.push(RecordBytes {
            name: rec.name,
            layer: rec.layer,
            kind: rec.kind,
            count: rec.count.to_string(),
            elements,
            frozen,
            bytes,
        });
    }
    report.total_bytes = report.dynamic_bytes + report.static_bytes + report.semi_static_bytes;
    report
}

/// Per-iteration totals of a schedule and their maximum.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleMemory {
    pub per_iteration: Vec<u64>,
    pub max_bytes: u64,
    pub max_iteration: usize,
}

/// Reported footprint of a run: the peak over its iterations.
pub fn account_schedule(
    config: &ModelConfig,
    batch: usize,
    seq_len: usize,
    decisions: &[FreezeDecision],
    codecs: &CodecConfig,
) -> ScheduleMemory {
    let per_iteration: Vec<u64> = decisions
        .iter()
        .map(|d| account_iteration(config, batch, seq_len, d, codecs).total_bytes)
        .collect();
    let (max_iteration, max_bytes) =
        per_iteration
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, 0),
                |best, (i, b)| if b > best.1 { (i, b) } else { best },
            );
    ScheduleMemory {
        per_iteration,
        max_bytes,
        max_iteration,
    }
}

/// The decision at rate `rate` over `candidates` with the largest footprint:
/// the layers whose activity costs most stay active.
pub fn worst_case_decision(
    config: &ModelConfig,
    batch: usize,
    seq_len: usize,
    rate: f64,
    candidates: &[LayerId],
    codecs: &CodecConfig,
) -> Result<FreezeDecision> {
    validate_rate(rate)?;
    let n = config.num_layers();
    let all_frozen = FreezeDecision::new(0, candidates.to_vec(), n);
    let none_frozen = FreezeDecision::none(0, n);
    let frozen_cost = account_iteration(config, batch, seq_len, &all_frozen, codecs).per_layer();
    let active_cost = account_iteration(config, batch, seq_len, &none_frozen, codecs).per_layer();
    let mut order: Vec<LayerId> = candidates.to_vec();
    let gain = |l: &LayerId| {
        active_cost.get(l).copied().unwrap_or(0) - frozen_cost.get(l).copied().unwrap_or(0)
    };
    order.sort_by(|a, b| gain(a).cmp(&gain(b)).then(a.cmp(b)));
    order.truncate(frozen_count(candidates.len(), rate));
    Ok(FreezeDecision::new(0, order, n))
}

/// Ratio of the largest to the smallest per-layer dynamic input count among
/// a block's trainable layers.
pub fn imbalance_ratio(config: &ModelConfig) -> f64 {
    block_ratio(config, &CodecConfig::off(), false)
}

/// Same ratio in bytes under `codecs`.
pub fn imbalance_byte_ratio(config: &ModelConfig, codecs: &CodecConfig) -> f64 {
    block_ratio(config, codecs, true)
}

fn block_ratio(config: &ModelConfig, codecs: &CodecConfig, in_bytes: bool) -> f64 {
    let report = account_iteration(
        config,
        1,
        1,
        &FreezeDecision::none(0, config.num_layers()),
        codecs,
    );
    let block0: Vec<f64> = report
        .records
        .iter()
        .zip(activation_records(config, codecs))
        .filter(|(_, rec)| rec.block == Some(0) && rec.layer.is_some())
        .map(|(r, _)| {
            if in_bytes {
                r.bytes as f64
            } else {
                r.elements as f64
            }
        })
        .collect();
    let max = block0.iter().copied().fold(f64::MIN, f64::max);
    let min = block0.iter().copied().fold(f64::MAX, f64::min);
    max / min
}

/// Closed-form parameter-side memory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateMemory {
    pub parameters: usize,
    pub weight_bytes: u64,
    pub gradient_bytes: u64,
    pub adam_moment_bytes: u64,
}

/// Weights, gradients and AdamW moments of `config`, 4 bytes per value.
pub fn state_memory(config: &ModelConfig) -> StateMemory {
    let n = config.parameter_count();
    StateMemory {
        parameters: n,
        weight_bytes: 4 * n as u64,
        gradient_bytes: 4 * n as u64,
        adam_moment_bytes: 8 * n as u64,
    }
}

/// Instrumented vs analytic bytes for one recorded iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Audit {
    pub instrumented_bytes: u64,
    pub analytic_bytes: u64,
    pub instrumented_dynamic: u64,
    pub instrumented_static: u64,
    pub instrumented_semi_static: u64,
    pub relative_difference: f64,
}

/// Compares the engine's cached entries with the analytic report.
pub fn compare(cached: &[CacheRecord], report: &MemoryReport) -> Audit {
    let by_kind =
        |k: ActivationKind| -> u64 { cached.iter().filter(|c| c.kind == k).map(|c| c.bytes).sum() };
    let instrumented: u64 = cached.iter().map(|c| c.bytes).sum();
    let analytic = report.total_bytes;
    Audit {
        instrumented_bytes: instrumented,
        analytic_bytes: analytic,
        instrumented_dynamic: by_kind(ActivationKind::Dynamic),
        instrumented_static: by_kind(ActivationKind::Static),
        instrumented_semi_static: by_kind(ActivationKind::SemiStatic),
        relative_difference: (instrumented as f64 - analytic as f64).abs()
            / (analytic.max(1) as f64),
    }
}

/// Records one forward pass of `model` on `batch` under `decision` and
/// audits the cached bytes against [`account_iteration`].
pub fn audit_runtime(
    model: &mut Model<f32>,
    batch: &Batch,
    decision: &FreezeDecision,
    codecs: &CodecConfig,
) -> Result<Audit> {
    if decision.frozen_ids.len() + decision.active_ids.len() != model.num_layers() {
        return Err(Error::Usage("decision does not cover the registry".into()));
    }
    model.freeze_set(&decision.frozen_ids)?;
    let mut g = Graph::new();
    model.forward_loss(&mut g, batch, codecs)?;
    let report = account_iteration(
        model.config(),
        batch.batch_size,
        batch.seq_len,
        decision,
        codecs,
    );
    Ok(compare(&g.cache_records(), &report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_display() {
        assert_eq!(CountExpr::BT4H.to_string(), "B*T*4*H");
        assert_eq!(CountExpr::BHTT.to_string(), "B*heads*T*T");
        assert_eq!(CountExpr::BTH.to_string(), "B*T*H");
    }

    #[test]
    fn imbalanced_row_count() {
        let c = ModelConfig::bert_base();
        assert_eq!(CountExpr::BT4H.eval(&c, 32, 128), 12_582_912);
    }

    #[test]
    fn one_imbalanced_record_per_block() {
        let c = ModelConfig {
            layers: 3,
            ..ModelConfig::default()
        };
        let recs = activation_records(&c, &CodecConfig::off());
        for b in 0..3 {
            let heavy = recs
                .iter()
                .filter(|r| {
                    r.block == Some(b)
                        && r.kind == ActivationKind::Dynamic
                        && r.count == CountExpr::BT4H
                })
                .count();
            assert_eq!(heavy, 1);
        }
    }

    #[test]
    fn ratios() {
        for h in [1, 8, 768] {
            let c = ModelConfig {
                hidden: h,
                heads: 1,
                ..ModelConfig::default()
            };
            assert_eq!(imbalance_ratio(&c), 4.0);
            assert_eq!(imbalance_byte_ratio(&c, &CodecConfig::all_on()), 1.0);
        }
    }
}
