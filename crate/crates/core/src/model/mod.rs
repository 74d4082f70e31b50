//! BERT-style transformer encoder with a registry of freezable layers.

mod checkpoint;
mod config;
mod registry;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_BIN, CHECKPOINT_MANIFEST};
pub use config::{HeadPolicy, ModelConfig, NormPlacement, FFN_MULT};
pub use registry::{LayerEntry, LayerRegistry, LayerRole};

use crate::autograd::{Graph, LayerId, ParamId, ParamStore, Var};
use crate::compression::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// A batch of token sequences with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Row-major `[batch_size, seq_len]` token ids.
    pub tokens: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub labels: Vec<u32>,
    /// Optional `[batch_size, seq_len]` key mask; `false` marks padding.
    pub mask: Option<Vec<bool>>,
}

impl Batch {
    pub fn new(
        tokens: Vec<u32>,
        batch_size: usize,
        seq_len: usize,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::Shape("batch needs at least one token".into()));
        }
        if tokens.len() != batch_size * seq_len {
            return Err(Error::Shape(format!(
                "{} tokens for a {batch_size}x{seq_len} batch",
                tokens.len()
            )));
        }
        if labels.len() != batch_size {
            return Err(Error::Shape(format!(
                "{} labels for batch size {batch_size}",
                labels.len()
            )));
        }
        Ok(Self {
            tokens,
            batch_size,
            seq_len,
            labels,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.tokens.len() {
            return Err(Error::Shape("mask does not match token grid".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }
}

/// Parameters owned by one registry layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    /// Weight matrix, embedding table, or LayerNorm gamma.
    pub weight: ParamId,
    /// Bias or LayerNorm beta.
    pub bias: Option<ParamId>,
}

/// Encoder, pooler and classifier with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    registry: LayerRegistry,
    pub params: ParamStore<T>,
    layers: Vec<LayerParams>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect()
}

impl<T: Real> Model<T> {
    /// Builds a model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let registry = LayerRegistry::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(registry.len());
        let h = config.hidden;
        for entry in registry.entries() {
            let weight_name = format!("{}.weight", entry.name);
            let bias_name = format!("{}.bias", entry.name);
            let id = entry.id;
            let mut random = |shape: [usize; 2]| -> Result<Tensor<T>> {
                Tensor::from_f64(shape, &trunc_normal(&mut rng, shape[0] * shape[1]))
            };
            let lp = match entry.role {
                LayerRole::WordEmbeddings
                | LayerRole::PositionEmbeddings
                | LayerRole::TokenTypeEmbeddings => {
                    let rows = match entry.role {
                        LayerRole::WordEmbeddings => config.vocab,
                        LayerRole::PositionEmbeddings => config.max_seq_len,
                        _ => 1,
                    };
                    LayerParams {
                        weight: params.add(weight_name, random([rows, h])?, id),
                        bias: None,
                    }
                }
                role if role.is_norm() => LayerParams {
                    weight: params.add(weight_name, Tensor::full([h], T::one()), id),
                    bias: Some(params.add(bias_name, Tensor::zeros([h]), id)),
                },
                role => {
                    let (din, dout) = match role {
                        LayerRole::Intermediate => (h, config.ffn()),
                        LayerRole::Output => (config.ffn(), h),
                        LayerRole::Classifier => (h, config.num_classes),
                        _ => (h, h),
                    };
                    LayerParams {
                        weight: params.add(weight_name, random([din, dout])?, id),
                        bias: Some(params.add(bias_name, Tensor::zeros([dout]), id)),
                    }
                }
            };
            layers.push(lp);
        }
        Ok(Self {
            config,
            registry,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    pub fn num_layers(&self) -> usize {
        self.registry.len()
    }

    pub fn layer_params(&self, id: LayerId) -> Result<LayerParams> {
        self.layers.get(id).copied().ok_or(Error::UnknownLayer(id))
    }

    /// Layers the scheduler may freeze under the configured head policy.
    pub fn schedulable_layers(&self) -> Vec<LayerId> {
        self.registry
            .entries()
            .iter()
            .filter(|e| self.config.head_policy == HeadPolicy::Scheduled || !e.role.is_head())
            .map(|e| e.id)
            .collect()
    }

    /// Disables updates for exactly `frozen` and enables every other layer.
    pub fn freeze_set(&mut self, frozen: &[LayerId]) -> Result<()> {
        let n = self.num_layers();
        if let Some(&bad) = frozen.iter().find(|&&id| id >= n) {
            return Err(Error::UnknownLayer(bad));
        }
        let mut is_frozen = vec![false; n];
        frozen.iter().for_each(|&id| is_frozen[id] = true);
        for (_, p) in self.params.iter_mut() {
            p.update_enabled = !is_frozen[p.layer_id];
        }
        Ok(())
    }

    pub fn frozen_layers(&self) -> Vec<LayerId> {
        (0..self.num_layers())
            .filter(|&id| !self.params.get(self.layers[id].weight).update_enabled)
            .collect()
    }

    /// Replaces the classifier with a freshly initialized one for
    /// `num_classes` outputs, keeping every other parameter.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        let id = self.id(LayerRole::Classifier, None);
        let lp = self.layers[id];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.config.hidden;
        let w = Tensor::from_f64([h, num_classes], &trunc_normal(&mut rng, h * num_classes))?;
        self.params.get_mut(lp.weight).tensor = w;
        let bias = lp.bias.expect("classifier has a bias");
        self.params.get_mut(bias).tensor = Tensor::zeros([num_classes]);
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Copy of the model at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            registry: self.registry.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    fn name(&self, id: LayerId) -> &str {
        &self.registry.entries()[id].name
    }

    fn id(&self, role: LayerRole, block: Option<usize>) -> LayerId {
        self.registry
            .id_of(role, block)
            .expect("registry covers every role")
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, id: LayerId, codec: Codec) -> Result<Var> {
        g.set_scope(self.name(id).to_string());
        let lp = self.layers[id];
        g.linear(x, &self.params, lp.weight, lp.bias, codec)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, id: LayerId, codecs: &CodecConfig) -> Result<Var> {
        g.set_scope(self.name(id).to_string());
        let lp = self.layers[id];
        let beta = lp.bias.expect("norm layers carry beta");
        g.layer_norm(
            x,
            &self.params,
            lp.weight,
            beta,
            self.config.eps,
            codecs.frozen_norm,
        )
    }

    fn embed(&self, g: &mut Graph<T>, ids: &[u32], shape: &[usize], id: LayerId) -> Result<Var> {
        g.set_scope(self.name(id).to_string());
        g.embedding(ids, shape, &self.params, self.layers[id].weight)
    }

    fn attention(
        &self,
        g: &mut Graph<T>,
        x: Var,
        block: usize,
        batch: &Batch,
        codecs: &CodecConfig,
    ) -> Result<Var> {
        let (b, t) = (batch.batch_size, batch.seq_len);
        let (heads, dh) = (self.config.heads, self.config.head_dim());
        let q = self.dense(g, x, self.id(LayerRole::Query, Some(block)), Codec::Raw)?;
        let k = self.dense(g, x, self.id(LayerRole::Key, Some(block)), Codec::Raw)?;
        let v = self.dense(g, x, self.id(LayerRole::Value, Some(block)), Codec::Raw)?;
        g.set_scope(format!("encoder.layer.{block}.attention.self"));
        let split = [b, t, heads, dh];
        let q = g.reshape(q, &split)?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(k, &split)?;
        let k_t = g.permute(k, &[0, 2, 3, 1])?;
        let v = g.reshape(v, &split)?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.matmul_with(q, k_t, codecs.attention)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(mask) = &batch.mask {
            scores = g.key_mask(scores, mask)?;
        }
        let probs = g.softmax(scores, 3, codecs.attention)?;
        let ctx = g.matmul_with(probs, v, codecs.attention)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, self.config.hidden])?;
        self.dense(
            g,
            ctx,
            self.id(LayerRole::AttentionOutput, Some(block)),
            Codec::Raw,
        )
    }

    fn feed_forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        block: usize,
        codecs: &CodecConfig,
    ) -> Result<Var> {
        let inter = self.dense(
            g,
            x,
            self.id(LayerRole::Intermediate, Some(block)),
            Codec::Raw,
        )?;
        g.set_scope(format!("encoder.layer.{block}.intermediate"));
        let act = g.gelu(inter, codecs.gelu)?;
        self.dense(
            g,
            act,
            self.id(LayerRole::Output, Some(block)),
            codecs.dense_imbalanced,
        )
    }

    /// Records the forward pass and returns `[B, num_classes]` logits.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch, codecs: &CodecConfig) -> Result<Var> {
        let (b, t) = (batch.batch_size, batch.seq_len);
        if t > self.config.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = batch
            .tokens
            .iter()
            .find(|&&id| id as usize >= self.config.vocab)
        {
            return Err(Error::Shape(format!(
                "token id {bad} >= vocab {}",
                self.config.vocab
            )));
        }
        let grid = [b, t];
        let positions: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
        let word = self.embed(
            g,
            &batch.tokens,
            &grid,
            self.id(LayerRole::WordEmbeddings, None),
        )?;
        let pos = self.embed(
            g,
            &positions,
            &grid,
            self.id(LayerRole::PositionEmbeddings, None),
        )?;
        let types = self.embed(
            g,
            &vec![0; b * t],
            &grid,
            self.id(LayerRole::TokenTypeEmbeddings, None),
        )?;
        let sum = g.add(word, pos)?;
        let sum = g.add(sum, types)?;
        let mut x = self.norm(g, sum, self.id(LayerRole::EmbeddingNorm, None), codecs)?;

        for block in 0..self.config.layers {
            let att_norm = self.id(LayerRole::AttentionNorm, Some(block));
            let out_norm = self.id(LayerRole::OutputNorm, Some(block));
            match self.config.norm {
                NormPlacement::Post => {
                    let a = self.attention(g, x, block, batch, codecs)?;
                    let r = g.add(x, a)?;
                    x = self.norm(g, r, att_norm, codecs)?;
                    let f = self.feed_forward(g, x, block, codecs)?;
                    let r = g.add(x, f)?;
                    x = self.norm(g, r, out_norm, codecs)?;
                }
                NormPlacement::Pre => {
                    let h = self.norm(g, x, att_norm, codecs)?;
                    let a = self.attention(g, h, block, batch, codecs)?;
                    x = g.add(x, a)?;
                    let h = self.norm(g, x, out_norm, codecs)?;
                    let f = self.feed_forward(g, h, block, codecs)?;
                    x = g.add(x, f)?;
                }
            }
        }

        g.set_scope("pooler");
        let first = g.select_token(x, 0)?;
        let pooled = self.dense(g, first, self.id(LayerRole::Pooler, None), Codec::Raw)?;
        g.set_scope("pooler");
        let pooled = g.tanh(pooled)?;
        self.dense(g, pooled, self.id(LayerRole::Classifier, None), Codec::Raw)
    }

    /// Forward pass plus mean cross-entropy. Returns `(logits, loss)`.
    pub fn forward_loss(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        codecs: &CodecConfig,
    ) -> Result<(Var, Var)> {
        let logits = self.forward(g, batch, codecs)?;
        g.set_scope("loss");
        let loss = g.cross_entropy(logits, &batch.labels)?;
        Ok((logits, loss))
    }
}
