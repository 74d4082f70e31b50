use serde::Serialize;

use super::config::ModelConfig;
use crate::autograd::LayerId;

/// What a freezable layer computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    WordEmbeddings,
    PositionEmbeddings,
    TokenTypeEmbeddings,
    EmbeddingNorm,
    Query,
    Key,
    Value,
    AttentionOutput,
    AttentionNorm,
    Intermediate,
    Output,
    OutputNorm,
    Pooler,
    Classifier,
}

impl LayerRole {
    /// Roles of one encoder block, in registry order.
    pub const BLOCK: [LayerRole; 8] = [
        LayerRole::Query,
        LayerRole::Key,
        LayerRole::Value,
        LayerRole::AttentionOutput,
        LayerRole::AttentionNorm,
        LayerRole::Intermediate,
        LayerRole::Output,
        LayerRole::OutputNorm,
    ];

    pub fn is_norm(self) -> bool {
        matches!(
            self,
            LayerRole::EmbeddingNorm | LayerRole::AttentionNorm | LayerRole::OutputNorm
        )
    }

    pub fn is_embedding(self) -> bool {
        matches!(
            self,
            LayerRole::WordEmbeddings
                | LayerRole::PositionEmbeddings
                | LayerRole::TokenTypeEmbeddings
        )
    }

    pub fn is_head(self) -> bool {
        matches!(self, LayerRole::Pooler | LayerRole::Classifier)
    }

    fn suffix(self) -> &'static str {
        match self {
            LayerRole::WordEmbeddings => "embeddings.word_embeddings",
            LayerRole::PositionEmbeddings => "embeddings.position_embeddings",
            LayerRole::TokenTypeEmbeddings => "embeddings.token_type_embeddings",
            LayerRole::EmbeddingNorm => "embeddings.LayerNorm",
            LayerRole::Query => "attention.self.query",
            LayerRole::Key => "attention.self.key",
            LayerRole::Value => "attention.self.value",
            LayerRole::AttentionOutput => "attention.output.dense",
            LayerRole::AttentionNorm => "attention.output.LayerNorm",
            LayerRole::Intermediate => "intermediate.dense",
            LayerRole::Output => "output.dense",
            LayerRole::OutputNorm => "output.LayerNorm",
            LayerRole::Pooler => "pooler.dense",
            LayerRole::Classifier => "classifier",
        }
    }
}

/// One freezable unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerEntry {
    pub id: LayerId,
    pub name: String,
    pub role: LayerRole,
    /// Encoder block index, for per-block layers.
    pub block: Option<usize>,
}

/// Ordered list of freezable layers with dense ids `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRegistry {
    entries: Vec<LayerEntry>,
}

impl LayerRegistry {
    pub fn new(config: &ModelConfig) -> Self {
        let mut entries = Vec::with_capacity(config.num_layers());
        let mut push = |role: LayerRole, block: Option<usize>| {
            let name = match block {
                Some(i) => format!("encoder.layer.{i}.{}", role.suffix()),
                None => role.suffix().to_string(),
            };
            entries.push(LayerEntry {
                id: entries.len(),
                name,
                role,
                block,
            });
        };
        push(LayerRole::WordEmbeddings, None);
        push(LayerRole::PositionEmbeddings, None);
        push(LayerRole::TokenTypeEmbeddings, None);
        push(LayerRole::EmbeddingNorm, None);
        for i in 0..config.layers {
            for role in LayerRole::BLOCK {
                push(role, Some(i));
            }
        }
        push(LayerRole::Pooler, None);
        push(LayerRole::Classifier, None);
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: LayerId) -> Option<&LayerEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[LayerEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<LayerId> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Id of `role` in `block` (`None` for non-block layers).
    pub fn id_of(&self, role: LayerRole, block: Option<usize>) -> Option<LayerId> {
        self.entries
            .iter()
            .position(|e| e.role == role && e.block == block)
    }
}
