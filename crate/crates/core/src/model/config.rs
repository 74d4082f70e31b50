use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where each block's LayerNorms sit relative to the residual branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `LN(x + f(x))`, BERT layout.
    #[default]
    Post,
    /// `x + f(LN(x))`, ViT layout.
    Pre,
}

/// Whether the pooler and classifier take part in freezing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    /// Pooler and classifier are scheduled like every other layer.
    #[default]
    Scheduled,
    /// Pooler and classifier are never frozen.
    AlwaysTrain,
}

/// Encoder dimensions. The FFN width is fixed at `4 * hidden`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub norm: NormPlacement,
    pub eps: f64,
    pub head_policy: HeadPolicy,
}

/// FFN expansion factor.
pub const FFN_MULT: usize = 4;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 4,
            max_seq_len: 8,
            vocab: 16,
            num_classes: 4,
            norm: NormPlacement::Post,
            eps: 1e-5,
            head_policy: HeadPolicy::Scheduled,
        }
    }
}

impl ModelConfig {
    /// BERT-base dimensions with a two-way classifier.
    pub fn bert_base() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            max_seq_len: 128,
            vocab: 30522,
            num_classes: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("max_seq_len", self.max_seq_len),
            ("vocab", self.vocab),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn(&self) -> usize {
        FFN_MULT * self.hidden
    }

    /// Number of freezable layers: 4 embedding entries, 8 per block, pooler
    /// and classifier.
    pub fn num_layers(&self) -> usize {
        4 + 8 * self.layers + 2
    }

    /// Total parameter count, including biases and LayerNorm affine terms.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let dense = |din: usize, dout: usize| din * dout + dout;
        let embeddings = (self.vocab + self.max_seq_len + 1) * h + 2 * h;
        let block = 4 * dense(h, h) + dense(h, self.ffn()) + dense(self.ffn(), h) + 4 * h;
        embeddings + self.layers * block + dense(h, h) + dense(h, self.num_classes)
    }
}
