//! Tape-based reverse-mode differentiation with pluggable activation caching.
//!
//! Every op computes its forward value in full precision. What the op keeps
//! for the backward pass goes through [`Graph::save`], which applies the
//! requested [`Codec`] and tags the entry for memory accounting. Backward
//! rules read only those saved entries (and parameters), never the forward
//! values, so compression and freezing change exactly what the real engine
//! would lose.
//!
//! Static activations (matmul operands, softmax output, GELU input, LayerNorm
//! statistics) are cached whenever the graph records, even when nothing
//! upstream needs a gradient, so their footprint does not depend on the
//! freeze set. Dense-layer inputs and embedding ids are cached only for
//! update-enabled layers.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::param::{LayerId, ParamId, ParamStore};
use crate::compression::{Codec, CompressedActivation};
use crate::error::{Error, Result};
use crate::tensor::{self, numel_of, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Handle to a saved activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SlotId(usize);

/// Role of a cached tensor with respect to freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// Needed only for a weight gradient; dropped when the layer is frozen.
    Dynamic,
    /// Needed for the input gradient regardless of freezing.
    Static,
    /// Static, but reducible when the owning layer is frozen (LayerNorm).
    SemiStatic,
}

/// Cached tensor payload.
#[derive(Clone, Debug)]
pub enum SavedValue<T> {
    Raw(Tensor<T>),
    Compressed(CompressedActivation),
    Indices { ids: Vec<u32>, shape: Vec<usize> },
}

impl<T: Real> SavedValue<T> {
    pub fn bytes(&self) -> u64 {
        match self {
            SavedValue::Raw(t) => (T::BYTES * t.numel()) as u64,
            SavedValue::Compressed(c) => c.payload_bytes(),
            SavedValue::Indices { ids, .. } => 4 * ids.len() as u64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            SavedValue::Raw(t) => t.shape(),
            SavedValue::Compressed(c) => c.shape(),
            SavedValue::Indices { shape, .. } => shape,
        }
    }

    /// Dense tensor with the original saved shape.
    pub fn decompress(&self) -> Result<Cow<'_, Tensor<T>>> {
        match self {
            SavedValue::Raw(t) => Ok(Cow::Borrowed(t)),
            SavedValue::Compressed(c) => {
                let data = c.decode()?.into_iter().map(T::of_f32).collect();
                Ok(Cow::Owned(Tensor::new(c.shape().to_vec(), data)?))
            }
            SavedValue::Indices { .. } => {
                Err(Error::Internal("index payload read as a tensor".into()))
            }
        }
    }

    fn ids(&self) -> Result<&[u32]> {
        match self {
            SavedValue::Indices { ids, .. } => Ok(ids),
            _ => Err(Error::Internal("tensor payload read as indices".into())),
        }
    }
}

/// One saved activation with its accounting tag.
#[derive(Clone, Debug)]
pub struct SavedEntry<T> {
    pub value: SavedValue<T>,
    pub name: String,
    pub layer: Option<LayerId>,
    pub kind: ActivationKind,
}

/// Flat view of a cached entry used by memory audits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CacheRecord {
    pub name: String,
    pub layer: Option<LayerId>,
    pub kind: ActivationKind,
    pub elements: usize,
    pub bytes: u64,
}

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Op<T> {
    Input,
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        sa: Option<SlotId>,
        sb: Option<SlotId>,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Sum {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        sa: Option<SlotId>,
        sb: Option<SlotId>,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
        out: Option<SlotId>,
    },
    Gelu {
        a: Var,
        input: Option<SlotId>,
    },
    Tanh {
        a: Var,
        out: Option<SlotId>,
    },
    LayerNorm {
        a: Var,
        gamma: ParamId,
        beta: ParamId,
        normed: Option<SlotId>,
        inv_std: Option<SlotId>,
        update: bool,
    },
    Linear {
        a: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        input: Option<SlotId>,
        update: bool,
    },
    Embedding {
        table: ParamId,
        ids: Option<SlotId>,
        update: bool,
    },
    SelectToken {
        a: Var,
        index: usize,
    },
    KeyMask {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Option<SlotId>,
        labels: Option<SlotId>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Set when the op cached its own output, so a consumer can share it.
    output_slot: Option<SlotId>,
}

/// A single forward/backward tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    saved: Vec<SavedEntry<T>>,
    recording: bool,
    scope: String,
    leaf_grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A tape that records saved activations for backward.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            saved: Vec::new(),
            recording: true,
            scope: String::new(),
            leaf_grads: Vec::new(),
            backward_done: false,
        }
    }

    /// A forward-only graph: nothing is cached and backward is refused.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Prefix used to name saved activations recorded from now on.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf created with [`Graph::leaf`], after backward.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
            output_slot: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // -----------------------------------------------------------------------
    // Saved-activation bookkeeping
    // -----------------------------------------------------------------------

    fn save(
        &mut self,
        value: &Tensor<T>,
        codec: Codec,
        role: &str,
        layer: Option<LayerId>,
        kind: ActivationKind,
    ) -> Result<Option<SlotId>> {
        if !self.recording {
            return Ok(None);
        }
        let payload = match codec {
            Codec::Raw => SavedValue::Raw(value.clone()),
            c => SavedValue::Compressed(CompressedActivation::encode(
                &value.to_f32_vec(),
                value.shape(),
                c,
            )?),
        };
        Ok(Some(self.push_saved(payload, role, layer, kind)))
    }

    fn save_ids(
        &mut self,
        ids: &[u32],
        shape: &[usize],
        role: &str,
        layer: Option<LayerId>,
        kind: ActivationKind,
    ) -> Option<SlotId> {
        if !self.recording {
            return None;
        }
        let payload = SavedValue::Indices {
            ids: ids.to_vec(),
            shape: shape.to_vec(),
        };
        Some(self.push_saved(payload, role, layer, kind))
    }

    fn push_saved(
        &mut self,
        value: SavedValue<T>,
        role: &str,
        layer: Option<LayerId>,
        kind: ActivationKind,
    ) -> SlotId {
        let name = if self.scope.is_empty() {
            role.to_string()
        } else {
            format!("{}:{role}", self.scope)
        };
        self.saved.push(SavedEntry {
            value,
            name,
            layer,
            kind,
        });
        SlotId(self.saved.len() - 1)
    }

    /// Saves an operand, reusing the producer's cached output when it has one.
    fn save_operand(&mut self, v: Var, codec: Codec, role: &str) -> Result<Option<SlotId>> {
        if let Some(slot) = self.nodes[v.0].output_slot {
            return Ok(Some(slot));
        }
        let value = self.nodes[v.0].value.clone();
        self.save(&value, codec, role, None, ActivationKind::Static)
    }

    fn saved(&self, slot: Option<SlotId>) -> Result<&SavedValue<T>> {
        slot.map(|s| &self.saved[s.0].value)
            .ok_or_else(|| Error::Internal("saved activation missing".into()))
    }

    pub fn saved_entries(&self) -> &[SavedEntry<T>] {
        &self.saved
    }

    /// Every cached buffer with its byte count. Shared buffers appear once.
    pub fn cache_records(&self) -> Vec<CacheRecord> {
        self.saved
            .iter()
            .map(|e| CacheRecord {
                name: e.name.clone(),
                layer: e.layer,
                kind: e.kind,
                elements: numel_of(e.value.shape()),
                bytes: e.value.bytes(),
            })
            .collect()
    }

    pub fn cached_bytes(&self) -> u64 {
        self.saved.iter().map(|e| e.value.bytes()).sum()
    }

    // -----------------------------------------------------------------------
    // Leaves
    // -----------------------------------------------------------------------

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is collected by backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    // -----------------------------------------------------------------------
    // Elementwise and shape ops
    // -----------------------------------------------------------------------

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let out_shape = tensor::broadcast_shapes(sa, sb)
            .ok_or_else(|| Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let n = numel_of(&out_shape);
        let va = expand(self.value(a), &out_shape);
        let vb = expand(self.value(b), &out_shape);
        let data = (0..n).map(|i| va[i] + vb[i]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        let (sa, sb) = if self.recording {
            (
                self.save_operand(a, Codec::Raw, "mul.lhs")?,
                self.save_operand(b, Codec::Raw, "mul.rhs")?,
            )
        } else {
            (None, None)
        };
        Ok(self.push(out, Op::Mul { a, b, sa, sb }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(a).map(|x| x * f);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..t.rank()).collect::<Vec<_>>() {
            return Err(Error::Shape(format!(
                "invalid permutation {axes:?} for rank {}",
                t.rank()
            )));
        }
        let (data, shape) = tensor::permute(t.data(), t.shape(), axes);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Picks position `index` along axis 1 of a `[B, T, H]` tensor.
    pub fn select_token(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let &[b, seq, h] = t.shape() else {
            return Err(Error::Shape(format!(
                "select_token expects [B, T, H], got {:?}",
                t.shape()
            )));
        };
        if index >= seq {
            return Err(Error::Shape(format!("token index {index} >= {seq}")));
        }
        let mut data = Vec::with_capacity(b * h);
        for bi in 0..b {
            let start = (bi * seq + index) * h;
            data.extend_from_slice(&t.data()[start..start + h]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([b, h], data)?, Op::SelectToken { a, index }, rg))
    }

    /// Adds a large negative bias to attention scores `[B, heads, Tq, Tk]`
    /// wherever `keep[b * Tk + k]` is false.
    pub fn key_mask(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 4 || keep.len() != s[0] * s[3] {
            return Err(Error::Shape(format!(
                "key mask of length {} does not fit scores {s:?}",
                keep.len()
            )));
        }
        let (tk, per_batch) = (s[3], s[1] * s[2] * s[3]);
        let neg = T::lit(-1e9);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let (bi, k) = (i / per_batch, i % tk);
                if keep[bi * tk + k] {
                    x
                } else {
                    x + neg
                }
            })
            .collect();
        let out = Tensor::new(s.to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::KeyMask { a }, rg))
    }

    // -----------------------------------------------------------------------
    // Static-activation ops
    // -----------------------------------------------------------------------

    /// Batched matrix product; caches both operands (static activations).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, Codec::Raw)
    }

    pub fn matmul_with(&mut self, a: Var, b: Var, codec: Codec) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (data, shape) =
            tensor::batched_matmul(ta.data(), ta.shape(), tb.data(), tb.shape(), false, false)?;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        let (sa, sb) = if self.recording {
            (
                self.save_operand(a, codec, "matmul.lhs")?,
                self.save_operand(b, codec, "matmul.rhs")?,
            )
        } else {
            (None, None)
        };
        Ok(self.push(out, Op::MatMul { a, b, sa, sb }, rg))
    }

    /// Softmax along `axis`; caches its output, which a consuming matmul reuses.
    pub fn softmax(&mut self, a: Var, axis: usize, codec: Codec) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = tensor::axis_split(t.shape(), axis);
        let x = t.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), y)?;
        let rg = self.rg(a);
        let slot = if self.recording {
            self.save(&out, codec, "softmax.out", None, ActivationKind::Static)?
        } else {
            None
        };
        let v = self.push(out, Op::Softmax { a, axis, out: slot }, rg);
        self.nodes[v.0].output_slot = slot;
        Ok(v)
    }

    /// GELU, tanh approximation; caches its input.
    pub fn gelu(&mut self, a: Var, codec: Codec) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        let slot = if self.recording {
            let x = self.value(a).clone();
            self.save(&x, codec, "gelu.input", None, ActivationKind::Static)?
        } else {
            None
        };
        Ok(self.push(out, Op::Gelu { a, input: slot }, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::tanh);
        let rg = self.rg(a);
        let slot = if self.recording {
            self.save(&out, Codec::Raw, "tanh.out", None, ActivationKind::Static)?
        } else {
            None
        };
        let v = self.push(out, Op::Tanh { a, out: slot }, rg);
        self.nodes[v.0].output_slot = slot;
        Ok(v)
    }

    // -----------------------------------------------------------------------
    // Parametric ops
    // -----------------------------------------------------------------------

    /// `y = x W + b` over the last axis of `x`, with `W: [in, out]`.
    ///
    /// When the layer is update-enabled its input is cached through `codec`;
    /// when frozen nothing is cached and only the input gradient is produced.
    pub fn linear(
        &mut self,
        a: Var,
        params: &ParamStore<T>,
        weight: ParamId,
        bias: Option<ParamId>,
        codec: Codec,
    ) -> Result<Var> {
        let w = &params.get(weight).tensor;
        let x = self.value(a);
        let (&d_in, lead) = x
            .shape()
            .split_last()
            .ok_or_else(|| Error::Shape("linear input must have rank >= 1".into()))?;
        if w.rank() != 2 || w.shape()[0] != d_in {
            return Err(Error::Shape(format!(
                "matmul dimension mismatch: {:?} x {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let d_out = w.shape()[1];
        let rows = numel_of(lead);
        let mut y = vec![T::zero(); rows * d_out];
        tensor::gemm(x.data(), w.data(), &mut y, rows, d_in, d_out);
        if let Some(b) = bias {
            let bv = params.get(b).tensor.data();
            if bv.len() != d_out {
                return Err(Error::Shape(format!("bias length {} != {d_out}", bv.len())));
            }
            for row in y.chunks_mut(d_out) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(d_out);
        let out = Tensor::new(shape, y)?;

        let param = params.get(weight);
        let (update, layer) = (param.update_enabled, param.layer_id);
        let rg = self.rg(a) || update;
        let input = if update && self.recording {
            let x = self.value(a).clone();
            self.save(&x, codec, "input", Some(layer), ActivationKind::Dynamic)?
        } else {
            None
        };
        Ok(self.push(
            out,
            Op::Linear {
                a,
                weight,
                bias,
                input,
                update,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis (population variance).
    ///
    /// Caches the standardized input: in full when the layer is update-enabled,
    /// through `frozen_codec` (typically top-k pruning) when it is frozen.
    pub fn layer_norm(
        &mut self,
        a: Var,
        params: &ParamStore<T>,
        gamma: ParamId,
        beta: ParamId,
        eps: f64,
        frozen_codec: Codec,
    ) -> Result<Var> {
        let x = self.value(a);
        let h = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        let (gv, bv) = (
            params.get(gamma).tensor.data(),
            params.get(beta).tensor.data(),
        );
        if gv.len() != h || bv.len() != h {
            return Err(Error::Shape(format!(
                "layer_norm width {h} does not match gamma/beta length {}",
                gv.len()
            )));
        }
        let rows = x.numel() / h;
        let hf = T::lit(h as f64);
        let eps = T::lit(eps);
        let mut normed = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * h..(r + 1) * h];
            let mean = xr.iter().copied().sum::<T>() / hf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hf;
            let rstd = T::one() / (var + eps).sqrt();
            inv_std[r] = rstd;
            for j in 0..h {
                let n = (xr[j] - mean) * rstd;
                normed[r * h + j] = n;
                y[r * h + j] = n * gv[j] + bv[j];
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(shape.clone(), y)?;
        let param = params.get(gamma);
        let (update, layer) = (param.update_enabled, param.layer_id);
        let rg = self.rg(a) || update;
        let (normed_slot, inv_slot) = if self.recording {
            let codec = if update { Codec::Raw } else { frozen_codec };
            let normed = Tensor::new(shape.clone(), normed)?;
            let mut stat_shape = shape;
            *stat_shape.last_mut().unwrap() = 1;
            let inv = Tensor::new(stat_shape, inv_std)?;
            (
                self.save(
                    &normed,
                    codec,
                    "normed",
                    Some(layer),
                    ActivationKind::SemiStatic,
                )?,
                self.save(&inv, Codec::Raw, "inv_std", None, ActivationKind::Static)?,
            )
        } else {
            (None, None)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                normed: normed_slot,
                inv_std: inv_slot,
                update,
            },
            rg,
        ))
    }

    /// Row lookup: `ids` of any shape map to `[..., H]`.
    pub fn embedding(
        &mut self,
        ids: &[u32],
        ids_shape: &[usize],
        params: &ParamStore<T>,
        table: ParamId,
    ) -> Result<Var> {
        let tbl = &params.get(table).tensor;
        let (rows, h) = match tbl.shape() {
            &[r, h] => (r, h),
            s => {
                return Err(Error::Shape(format!(
                    "embedding table must be 2-D, got {s:?}"
                )))
            }
        };
        if numel_of(ids_shape) != ids.len() {
            return Err(Error::Shape("ids do not match their shape".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(Error::Shape(format!("token id {id} >= table size {rows}")));
            }
            data.extend_from_slice(&tbl.data()[id * h..(id + 1) * h]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(h);
        let out = Tensor::new(shape, data)?;
        let param = params.get(table);
        let (update, layer) = (param.update_enabled, param.layer_id);
        let slot = if update {
            self.save_ids(ids, ids_shape, "ids", Some(layer), ActivationKind::Dynamic)
        } else {
            None
        };
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: slot,
                update,
            },
            update,
        ))
    }

    /// Mean cross-entropy of `logits: [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let t = self.value(logits);
        let &[b, c] = t.shape() else {
            return Err(Error::Shape(format!(
                "cross_entropy expects [B, C], got {:?}",
                t.shape()
            )));
        };
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "{} labels for batch {b}",
                labels.len()
            )));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label as usize >= c {
                return Err(Error::Shape(format!("label {label} >= classes {c}")));
            }
            let row = &t.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[label as usize];
        }
        let loss = loss / T::lit(b as f64);
        let rg = self.rg(logits);
        let (ps, ls) = if self.recording {
            let p = Tensor::new([b, c], probs)?;
            (
                self.save(&p, Codec::Raw, "loss.probs", None, ActivationKind::Static)?,
                self.save_ids(labels, &[b], "loss.labels", None, ActivationKind::Static),
            )
        } else {
            (None, None)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs: ps,
                labels: ls,
            },
            rg,
        ))
    }

    /// Records an op with a user-supplied backward rule. The closure receives
    /// the output gradient and returns one optional gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            rg,
        )
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients of update-enabled
    /// parameters accumulate into `params`; frozen parameters get none.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        if !self.recording {
            return Err(Error::Usage("backward on an inference graph".into()));
        }
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        self.leaf_grads = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let g = Tensor::new(node.value.shape().to_vec(), g)?;
            let mut send = |v: Var, delta: Vec<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Input => self.leaf_grads[i] = Some(g),
                Op::Add { a, b } => {
                    let out = node.value.shape();
                    for v in [*a, *b] {
                        let target = self.nodes[v.0].value.shape();
                        send(v, tensor::reduce_to_shape(g.data(), out, target));
                    }
                }
                Op::Mul { a, b, sa, sb } => {
                    let va = self.saved(*sa)?.decompress()?;
                    let vb = self.saved(*sb)?.decompress()?;
                    send(*a, zip_with(g.data(), vb.data(), |x, y| x * y));
                    send(*b, zip_with(g.data(), va.data(), |x, y| x * y));
                }
                Op::Scale { a, factor } => {
                    let f = T::lit(*factor);
                    send(*a, g.data().iter().map(|&x| x * f).collect());
                }
                Op::Sum { a } => {
                    let n = self.nodes[a.0].value.numel();
                    send(*a, vec![g.data()[0]; n]);
                }
                Op::Reshape { a } => send(*a, g.into_data()),
                Op::Permute { a, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    send(*a, tensor::permute(g.data(), g.shape(), &inverse).0);
                }
                Op::SelectToken { a, index } => {
                    let s = self.nodes[a.0].value.shape();
                    let (seq, h) = (s[1], s[2]);
                    let mut d = vec![T::zero(); numel_of(s)];
                    for (bi, row) in g.data().chunks(h).enumerate() {
                        let start = (bi * seq + index) * h;
                        d[start..start + h].copy_from_slice(row);
                    }
                    send(*a, d);
                }
                Op::KeyMask { a } => send(*a, g.into_data()),
                Op::MatMul { a, b, sa, sb } => {
                    let va = self.saved(*sa)?.decompress()?;
                    let vb = self.saved(*sb)?.decompress()?;
                    let out_shape = node.value.shape();
                    if self.nodes[a.0].requires_grad {
                        let (ga, full) = tensor::batched_matmul(
                            g.data(),
                            out_shape,
                            vb.data(),
                            vb.shape(),
                            false,
                            true,
                        )?;
                        send(*a, tensor::reduce_to_shape(&ga, &full, va.shape()));
                    }
                    if self.nodes[b.0].requires_grad {
                        let (gb, full) = tensor::batched_matmul(
                            va.data(),
                            va.shape(),
                            g.data(),
                            out_shape,
                            true,
                            false,
                        )?;
                        send(*b, tensor::reduce_to_shape(&gb, &full, vb.shape()));
                    }
                }
                Op::Softmax { a, axis, out } => {
                    let y = self.saved(*out)?.decompress()?;
                    let (outer, len, inner) = tensor::axis_split(y.shape(), *axis);
                    let (yd, gd) = (y.data(), g.data());
                    let mut d = vec![T::zero(); yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    send(*a, d);
                }
                Op::Gelu { a, input } => {
                    let x = self.saved(*input)?.decompress()?;
                    send(
                        *a,
                        zip_with(g.data(), x.data(), |gi, xi| gi * gelu_grad(xi)),
                    );
                }
                Op::Tanh { a, out } => {
                    let y = self.saved(*out)?.decompress()?;
                    send(
                        *a,
                        zip_with(g.data(), y.data(), |gi, yi| gi * (T::one() - yi * yi)),
                    );
                }
                Op::Linear {
                    a,
                    weight,
                    bias,
                    input,
                    update,
                } => {
                    let w = &params.get(*weight).tensor;
                    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
                    let rows = g.numel() / d_out;
                    if *update {
                        let x = self.saved(*input)?.decompress()?;
                        let xt = tensor::transpose2(x.data(), rows, d_in);
                        let mut gw = vec![T::zero(); d_in * d_out];
                        tensor::gemm(&xt, g.data(), &mut gw, d_in, rows, d_out);
                        params.get_mut(*weight).tensor.accumulate_grad(&gw);
                        if let Some(b) = bias {
                            let mut gb = vec![T::zero(); d_out];
                            for row in g.data().chunks(d_out) {
                                gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                            }
                            params.get_mut(*b).tensor.accumulate_grad(&gb);
                        }
                    }
                    if self.nodes[a.0].requires_grad {
                        let w = &params.get(*weight).tensor;
                        let wt = tensor::transpose2(w.data(), d_in, d_out);
                        let mut gx = vec![T::zero(); rows * d_in];
                        tensor::gemm(g.data(), &wt, &mut gx, rows, d_out, d_in);
                        send(*a, gx);
                    }
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                    update,
                } => {
                    let xn = self.saved(*normed)?.decompress()?;
                    let rstd = self.saved(*inv_std)?.decompress()?;
                    let h = *xn.shape().last().unwrap();
                    let gv = params.get(*gamma).tensor.data().to_vec();
                    let (gx, gg, gb) =
                        layer_norm_backward(g.data(), xn.data(), rstd.data(), &gv, h, *update);
                    if let (Some(gg), Some(gb)) = (gg, gb) {
                        params.get_mut(*gamma).tensor.accumulate_grad(&gg);
                        params.get_mut(*beta).tensor.accumulate_grad(&gb);
                    }
                    if self.nodes[a.0].requires_grad {
                        send(*a, gx);
                    }
                }
                Op::Embedding { table, ids, update } => {
                    if *update {
                        let ids = self.saved(*ids)?.ids()?;
                        let tbl = &params.get(*table).tensor;
                        let h = tbl.shape()[1];
                        let mut gt = vec![T::zero(); tbl.numel()];
                        for (k, &id) in ids.iter().enumerate() {
                            let row = &g.data()[k * h..(k + 1) * h];
                            let dst = &mut gt[id as usize * h..(id as usize + 1) * h];
                            dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        params.get_mut(*table).tensor.accumulate_grad(&gt);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let p = self.saved(*probs)?.decompress()?;
                    let labels = self.saved(*labels)?.ids()?;
                    let c = p.shape()[1];
                    let scale = g.data()[0] / T::lit(labels.len() as f64);
                    let mut d: Vec<T> = p.data().iter().map(|&v| v * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * c + l as usize] -= scale;
                    }
                    send(*logits, d);
                }
                Op::Custom { inputs, backward } => {
                    let outs = backward(&g);
                    if outs.len() != inputs.len() {
                        return Err(Error::Internal(
                            "custom backward returned wrong arity".into(),
                        ));
                    }
                    for (v, d) in inputs.iter().zip(outs) {
                        if let Some(d) = d {
                            send(*v, d.into_data());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn zip_with<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Materializes `t` broadcast to `shape`.
fn expand<'a, T: Real>(t: &'a Tensor<T>, shape: &[usize]) -> Cow<'a, [T]> {
    if t.shape() == shape {
        return Cow::Borrowed(t.data());
    }
    let src = t.data();
    Cow::Owned(
        (0..numel_of(shape))
            .map(|flat| src[tensor::broadcast_index(flat, shape, t.shape())])
            .collect(),
    )
}

const GELU_COEF: f64 = 0.044_715;

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(GELU_COEF) * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_COEF);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// LayerNorm backward over rows of width `h`.
///
/// `g = gamma * dy * inv_std / H` and
/// `dx = H g - sum(g) - normed * sum(g * normed)`. Parameter gradients are
/// returned only when `with_params` is set.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    normed: &[T],
    inv_std: &[T],
    gamma: &[T],
    h: usize,
    with_params: bool,
) -> (Vec<T>, Option<Vec<T>>, Option<Vec<T>>) {
    let hf = T::lit(h as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut g = vec![T::zero(); h];
    for (r, rstd) in inv_std.iter().enumerate() {
        let span = r * h..(r + 1) * h;
        let (dyr, xr) = (&dy[span.clone()], &normed[span.clone()]);
        for j in 0..h {
            g[j] = gamma[j] * dyr[j] * *rstd / hf;
        }
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xr).map(|(&a, &b)| a * b).sum();
        for j in 0..h {
            dx[r * h + j] = hf * g[j] - sum_g - xr[j] * sum_gx;
        }
    }
    if !with_params {
        return (dx, None, None);
    }
    let mut dgamma = vec![T::zero(); h];
    let mut dbeta = vec![T::zero(); h];
    for (dyr, xr) in dy.chunks(h).zip(normed.chunks(h)) {
        for j in 0..h {
            dgamma[j] += xr[j] * dyr[j];
            dbeta[j] += dyr[j];
        }
    }
    (dx, Some(dgamma), Some(dbeta))
}
