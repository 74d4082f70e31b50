//! Flat little-endian f32 parameter container plus a text manifest.
//!
//! Manifest grammar, one record per line:
//!
//! ```text
//! freezetune-checkpoint 1
//! config layers=2 hidden=32 heads=4 max_seq_len=8 vocab=16 num_classes=4 norm=post eps=0.00001 head_policy=scheduled
//! <param name> <dim>x<dim>... <byte offset>
//! ```

use std::fs;
use std::path::Path;

use super::{HeadPolicy, Model, ModelConfig, NormPlacement};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_BIN: &str = "model.bin";
pub const CHECKPOINT_MANIFEST: &str = "model.manifest";
const MAGIC: &str = "freezetune-checkpoint 1";

fn config_line(c: &ModelConfig) -> String {
    let norm = match c.norm {
        NormPlacement::Post => "post",
        NormPlacement::Pre => "pre",
    };
    let head = match c.head_policy {
        HeadPolicy::Scheduled => "scheduled",
        HeadPolicy::AlwaysTrain => "always_train",
    };
    format!(
        "config layers={} hidden={} heads={} max_seq_len={} vocab={} num_classes={} norm={norm} eps={} head_policy={head}",
        c.layers, c.hidden, c.heads, c.max_seq_len, c.vocab, c.num_classes, c.eps
    )
}

fn parse_config(line: &str) -> Result<ModelConfig> {
    let bad = |m: String| Error::Config(format!("checkpoint manifest line 2: {m}"));
    let rest = line
        .strip_prefix("config ")
        .ok_or_else(|| bad("expected `config`".into()))?;
    let mut c = ModelConfig::default();
    for kv in rest.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed field `{kv}`")))?;
        let int = || v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
        match k {
            "layers" => c.layers = int()?,
            "hidden" => c.hidden = int()?,
            "heads" => c.heads = int()?,
            "max_seq_len" => c.max_seq_len = int()?,
            "vocab" => c.vocab = int()?,
            "num_classes" => c.num_classes = int()?,
            "eps" => c.eps = v.parse().map_err(|e| bad(format!("eps: {e}")))?,
            "norm" => {
                c.norm = match v {
                    "post" => NormPlacement::Post,
                    "pre" => NormPlacement::Pre,
                    _ => return Err(bad(format!("unknown norm `{v}`"))),
                }
            }
            "head_policy" => {
                c.head_policy = match v {
                    "scheduled" => HeadPolicy::Scheduled,
                    "always_train" => HeadPolicy::AlwaysTrain,
                    _ => return Err(bad(format!("unknown head_policy `{v}`"))),
                }
            }
            _ => return Err(bad(format!("unknown field `{k}`"))),
        }
    }
    Ok(c)
}

/// Writes `model.bin` and `model.manifest` into `dir`.
pub fn save_checkpoint<T: Real>(model: &Model<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bin = Vec::with_capacity(model.params.numel() * 4);
    let mut manifest = format!("{MAGIC}\n{}\n", config_line(model.config()));
    for (_, p) in model.params.iter() {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} {}\n", p.name, dims.join("x"), bin.len()));
        for v in p.tensor.data() {
            bin.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    fs::write(dir.join(CHECKPOINT_BIN), bin)?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), manifest)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Model<T>> {
    let manifest = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let bin = fs::read(dir.join(CHECKPOINT_BIN))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Config(
            "checkpoint manifest line 1: bad header".into(),
        ));
    }
    let config = parse_config(lines.next().unwrap_or_default())?;
    let mut model = Model::<T>::new(config, 0)?;
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        let bad = |m: &str| Error::Config(format!("checkpoint manifest line {lineno}: {m}"));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let &[name, shape, offset] = fields.as_slice() else {
            return Err(bad("expected `name shape offset`"));
        };
        let id = model
            .params
            .find(name)
            .ok_or_else(|| bad("unknown parameter"))?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let tensor = &mut model.params.get_mut(id).tensor;
        if tensor.shape() != shape.as_slice() {
            return Err(bad("shape does not match config"));
        }
        let end = offset + 4 * tensor.numel();
        let bytes = bin
            .get(offset..end)
            .ok_or_else(|| bad("offset past end of data"))?;
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = T::of_f32(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
        }
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(Error::Config(format!(
            "checkpoint lists {seen} of {} parameters",
            model.params.len()
        )));
    }
    Ok(model)
}
