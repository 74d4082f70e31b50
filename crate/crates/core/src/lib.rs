//! Memory-lean transformer fine-tuning: iterative layer freezing driven by
//! weight-update distances, compressed activation caching, and an analytic
//! activation-memory model.

pub mod autograd;
pub mod compression;
pub mod data;
pub mod error;
pub mod memory;
pub mod model;
pub mod scheduler;
pub mod tensor;
pub mod train;

pub use autograd::{ActivationKind, Graph, LayerId, ParamId, ParamStore, Parameter, Var};
pub use compression::{Codec, CodecConfig, CompressedActivation, FixedPointSpec, PruneOrder};
pub use error::{Error, Result};
pub use model::{Batch, LayerRegistry, Model, ModelConfig};
pub use scheduler::{FreezeDecision, Scheduler, SchedulerKind};
pub use tensor::{Real, Tensor};
