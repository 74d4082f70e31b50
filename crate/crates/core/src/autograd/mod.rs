//! Reverse-mode differentiation over a recorded tape.

pub mod gradcheck;
mod graph;
mod param;

pub use graph::{ActivationKind, CacheRecord, Graph, SavedEntry, SavedValue, SlotId, Var};
pub use param::{LayerId, ParamId, ParamStore, Parameter};
