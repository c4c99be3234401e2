//! Deferred intervention-graph engine for toy neural models.
//!
//! Users trace operations on model internals into a serializable graph,
//! validate it against shape metadata without running the model, and execute
//! it interleaved with the model's forward (and optional backward) pass.

pub mod envoy;
pub mod error;
pub mod graph;
pub mod hook;
pub mod model;
pub mod tensor;
pub mod trace;
pub mod validate;

pub use envoy::Envoy;
pub use error::{Error, Issue, IssueKind, Result};
pub use graph::{Attrs, Graph, Node, OpKind};
pub use hook::{HookPoint, Port};
pub use model::{build_toy_lm, LMConfig, Module, ModuleKind};
pub use tensor::{IndexExpr, Tape, TensorValue, ValueId};
pub use trace::{Proxy, Session, TraceOptions, Tracer};
pub use validate::{scan, validate, ShapeSpec, ShapeTable};
