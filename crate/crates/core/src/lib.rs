//! Thread-state metric collection and performance-degradation diagnosis.
//!
//! Events from kernel probes (or a recorded trace) are folded into per-second
//! thread and thread-to-resource metrics, persisted in a single-file store,
//! and analyzed by tracing dependency chains between threads that share
//! futexes, pipes and sockets.

pub mod analyzer;
pub mod collector;
pub mod engine;
pub mod error;
pub mod graph;
pub mod model;
pub mod scenario;
pub mod store;
pub mod trace;

pub use error::{AnalyzerError, CollectorError, EngineError, ModelError, StoreError, TraceError, WireError};
