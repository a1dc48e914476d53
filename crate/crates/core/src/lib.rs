//! Per-layer per-head vision-token KV-cache pruning in a toy multimodal decoder.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`rng`]: dense `f64` kernels and the seeded generator.
//! * [`layout`]: interleaved text/image sequences and their index sets.
//! * [`model`], [`cache`]: a decoder-only transformer whose heads own
//!   independent KV caches, with a hook that runs after each prefilled layer.
//! * [`pruning`]: the layer-adaptive, head-wise vision-token pruner.
//! * [`baselines`]: FastV- and VTW-style coarse pruners.
//! * [`metrics`]: retention rate, KV fraction, decode latency.
//! * [`trace`]: the `PLPT` attention-trace format and offline replay.
//! * [`config`], [`experiment`]: the experiment runner used by the CLI.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod baselines;
pub mod cache;
pub mod config;
pub mod experiment;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use cache::{DecoderState, HeadKVCache};
pub use config::{ExperimentConfig, Method};
pub use layout::{Layout, MultimodalSequence, SegmentKind, SegmentSpec};
pub use metrics::MetricsReport;
pub use model::{ModelConfig, ModelWeights, PruningHook, ToyLvlm};
pub use pruning::{LayerClass, LayerDecision, Plphp, PruningConfig};
pub use tensor::Matrix;
pub use trace::AttentionTrace;

/// Exit codes used by the command-line front end.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const INTERNAL: i32 = 4;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace file {path}: {source}")]
    TraceFile {
        path: PathBuf,
        #[source]
        source: trace::TraceError,
    },
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Prune(#[from] pruning::PruneError),
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report serialization: {0}")]
    Csv(#[from] csv::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn trace_at(path: &Path, source: trace::TraceError) -> Self {
        Error::TraceFile {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for bad configuration, 3 for unreadable/unwritable or malformed
    /// files, 4 for anything that indicates a broken invariant.
    pub fn exit_code(&self) -> i32 {
        use model::ModelError as M;
        use pruning::PruneError as P;
        match self {
            Error::Config(_) => exit::CONFIG,
            Error::Model(M::InvalidConfig(_) | M::SequenceTooLong { .. }) => exit::CONFIG,
            Error::Model(M::Hook {
                source: P::InvalidConfig(_),
                ..
            }) => exit::CONFIG,
            Error::Prune(P::InvalidConfig(_)) => exit::CONFIG,
            Error::Io { .. } | Error::TraceFile { .. } => exit::IO,
            Error::Csv(e) if e.is_io_error() => exit::IO,
            _ => exit::INTERNAL,
        }
    }
}
