//! Multi-resolution vision transformer over a world-coordinate frame.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`graph`], [`optim`], [`gradcheck`] — dense tensors with
//!   reverse-mode autodiff, AdamW, and a finite-difference oracle.
//! * [`geometry`] — world-coordinate bounding boxes, nested crop sampling,
//!   patch-center coordinates and geometric augmentation.
//! * [`pyramid`] — chunked on-disk multi-resolution image store.
//! * [`synthgen`] — procedural concentric-ring benchmark generator.
//! * [`rope`], [`encoder`] — 2D world-coordinate rotary embeddings and the
//!   multi-resolution transformer encoder.
//! * [`mae`], [`seg`] — masked-autoencoder pretraining and UNETR-style
//!   segmentation fine-tuning / tiled inference.
//! * [`evalkit`] — Dice, ROC-AUC, linear probing, robustness sweeps and
//!   runtime benchmarks.
//! * [`ckpt`], [`config`], [`trainer`] — checkpoints, run configuration and
//!   shared training-loop machinery.

pub mod ckpt;
pub mod config;
pub mod encoder;
pub mod evalkit;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod mae;
pub mod optim;
pub mod pyramid;
pub mod rope;
pub mod scalar;
pub mod seg;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

mod fastmath;
pub mod rng;

pub use graph::{Graph, NodeId, Param};
pub use scalar::Scalar;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Msg(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Number of worker threads, capped by the `MUVIT_THREADS` environment
/// variable. Used to size the global rayon pool on first call.
pub fn thread_count() -> usize {
    static N: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *N.get_or_init(|| {
        let n = std::env::var("MUVIT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            });
        // Build the global pool once with the capped size; later installs are no-ops.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        n
    })
}

pub const FORMAT_VERSION: u32 = 1;
