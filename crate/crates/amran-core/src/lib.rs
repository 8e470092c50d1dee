//! AMRAN: attributed multi-relational attention network for fact-checking URL
//! recommendation on implicit feedback.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`dataset`]: ingestion, attribute schemas, leave-one-out splits, and
//!   negative-sampled training batches
//! - [`graph`]: co-occurrence statistics, SPPMI / TF-IDF edge weights, the
//!   weighted heterogeneous adjacency, and neighbor selection
//! - [`numeric`]: tensors, reverse-mode differentiation, Adam, checkpoints
//! - [`csan`]: convolutional spatial attention over neighbor streams
//! - [`hgan`]: stacked heterogeneous graph attention with gated residuals
//! - [`model`]: the interaction layer, loss, and training loop
//! - [`eval`]: leave-one-out top-K ranking metrics over repeated runs
//! - [`report`]: artifact emission (reports, logs, attention dumps)



pub mod dataset;
pub mod error;

pub mod graph;


pub mod numeric;



pub use error::{Error, Result};

/// Cap worker parallelism. Reads the requested thread count (usually from the
/// `AMRAN_THREADS` environment variable) and installs it as the global rayon
/// pool; call before any parallel work. Returns quietly if a pool exists.
pub fn init_thread_pool(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
