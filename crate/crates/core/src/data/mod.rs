//! Dataset records, the synthetic benchmark, and checkpoint files.

pub mod checkpoint;
mod records;
pub mod world;

use std::path::PathBuf;

use thiserror::Error;

pub use records::{
    load_dataset, save_dataset, AnnotationRecord, LineError, Loaded, RecordPayload, Scale,
    MAX_MALFORMED_FRACTION,
};
pub use world::{
    gen_synthetic, read_decoder, read_oracle, AnnotatorProfile, Benchmark, Counts, Decoder,
    OracleEntry, OracleWeights, SyntheticWorld, WorldConfig,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {bad} of {total} lines malformed (first at line {}: {})", first.line, first.message)]
    TooManyMalformed { path: PathBuf, bad: usize, total: usize, first: LineError },
    #[error("{0} is an oracle file and cannot be used as training data")]
    OracleFile(PathBuf),
    #[error("{0} is not an oracle file")]
    NotOracle(PathBuf),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash {got} does not match expected {want}")]
    HashMismatch { want: String, got: String },
}
