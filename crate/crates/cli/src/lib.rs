//! Pipeline orchestration for `longreg`: manifest ingestion, hash-gated
//! stages and provenance.

pub mod error;
pub mod hashing;
pub mod ingest;
pub mod pipeline;

pub use error::{PipelineError, Result};
pub use ingest::ingest_external_registrations;
pub use pipeline::{parse_stages, run_pipeline, Provenance, RunOptions, Stage, StageRecord, StageStatus};
