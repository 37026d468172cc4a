//! Command-line orchestration of the idiom embedding pipeline.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{compare_runs, run_command, run_pipeline, Command, Run};
pub use config::{resolve, Overrides, RunConfig};
pub use manifest::{ArtifactKind, ArtifactRecord, RunManifest};

use idiomkit_core::{Error, ErrorKind};

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Validation => 1,
        ErrorKind::Integrity => 2,
        ErrorKind::UpstreamMissing => 3,
        ErrorKind::Other => 1,
    }
}
