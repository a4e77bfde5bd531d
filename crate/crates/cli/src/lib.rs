//! Experiment orchestration for hyper-representation studies.

pub mod commands;
pub mod config;
pub mod run;
pub mod svg;

use wsl_core::WslError;

use crate::run::RunError;

/// Process exit code for an error chain: 2 for configuration problems, 3 for
/// missing upstream artifacts, 4 for numerical failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<WslError>() {
            return match e {
                WslError::Config(_) | WslError::Json(_) => 2,
                WslError::Numerical(_) => 4,
                _ => 1,
            };
        }
        if let Some(RunError::MissingArtifact { .. }) = cause.downcast_ref::<RunError>() {
            return 3;
        }
    }
    1
}
