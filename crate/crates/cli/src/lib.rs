//! Library side of the `lrf` command-line tool.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for runtime and numerical failures.
pub const EXIT_RUNTIME: i32 = 3;

/// A problem with the invocation or configuration rather than the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps an error chain to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<lrf_core::Error>() {
            return match e {
                lrf_core::Error::Config(_) | lrf_core::Error::Generation(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}
