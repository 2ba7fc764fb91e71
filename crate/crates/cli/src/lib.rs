//! Configuration parsing and experiment commands behind the `tc3l` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Process exit code for an error: 1 for configuration and usage problems,
/// 2 for failures while running.
pub fn exit_code(err: &tc3l_core::Error) -> i32 {
    match err {
        tc3l_core::Error::InvalidConfig(_) | tc3l_core::Error::Parse { .. } => 1,
        _ => 2,
    }
}
