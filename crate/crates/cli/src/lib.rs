//! Command-line front end: run specifications, commands, plots and tables.

pub mod commands;
pub mod config;
pub mod report;

use cxrtl_core::Error;

/// Exit status for a failed command: 1 for invalid input or configuration,
/// 2 for failures while running.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::Validation(_)
                | Error::Parse(_)
                | Error::UnsupportedFormat(_)
                | Error::EmptyClass(_)
                | Error::DegenerateStats { .. }
                | Error::LengthMismatch { .. }
                | Error::Weights { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 1;
        }
    }
    2
}
