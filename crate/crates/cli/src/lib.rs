//! Configuration, checkpoints and subcommands behind the `fusenav` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;

use fusenav::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

/// Process exit status for an error: configuration problems are usage
/// errors, unreadable or malformed files are I/O errors, and anything raised
/// while computing is a check failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Dimension(_) | Error::Numeric(_) | Error::Contract(_) => EXIT_CHECK,
    }
}
