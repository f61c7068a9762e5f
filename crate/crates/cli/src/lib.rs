//! Command line front end: flag parsing merged with the JSON config file,
//! and a mock service host for exercising the HTTP path without real models.

pub mod args;
pub mod serve;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const ERROR: i32 = 1;
    pub const USAGE: i32 = 2;
    /// The run finished but some images failed.
    pub const PARTIAL: i32 = 3;
}
