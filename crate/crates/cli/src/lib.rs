//! Library side of the `noisnn` command-line tool.

pub mod commands;
pub mod experiments;
pub mod report;
