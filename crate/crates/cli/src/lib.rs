//! Command implementations behind the `spooftrace` binary.

pub mod commands;
