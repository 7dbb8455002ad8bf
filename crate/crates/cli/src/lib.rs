//! Experiment harness around the core library: strict JSON configuration,
//! dataset and history file formats, bit-exact checkpoints, and the
//! subcommand implementations behind the `fedabml` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;
