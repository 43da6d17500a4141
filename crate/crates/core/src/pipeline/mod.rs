//! End-to-end runs: attack, trigger reverse, detection, attribution,
//! pruning and fine-tuning, driven by one TOML config.

mod commands;
mod config;
mod stages;

pub use commands::*;
pub use config::*;
pub use stages::*;
