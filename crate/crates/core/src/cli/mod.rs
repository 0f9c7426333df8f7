mod commands;
mod config;
mod synthetic;

pub use commands::{exit_code, run, Command, EXIT_CONFIG, EXIT_INPUT, EXIT_OK, EXIT_STALE, EXIT_VERDICT};
pub use config::RunConfig;
pub use synthetic::{generate_synthetic, SyntheticSpec};
