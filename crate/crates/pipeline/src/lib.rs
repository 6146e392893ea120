//! Post-hoc correction runs: configuration, orchestration, sweeps and
//! reports on top of `poc-core` and `poc-client`.

pub mod config;
pub mod report;
pub mod run;
pub mod sweep;
pub mod synth;

pub use config::{ConfigError, RunConfig};
pub use run::{run, AnswerRecord, RunOutcome, RunStats};
