//! Driver for a compile → optimization report → chat model → test harness loop.
//!
//! A run measures the original source, then repeatedly sends the compiler's
//! missed-optimization remarks to a chat model, splices the returned code back
//! into the target region, and keeps whatever builds, passes the harness and
//! runs fastest.

pub mod cli;
pub mod config;
pub mod evaluator;
pub mod llm;
pub mod optreport;
pub mod orchestrator;
pub mod process;
pub mod reporting;
pub mod source;

pub use config::{load_config, Config};
pub use evaluator::EvalResult;
pub use orchestrator::{run_once, PromptKind, RunRecord};
pub use reporting::{aggregate, RunSummary};
