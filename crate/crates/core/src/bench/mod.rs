//! Run, compare and verify harness behind the `distzo` binary.

mod compare;
mod config;
mod run;
mod verify;

pub use compare::{compare, compare_reports, COMPARE_COLUMNS};
pub use config::{RunConfig, TopologySpec};
pub use run::{median, run, steps_jsonl, RunOutput, RunReport, REPORT_FILE, STEPS_FILE, TIMELINE_FILE, WARMUP_STEPS};
pub use verify::{verify, PropertyResult, Status, VerifyFaults, VerifyReport, VERIFY_MAX_PARAMS};
