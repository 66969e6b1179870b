//! Scenario runner, oracles, bounded checker and offline verifier.

pub mod checker;
pub mod report;
pub mod run;
pub mod scenario;
pub mod verify;

pub use report::{Outcome, RunReport};
pub use run::{run, RunError, RunOutcome};
pub use scenario::{Scenario, ScenarioError};
