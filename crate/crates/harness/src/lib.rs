//! Device-fleet simulator and acceptance trials for the openm2m gateway.

pub mod gen;
pub mod oracle;
pub mod scenario;
pub mod sim;
pub mod trials;

pub use scenario::{Scenario, ScenarioError};
pub use sim::{run_scenario, HarnessError, RunReport};
