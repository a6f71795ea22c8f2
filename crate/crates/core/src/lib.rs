//! Core engine for the NeRF pipeline service: penalty-scored scheduling,
//! a simulated node fleet, blob and metadata storage, and the orchestrator
//! that ties them into an end-to-end workflow.

pub mod clock;
pub mod config;
pub mod fleet;
pub mod metadata;
pub mod orchestrator;
pub mod scenario;
pub mod scheduler;
pub mod storage;

#[cfg(any(test, feature = "testkit"))]
pub mod oracle;

pub use clock::{Clock, ClockMode, SimDuration, SimTime};
pub use orchestrator::{Orchestrator, OrchestratorConfig, OrchestratorError};
