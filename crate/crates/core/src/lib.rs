pub mod domain;
pub mod gateway;
pub mod memory;
pub mod metrics;
pub mod planner;
pub mod prompts;
pub mod router;
pub mod historian;
pub mod orchestrator;
pub mod simulator;
pub mod fixtures;
pub mod eval;
