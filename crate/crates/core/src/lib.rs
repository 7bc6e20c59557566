//! Risk-aware test-time scaling for tool-using agents.
//!
//! Before committing an action to a real environment, an agent rehearses it
//! in a simulated copy, grades the rehearsal, and condenses what it learned
//! into a recommendation for the real execution.

pub mod backend;
pub mod baselines;
pub mod conversation;
pub mod datagen;
pub mod demo;
pub mod environment;
pub mod metrics;
pub mod orchestrator;
pub mod parser;
pub mod prompts;
pub mod simulator;
pub mod task;
pub mod transcript;
