//! Branchable, replayable multi-agent commodity market simulation.
//!
//! Researchers inject world events into a timeline (including at past
//! ticks, which forks), clone timelines at any tick, and compare two
//! branches as they diverge.

pub mod agents;
pub mod branchstore;
pub mod canonical;
pub mod compare;
pub mod engine;
pub mod fixed;
pub mod lab;
pub mod model;
pub mod rng;
pub mod scenario;

pub use canonical::{Digest32, FORMAT_VERSION};
pub use fixed::{Fixed, Price};
pub use model::*;
