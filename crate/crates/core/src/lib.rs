//! Simulation, measurement and mitigation of popularity bias in multi-round
//! conversational recommenders.

pub mod checkpoint;
pub mod coldstart;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod recommender;
pub mod seed;
pub mod simulator;

pub use error::{Error, Result};
