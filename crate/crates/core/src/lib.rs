pub mod agents;
pub mod convlab;
pub mod coopt;
pub mod dist;
pub mod envgen;
pub mod error;
pub mod library;
pub mod lowlevel;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
