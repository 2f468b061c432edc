pub mod approximator;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod figures;
pub mod game;
pub mod market;
pub mod nash_model;
pub mod oracles;
pub mod trainer;

pub use error::{Error, Result};
