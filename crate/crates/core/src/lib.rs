//! Content- and task-aware all-in-one image restoration.

pub mod backbone;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod costmodel;
pub mod degrade;
mod dwconv;
pub mod error;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod spatial;
pub mod training;

pub use backbone::{CatAir, ForwardOutput, InitOptions};
pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, Task};
pub use error::{Error, Result};
pub use spatial::{RouterDecision, Routing};
