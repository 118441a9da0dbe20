pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod lora;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod split;
pub mod synth;
pub mod train;
pub mod vit;
pub mod weights;
pub mod zoo;

pub use error::{Error, Result};
pub use exec::Exec;
