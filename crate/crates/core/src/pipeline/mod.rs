//! End-to-end assembly: synthetic data, backbone and head, training and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;

pub use config::Config;
pub use model::{Model, Network};
pub use synth::{synth_generate, Dataset};
