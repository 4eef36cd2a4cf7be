//! Self-training distance metric learning with a learned basis for mining
//! pairs among unlabeled samples of unseen classes.

pub mod basis;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod report;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
