//! Configuration-driven runner: executes noise optimization runs, writes
//! metrics, noise files and a hashed manifest, draws plots and analyzes
//! finished runs.

pub mod analyze;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod noise_file;
pub mod plot;
pub mod run;
