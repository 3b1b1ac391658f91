//! Files, providers and the command line around `trident-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod io;
pub mod pipeline;
pub mod providers;
