//! File formats, parallel drivers and the `modsynth` command-line tool for
//! the [`modsynth_core`] synthesizer engine.

pub mod cli;
pub mod config;
pub mod csv;
pub mod dataset;
pub mod drivers;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod wav;

pub use error::{Error, Result};
