//! Differentiable modular synthesizer engine.
//!
//! Signal chains of classic synth modules (oscillators, LFOs, FM oscillators,
//! lowpass filters, amplitude envelopes, mixers, tremolo) are laid out on a
//! matrix of cells and rendered layer by layer. Every continuous parameter is
//! a [`autodiff::DiffScalar`], so spectral and parameter losses can be
//! differentiated with respect to the whole patch and minimised directly.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, parallel
//! drivers and the command-line tool live in the `modsynth` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod chain;
pub mod dataset;
pub mod error;
pub mod experiments;
mod fft;
pub mod losses;
pub mod matcher;
pub mod modules;
pub mod rng;
pub mod signal;
pub mod spectral;

pub use autodiff::{DiffBuffer, DiffScalar, GradientMap, Tape};
pub use chain::{CellAddress, ChainSpec, Connection, ConnectionKind, ParameterAssignment, RenderTrace};
pub use error::{Error, Result};
pub use modules::ModuleKind;
pub use signal::{RenderConfig, Signal};
