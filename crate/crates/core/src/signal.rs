//! Audio buffers and the shared sampling grid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{DiffBuffer, Tape};
use crate::error::{Error, Result};

/// Sampling grid shared by every signal of a render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub sample_rate: u32,
    /// Seconds.
    pub duration: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            duration: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn new(sample_rate: u32, duration: f64) -> Result<Self> {
        let cfg = Self {
            sample_rate,
            duration,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Config(format!("duration {} must be positive", self.duration)));
        }
        if self.num_samples() == 0 {
            return Err(Error::Config("render produces no samples".into()));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        libm::round(self.sample_rate as f64 * self.duration) as usize
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    /// Exact duration of the sample grid, `len / sample_rate`.
    pub fn grid_duration(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    /// Sample times `k / sample_rate`.
    pub fn times(&self) -> Vec<f64> {
        let sr = self.sample_rate as f64;
        (0..self.num_samples()).map(|k| k as f64 / sr).collect()
    }

    /// Warning text when `max_frequency` is above the Nyquist limit.
    pub fn aliasing_warning(&self, max_frequency: f64) -> Option<alloc::string::String> {
        ((self.sample_rate as f64) < 2.0 * max_frequency).then(|| {
            format!(
                "sample rate {} Hz is below twice the highest permitted oscillator frequency ({max_frequency} Hz); aliasing is possible",
                self.sample_rate
            )
        })
    }
}

/// A mono buffer of differentiable samples.
#[derive(Debug, Clone)]
pub struct Signal<'t> {
    samples: DiffBuffer<'t>,
    sample_rate: u32,
}

impl<'t> Signal<'t> {
    pub fn new(samples: DiffBuffer<'t>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(tape: &'t Tape, config: &RenderConfig) -> Self {
        Self::new(tape.constant_buffer(vec![0.0; config.num_samples()]), config.sample_rate)
    }

    pub fn from_values(tape: &'t Tape, values: Vec<f64>, sample_rate: u32) -> Self {
        Self::new(tape.constant_buffer(values), sample_rate)
    }

    pub fn samples(&self) -> &DiffBuffer<'t> {
        &self.samples
    }

    pub fn values(&self) -> &[f64] {
        self.samples.values()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(self.values())
    }

    pub fn map_samples(&self, f: impl FnOnce(&DiffBuffer<'t>) -> DiffBuffer<'t>) -> Self {
        Self::new(f(&self.samples), self.sample_rate)
    }

    /// Same samples without gradient tracking.
    pub fn detach(&self) -> Self {
        Self::new(self.samples.detach(), self.sample_rate)
    }
}

pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    libm::sqrt(values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_has_configured_length() {
        let tape = Tape::new();
        let s = Signal::zeros(&tape, &RenderConfig::default());
        assert_eq!(s.len(), 16_000);
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_times_are_exact() {
        let cfg = RenderConfig::new(4, 1.0).unwrap();
        assert_eq!(cfg.times(), vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn invalid_configs() {
        assert!(RenderConfig::new(0, 1.0).is_err());
        assert!(RenderConfig::new(16_000, 0.0).is_err());
        assert!(RenderConfig::default().aliasing_warning(20_000.0).is_some());
        assert!(RenderConfig::new(48_000, 1.0).unwrap().aliasing_warning(20_000.0).is_none());
    }
}
