//! Magnitude spectrograms, mel spectrograms and spectrogram processing.
//!
//! Spectrograms are stored row-major as `frames × bins`: row `f` is one
//! analysis frame, column `b` one frequency bin (or mel band).

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::autodiff::{Axis, DiffBuffer};
use crate::error::{Error, Result};
use crate::fft::{Complex, Fft};
use crate::signal::Signal;

/// Floor added before taking logarithms of magnitudes.
pub const LOG_FLOOR: f64 = 1e-5;

/// Default number of mel bands.
pub const DEFAULT_MELS: usize = 128;

/// Supported analysis window sizes.
pub const WINDOW_SIZES: [usize; 4] = [256, 512, 1024, 2048];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyScale {
    Linear,
    Mel,
}

/// Time-frequency representation applied to a signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Transform {
    Spectrogram,
    Mel,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Spectrogram => "spectrogram",
            Transform::Mel => "mel",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "spectrogram" | "stft" | "linear" => Some(Transform::Spectrogram),
            "mel" => Some(Transform::Mel),
            _ => None,
        }
    }

    pub fn apply<'t>(self, signal: &Signal<'t>, window_size: usize) -> Result<Spectrogram<'t>> {
        let hop = window_size / 4;
        match self {
            Transform::Spectrogram => stft_magnitude(signal, window_size, hop),
            Transform::Mel => mel_spectrogram(signal, window_size, hop, DEFAULT_MELS),
        }
    }
}

/// Elementwise post-processing of a spectrogram before differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProcessingKind {
    Identity,
    Log,
    /// Running sum along time, per frequency bin.
    CumsumTime,
    /// Running sum along frequency, per frame.
    CumsumFreq,
}

impl ProcessingKind {
    pub const ALL: [ProcessingKind; 4] = [
        ProcessingKind::Identity,
        ProcessingKind::Log,
        ProcessingKind::CumsumTime,
        ProcessingKind::CumsumFreq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProcessingKind::Identity => "identity",
            ProcessingKind::Log => "log",
            ProcessingKind::CumsumTime => "cumsum-time",
            ProcessingKind::CumsumFreq => "cumsum-freq",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
pub struct Spectrogram<'t> {
    pub values: DiffBuffer<'t>,
    pub frames: usize,
    pub bins: usize,
    pub window_size: usize,
    pub hop: usize,
    pub scale: FrequencyScale,
    /// Sample rate of the analysed signal.
    pub sample_rate: u32,
}

impl<'t> Spectrogram<'t> {
    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values.values()[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.values.values()[frame * self.bins..(frame + 1) * self.bins]
    }

    fn with_values(&self, values: DiffBuffer<'t>) -> Self {
        Self { values, ..self.clone() }
    }
}

/// Number of frames produced for a signal of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

fn check_window(len: usize, window_size: usize, hop: usize) -> Result<()> {
    if !window_size.is_power_of_two() || window_size < 4 {
        return Err(Error::Config(alloc::format!("window size {window_size} must be a power of two")));
    }
    if hop == 0 {
        return Err(Error::Config("hop must be positive".into()));
    }
    if window_size > len {
        return Err(Error::Config(alloc::format!(
            "window size {window_size} is longer than the signal ({len} samples)"
        )));
    }
    Ok(())
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64)).collect()
}

/// Index into the signal for padded position `j` with reflect padding of
/// `pad` samples on both sides.
fn reflect(j: usize, pad: usize, len: usize) -> usize {
    let i = j as isize - pad as isize;
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r as usize
}

/// Signs of the DC and Nyquist bins of every frame of the magnitude STFT
/// of `x`. Those bins are real, so their magnitude has a kink wherever one
/// of them changes sign.
pub fn real_bin_signs(x: &[f64], window_size: usize, hop: usize) -> Result<Vec<i8>> {
    let len = x.len();
    check_window(len, window_size, hop)?;
    let pad = window_size / 2;
    if pad >= len {
        return Err(Error::Config("signal too short for reflect padding".into()));
    }
    let window = hann(window_size);
    let sign = |v: f64| (v > 0.0) as i8 - (v < 0.0) as i8;
    let mut out = Vec::with_capacity(2 * frame_count(len, hop));
    for f in 0..frame_count(len, hop) {
        let (mut dc, mut nyquist) = (0.0, 0.0);
        for (n, w) in window.iter().enumerate() {
            let v = w * x[reflect(f * hop + n, pad, len)];
            dc += v;
            nyquist += if n % 2 == 0 { v } else { -v };
        }
        out.push(sign(dc));
        out.push(sign(nyquist));
    }
    Ok(out)
}

/// Hann-windowed, reflect-centred magnitude STFT.
pub fn stft_magnitude<'t>(signal: &Signal<'t>, window_size: usize, hop: usize) -> Result<Spectrogram<'t>> {
    let x = signal.samples().shared_values();
    let len = x.len();
    check_window(len, window_size, hop)?;
    let pad = window_size / 2;
    if pad >= len {
        return Err(Error::Config("signal too short for reflect padding".into()));
    }
    let frames = frame_count(len, hop);
    let bins = window_size / 2 + 1;
    let window: Arc<[f64]> = hann(window_size).into();
    let fft = Arc::new(Fft::new(window_size));
    let mut mags = vec![0.0; frames * bins];
    let mut spectra = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); window_size];
    for f in 0..frames {
        for (n, b) in buf.iter_mut().enumerate() {
            let idx = reflect(f * hop + n, pad, len);
            *b = Complex::new(window[n] * x[idx], 0.0);
        }
        fft.process(&mut buf, false);
        for k in 0..bins {
            mags[f * bins + k] = buf[k].norm();
            spectra.push(buf[k]);
        }
    }
    let node = signal.samples().node();
    let values = signal.samples().tape().custom_buffer(mags.clone(), node.is_some(), move |g, adj| {
        let Some(node) = node else { return };
        let slot = adj.slot(node);
        let mut z = vec![Complex::new(0.0, 0.0); window_size];
        for f in 0..frames {
            z.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let mut any = false;
            for k in 0..bins {
                let gk = g[f * bins + k];
                let m = mags[f * bins + k];
                if gk != 0.0 && m > 0.0 {
                    let s = spectra[f * bins + k];
                    z[k] = Complex::new(gk * s.re / m, gk * s.im / m);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            fft.process(&mut z, true);
            for n in 0..window_size {
                let idx = reflect(f * hop + n, pad, len);
                slot[idx] += window[n] * z[n].re;
            }
        }
    });
    Ok(Spectrogram {
        values,
        frames,
        bins,
        window_size,
        hop,
        scale: FrequencyScale::Linear,
        sample_rate: signal.sample_rate(),
    })
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = libm::log(6.4) / 27.0;
    if hz >= min_log_hz {
        min_log_mel + libm::log(hz / min_log_hz) / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = libm::log(6.4) / 27.0;
    if mel >= min_log_mel {
        min_log_hz * libm::exp(logstep * (mel - min_log_mel))
    } else {
        f_sp * mel
    }
}

/// Sparse row of a mel filterbank: weights for bins `start..start + len`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilter {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Triangular mel filterbank from 0 Hz to Nyquist with area normalisation.
pub fn mel_filterbank(sample_rate: u32, window_size: usize, n_mels: usize) -> Vec<MelFilter> {
    let sr = sample_rate as f64;
    let bins = window_size / 2 + 1;
    let mel_max = hz_to_mel(sr / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * sr / window_size as f64).collect();
    (0..n_mels)
        .map(|m| {
            let (lo, centre, hi) = (points[m], points[m + 1], points[m + 2]);
            let norm = 2.0 / (hi - lo);
            let row: Vec<f64> = freqs
                .iter()
                .map(|&f| {
                    let up = (f - lo) / (centre - lo);
                    let down = (hi - f) / (hi - centre);
                    up.min(down).max(0.0) * norm
                })
                .collect();
            let start = row.iter().position(|w| *w > 0.0).unwrap_or(0);
            let end = row.iter().rposition(|w| *w > 0.0).map_or(start, |e| e + 1);
            MelFilter {
                start,
                weights: row[start..end].to_vec(),
            }
        })
        .collect()
}

/// Mel spectrogram computed from a linear magnitude spectrogram.
pub fn mel_from_stft<'t>(spec: &Spectrogram<'t>, n_mels: usize) -> Result<Spectrogram<'t>> {
    if spec.scale != FrequencyScale::Linear {
        return Err(Error::Usage("mel projection needs a linear spectrogram".into()));
    }
    if n_mels == 0 || n_mels >= spec.bins {
        return Err(Error::Config(alloc::format!(
            "{n_mels} mel bands need more than {} frequency bins",
            spec.bins
        )));
    }
    let bank = Arc::new(mel_filterbank(spec.sample_rate, spec.window_size, n_mels));
    let (frames, bins) = (spec.frames, spec.bins);
    let input = spec.values.shared_values();
    let mut out = vec![0.0; frames * n_mels];
    for f in 0..frames {
        let row = &input[f * bins..(f + 1) * bins];
        for (m, filt) in bank.iter().enumerate() {
            out[f * n_mels + m] = filt.weights.iter().zip(&row[filt.start..]).map(|(w, x)| w * x).sum();
        }
    }
    let node = spec.values.node();
    let values = spec.values.tape().custom_buffer(out, node.is_some(), move |g, adj| {
        let Some(node) = node else { return };
        let slot = adj.slot(node);
        for f in 0..frames {
            for (m, filt) in bank.iter().enumerate() {
                let gm = g[f * n_mels + m];
                if gm == 0.0 {
                    continue;
                }
                for (i, w) in filt.weights.iter().enumerate() {
                    slot[f * bins + filt.start + i] += gm * w;
                }
            }
        }
    });
    Ok(Spectrogram {
        values,
        bins: n_mels,
        scale: FrequencyScale::Mel,
        ..spec.clone()
    })
}

/// Mel spectrogram of a signal.
pub fn mel_spectrogram<'t>(signal: &Signal<'t>, window_size: usize, hop: usize, n_mels: usize) -> Result<Spectrogram<'t>> {
    mel_from_stft(&stft_magnitude(signal, window_size, hop)?, n_mels)
}

/// Applies a processing function.
pub fn process<'t>(spec: &Spectrogram<'t>, kind: ProcessingKind) -> Spectrogram<'t> {
    process_with(spec, kind, false)
}

/// Applies a processing function; with `normalize`, cumulative sums run over
/// unit-mass distributions (each bin's time series or each frame's spectrum
/// divided by its total).
pub fn process_with<'t>(spec: &Spectrogram<'t>, kind: ProcessingKind, normalize: bool) -> Spectrogram<'t> {
    let (rows, cols) = (spec.frames, spec.bins);
    match kind {
        ProcessingKind::Identity => spec.clone(),
        ProcessingKind::Log => spec.with_values(spec.values.map(|m| libm::log(m + LOG_FLOOR), |m| 1.0 / (m + LOG_FLOOR))),
        ProcessingKind::CumsumTime | ProcessingKind::CumsumFreq => {
            let axis = if kind == ProcessingKind::CumsumTime { Axis::Cols } else { Axis::Rows };
            let base = if normalize {
                normalize_mass(&spec.values, rows, cols, axis)
            } else {
                spec.values.clone()
            };
            spec.with_values(base.cumsum_matrix(rows, cols, axis))
        }
    }
}

/// Divides each line along `axis` by its sum; all-zero lines stay zero.
fn normalize_mass<'t>(x: &DiffBuffer<'t>, rows: usize, cols: usize, axis: Axis) -> DiffBuffer<'t> {
    let v = x.shared_values();
    let (lines, line_len) = match axis {
        Axis::Rows => (rows, cols),
        Axis::Cols => (cols, rows),
    };
    let at = move |line: usize, i: usize| match axis {
        Axis::Rows => line * cols + i,
        Axis::Cols => i * cols + line,
    };
    let sums: Vec<f64> = (0..lines).map(|l| (0..line_len).map(|i| v[at(l, i)]).sum()).collect();
    let mut out = vec![0.0; v.len()];
    for l in 0..lines {
        if sums[l] > 0.0 {
            for i in 0..line_len {
                out[at(l, i)] = v[at(l, i)] / sums[l];
            }
        }
    }
    let node = x.node();
    let y: Arc<[f64]> = out.clone().into();
    x.tape().custom_buffer(out, node.is_some(), move |g, adj| {
        let Some(node) = node else { return };
        let slot = adj.slot(node);
        for l in 0..lines {
            let s = sums[l];
            if s <= 0.0 {
                continue;
            }
            let gy: f64 = (0..line_len).map(|i| g[at(l, i)] * y[at(l, i)]).sum();
            for i in 0..line_len {
                slot[at(l, i)] += (g[at(l, i)] - gy) / s;
            }
        }
    })
}
