//! Loss-surface sweeps and the perturbation (gradient-direction) benchmark.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::chain::{generate_signal, ChainSpec, ParameterAssignment, RenderTrace};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Norm, PreparedTarget};
use crate::modules::{oscillator_wave, Waveform};
use crate::rng;
use crate::signal::{RenderConfig, Signal};
use crate::spectral::{self, ProcessingKind, Spectrogram, Transform};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub param: String,
    pub grid: Vec<f64>,
    pub losses: Vec<f64>,
    pub local_minima: usize,
}

impl SweepResult {
    /// Index of the smallest loss (first on ties).
    pub fn argmin(&self) -> usize {
        (0..self.losses.len())
            .min_by(|&a, &b| self.losses[a].total_cmp(&self.losses[b]))
            .unwrap_or(0)
    }
}

/// Interior grid points whose loss is strictly below both neighbours.
pub fn count_local_minima(losses: &[f64]) -> usize {
    losses.windows(3).filter(|w| w[1] < w[0] && w[1] < w[2]).count()
}

/// `n` log-spaced points spanning `octaves` on each side of `centre`, with
/// `centre` itself at index `n / 2`.
pub fn log_grid_centered(centre: f64, octaves: f64, n: usize) -> Vec<f64> {
    let c = (n / 2) as f64;
    let half = c.max(1.0);
    (0..n)
        .map(|i| {
            if i == n / 2 {
                centre
            } else {
                centre * libm::exp2(octaves * (i as f64 - c) / half)
            }
        })
        .collect()
}

/// `n` evenly spaced points on `[lo, hi]` with the point nearest `truth`
/// replaced by `truth`.
pub fn linear_grid_with(lo: f64, hi: f64, n: usize, truth: f64) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    let mut grid: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    let nearest = libm::round((truth - lo) / step).clamp(0.0, (n - 1) as f64) as usize;
    grid[nearest] = truth;
    grid
}

/// Loss of each grid value of `param` against the target rendered from
/// `target`, all other parameters held at their target values.
pub fn loss_surface_sweep(
    chain: &ChainSpec,
    target: &ParameterAssignment<f64>,
    param: &str,
    grid: &[f64],
    loss: &LossConfig,
    config: &RenderConfig,
) -> Result<SweepResult> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Usage("sweep grid must be strictly increasing".into()));
    }
    target.value(param)?;
    let tape = Tape::new();
    let target_trace = generate_signal(&tape, chain, &target.bind_constants(&tape), config)?;
    let prepared = PreparedTarget::new(chain, &target_trace, loss)?;
    let losses = grid
        .iter()
        .map(|&v| sweep_point(chain, target, param, v, &prepared, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        param: param.into(),
        grid: grid.to_vec(),
        local_minima: count_local_minima(&losses),
        losses,
    })
}

/// Loss at one sweep value.
pub fn sweep_point(
    chain: &ChainSpec,
    target: &ParameterAssignment<f64>,
    param: &str,
    value: f64,
    prepared: &PreparedTarget,
    config: &RenderConfig,
) -> Result<f64> {
    let mut a = target.clone();
    a.set_value(param, value)?;
    let tape = Tape::new();
    let trace = generate_signal(&tape, chain, &a.bind_constants(&tape), config)?;
    Ok(prepared.loss(&trace)?.value())
}

/// Prepared target for [`sweep_point`].
pub fn prepare_sweep(
    chain: &ChainSpec,
    target: &ParameterAssignment<f64>,
    loss: &LossConfig,
    config: &RenderConfig,
) -> Result<PreparedTarget> {
    let tape = Tape::new();
    let trace: RenderTrace<'_> = generate_signal(&tape, chain, &target.bind_constants(&tape), config)?;
    PreparedTarget::new(chain, &trace, loss)
}

/// Column of the perturbation benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distance {
    /// A one-cent perturbation around an arbitrary prediction.
    Epsilon,
    Cents(f64),
}

impl Distance {
    pub fn label(&self) -> String {
        match self {
            Distance::Epsilon => "epsilon".into(),
            Distance::Cents(c) => alloc::format!("{c}"),
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "epsilon" | "eps" => Some(Distance::Epsilon),
            t => t.parse::<f64>().ok().filter(|c| *c >= 0.0 && c.is_finite()).map(Distance::Cents),
        }
    }
}

/// Size of the epsilon perturbation, in cents.
pub const EPSILON_CENTS: f64 = 1.0;
/// Target frequency range of the benchmark.
pub const BENCH_FREQ_RANGE: (f64, f64) = (80.0, 2000.0);
/// Window of the benchmark loss.
pub const BENCH_WINDOW: usize = 1024;
/// Oscillator amplitude used for every benchmark signal.
pub const BENCH_AMPLITUDE: f64 = 0.5;

/// One row of the benchmark table: a transform and processing function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossVariant {
    pub transform: Transform,
    pub processing: ProcessingKind,
}

impl LossVariant {
    /// The six variants: {spectrogram, mel} × {identity, cumsum-time, cumsum-freq}.
    pub fn table() -> Vec<LossVariant> {
        let mut out = Vec::new();
        for transform in [Transform::Spectrogram, Transform::Mel] {
            for processing in [ProcessingKind::Identity, ProcessingKind::CumsumTime, ProcessingKind::CumsumFreq] {
                out.push(LossVariant { transform, processing });
            }
        }
        out
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            transform: self.transform,
            ..LossConfig::output_only(BENCH_WINDOW, self.processing, Norm::L1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbTrial {
    pub target: f64,
    pub prediction: f64,
    pub perturbed: f64,
    pub loss_prediction: f64,
    pub loss_perturbed: f64,
    pub success: bool,
}

/// Frequencies of trial `index`: (target, prediction, perturbed).
///
/// For cent distances `D` the perturbation sits `D` cents from the target
/// and the prediction `D/2` cents from it, with independent random signs.
/// For the epsilon column the prediction is drawn like a target,
/// independently of it, and the perturbation is one cent from the
/// prediction.
pub fn trial_frequencies(distance: Distance, seed: u64, index: u64) -> (f64, f64, f64) {
    let mut r = rng::stream(seed, index);
    let (lo, hi) = BENCH_FREQ_RANGE;
    let target = rng::log_uniform(&mut r, lo, hi);
    match distance {
        Distance::Cents(d) => {
            let sp = rng::sign(&mut r);
            let sq = rng::sign(&mut r);
            let perturbed = target * libm::exp2(sp * d / 1200.0);
            let prediction = target * libm::exp2(sq * d / 2.0 / 1200.0);
            (target, prediction, perturbed)
        }
        Distance::Epsilon => {
            let prediction = rng::log_uniform(&mut r, lo, hi);
            let sp = rng::sign(&mut r);
            (target, prediction, prediction * libm::exp2(sp * EPSILON_CENTS / 1200.0))
        }
    }
}

fn bench_signal<'t>(tape: &'t Tape, waveform: Waveform, freq: f64, config: &RenderConfig) -> Signal<'t> {
    oscillator_wave(waveform, tape.constant(BENCH_AMPLITUDE), tape.constant(freq), config)
}

fn variant_distance(a: &Spectrogram<'_>, b: &Spectrogram<'_>, processing: ProcessingKind) -> f64 {
    let pa = spectral::process(a, processing);
    let pb = spectral::process(b, processing);
    pa.values.values().iter().zip(pb.values.values()).map(|(x, y)| libm::fabs(x - y)).sum()
}

/// Trial `index` scored under every variant, sharing the spectrograms.
pub fn perturbation_trials(
    waveform: Waveform,
    distance: Distance,
    variants: &[LossVariant],
    seed: u64,
    index: u64,
    config: &RenderConfig,
) -> Result<Vec<PerturbTrial>> {
    let (target, prediction, perturbed) = trial_frequencies(distance, seed, index);
    let tape = Tape::new();
    let hop = BENCH_WINDOW / 4;
    let stft = |f: f64| spectral::stft_magnitude(&bench_signal(&tape, waveform, f, config), BENCH_WINDOW, hop);
    let lin = [stft(target)?, stft(prediction)?, stft(perturbed)?];
    let needs_mel = variants.iter().any(|v| v.transform == Transform::Mel);
    let mel = if needs_mel {
        Some(
            lin.iter()
                .map(|s| spectral::mel_from_stft(s, spectral::DEFAULT_MELS))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(variants
        .iter()
        .map(|v| {
            let s: &[Spectrogram<'_>] = match v.transform {
                Transform::Spectrogram => &lin,
                Transform::Mel => mel.as_deref().expect("mel computed"),
            };
            let loss_prediction = variant_distance(&s[1], &s[0], v.processing);
            let loss_perturbed = variant_distance(&s[2], &s[0], v.processing);
            PerturbTrial {
                target,
                prediction,
                perturbed,
                loss_prediction,
                loss_perturbed,
                success: loss_prediction < loss_perturbed,
            }
        })
        .collect())
}

/// Fraction of `trials` where the prediction scores below the perturbation.
pub fn perturbation_benchmark(
    waveform: Waveform,
    distance: Distance,
    variant: LossVariant,
    trials: u64,
    seed: u64,
    config: &RenderConfig,
) -> Result<f64> {
    let mut wins = 0u64;
    for i in 0..trials {
        wins += perturbation_trials(waveform, distance, &[variant], seed, i, config)?[0].success as u64;
    }
    Ok(accuracy(wins, trials))
}

pub fn accuracy(wins: u64, trials: u64) -> f64 {
    if trials == 0 {
        0.0
    } else {
        wins as f64 / trials as f64
    }
}

/// One row of the benchmark output.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub waveform: Waveform,
    pub variant: LossVariant,
    pub distance: Distance,
    pub trials: u64,
    pub accuracy: f64,
}

/// Every variant at one (waveform, distance), trials run sequentially.
pub fn benchmark_rows(
    waveform: Waveform,
    distance: Distance,
    variants: &[LossVariant],
    trials: u64,
    seed: u64,
    config: &RenderConfig,
) -> Result<Vec<BenchmarkRow>> {
    let mut wins = alloc::vec![0u64; variants.len()];
    for i in 0..trials {
        for (w, t) in wins.iter_mut().zip(perturbation_trials(waveform, distance, variants, seed, i, config)?) {
            *w += t.success as u64;
        }
    }
    Ok(rows_from_wins(waveform, distance, variants, trials, &wins))
}

/// Assembles rows from per-variant success counts.
pub fn rows_from_wins(
    waveform: Waveform,
    distance: Distance,
    variants: &[LossVariant],
    trials: u64,
    wins: &[u64],
) -> Vec<BenchmarkRow> {
    variants
        .iter()
        .zip(wins)
        .map(|(v, w)| BenchmarkRow {
            waveform,
            variant: *v,
            distance,
            trials,
            accuracy: accuracy(*w, trials),
        })
        .collect()
}
