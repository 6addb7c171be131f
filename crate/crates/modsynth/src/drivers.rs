//! Parallel drivers. Each work item owns its own tape; results are merged
//! in a fixed order, so output does not depend on the thread count.

use modsynth_core::chain::{parse_param_id, ChainSpec, ParameterAssignment};
use modsynth_core::experiments::{
    self, count_local_minima, BenchmarkRow, Distance, LossVariant, SweepResult,
};
use modsynth_core::losses::LossConfig;
use modsynth_core::matcher::{MatchResult, Matcher};
use modsynth_core::modules::{ParamKind, Scale, Waveform};
use modsynth_core::{Error, RenderConfig, Result};
use rayon::prelude::*;

/// Runs `f` on a pool of `jobs` threads, or on the global pool when `None`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
    }
}

/// Runs every (branch, restart) trial in parallel and merges them.
pub fn run_match(matcher: &Matcher) -> Result<MatchResult> {
    let trials = (0..matcher.trial_count())
        .into_par_iter()
        .map(|i| matcher.run_trial_index(i))
        .collect::<Result<Vec<_>>>()?;
    matcher.merge(trials)
}

/// Sweep grid of `points` values for parameter `id` containing its value in
/// `target`. Log-scaled parameters get a log grid of up to `octaves` on each
/// side of the truth, clipped to the parameter range; others span their
/// whole range. Envelope segments stop where the segments would overrun
/// the render.
pub fn sweep_grid(
    chain: &ChainSpec,
    config: &RenderConfig,
    target: &ParameterAssignment<f64>,
    id: &str,
    points: usize,
    octaves: f64,
) -> Result<Vec<f64>> {
    if points < 3 {
        return Err(Error::Usage("a sweep needs at least 3 points".into()));
    }
    let (address, name) = parse_param_id(id).ok_or_else(|| Error::Usage(format!("malformed parameter id `{id}`")))?;
    let kind = chain
        .cell(address)
        .flatten()
        .ok_or_else(|| Error::Usage(format!("cell {address} holds no module")))?;
    let spec = kind
        .catalog(config)
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Usage(format!("{kind} has no parameter `{name}`")))?;
    let ParamKind::Continuous { lo, mut hi, scale } = spec.kind else {
        return Err(Error::Usage(format!("`{id}` is categorical")));
    };
    if name == "cutoff" {
        hi = hi.min(config.nyquist());
    }
    let truth = target.value(id)?;
    Ok(match scale {
        Scale::Log => {
            let room = (hi / truth).log2().min((truth / lo).log2());
            experiments::log_grid_centered(truth, octaves.min(room * 0.999), points)
        }
        Scale::Linear => experiments::linear_grid_with(lo, hi, points, truth),
        Scale::Segment => {
            let cell = target.cell(address)?;
            let others: f64 = ["attack", "decay", "release"]
                .iter()
                .filter(|n| **n != name)
                .map(|n| cell.continuous(n))
                .sum::<Result<f64>>()?;
            experiments::linear_grid_with(0.0, config.grid_duration() - others, points, truth)
        }
    })
}

/// Parallel counterpart of [`experiments::loss_surface_sweep`].
pub fn sweep(
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
    let prepared = experiments::prepare_sweep(chain, target, loss, config)?;
    let losses = grid
        .par_iter()
        .map(|&v| experiments::sweep_point(chain, target, param, v, &prepared, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        param: param.into(),
        grid: grid.to_vec(),
        local_minima: count_local_minima(&losses),
        losses,
    })
}

/// Parallel counterpart of [`experiments::benchmark_rows`]. Success counts
/// are integers, so the reduction order does not matter.
pub fn benchmark(
    waveform: Waveform,
    distance: Distance,
    variants: &[LossVariant],
    trials: u64,
    seed: u64,
    config: &RenderConfig,
) -> Result<Vec<BenchmarkRow>> {
    let zero = || vec![0u64; variants.len()];
    let wins = (0..trials)
        .into_par_iter()
        .map(|i| {
            experiments::perturbation_trials(waveform, distance, variants, seed, i, config)
                .map(|t| t.iter().map(|t| t.success as u64).collect::<Vec<_>>())
        })
        .try_reduce(zero, |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect()))?;
    Ok(experiments::rows_from_wins(waveform, distance, variants, trials, &wins))
}
