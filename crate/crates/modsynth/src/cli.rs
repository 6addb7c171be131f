//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 input or validation error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use modsynth_core::chain::{generate_signal, ChainSpec, ParameterAssignment};
use modsynth_core::experiments::{Distance, LossVariant};
use modsynth_core::losses::{CellSelection, LossConfig, Norm, ParameterTarget};
use modsynth_core::matcher::{MatchProblem, MatchResult, Matcher, OptimizerConfig};
use modsynth_core::modules::Waveform;
use modsynth_core::spectral::{ProcessingKind, Transform};
use modsynth_core::{dataset as core_dataset, rng, RenderConfig, Tape};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckRow};
use crate::params::{assignment_to_string, parse_assignment, AssignmentJson};
use crate::{csv, dataset, drivers, wav};

#[derive(Debug, Parser)]
#[command(name = "modsynth", version, about = "Differentiable modular synthesizer")]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log more (repeat for trace output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Log warnings and errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn log_level(&self) -> &'static str {
        match (self.quiet, self.verbose) {
            (true, _) => "warn",
            (false, 0) => "info",
            (false, 1) => "debug",
            _ => "trace",
        }
    }
}

#[derive(Debug, Args, Clone, Copy)]
pub struct RenderArgs {
    /// Sample rate in Hz.
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    /// Duration in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
}

impl RenderArgs {
    fn config(&self) -> Result<RenderConfig> {
        Ok(RenderConfig::new(self.sample_rate, self.duration)?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a chain to a WAV file.
    Render {
        /// Chain file.
        chain: PathBuf,
        /// Output WAV file.
        out: PathBuf,
        /// Parameter assignment (JSON).
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        params: Option<PathBuf>,
        /// Sample a random assignment instead of reading one.
        #[arg(long)]
        random: bool,
        /// Seed of the random assignment.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving every cell's signal as `cell_{ch}_{ly}.wav`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write the assignment used as JSON.
        #[arg(long)]
        save_params: Option<PathBuf>,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Generate a dataset of random sounds from a chain.
    Dataset {
        /// Chain file.
        chain: PathBuf,
        /// Output directory.
        out: PathBuf,
        /// Number of sounds.
        #[arg(long)]
        n: u64,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Match a target sound by optimising a chain's parameters.
    Match {
        /// Target WAV file.
        target: PathBuf,
        /// Chain file.
        chain: PathBuf,
        /// Run configuration file.
        config: Option<PathBuf>,
        /// Output directory for `result.json` and `match.wav`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss of one parameter swept over a grid around its true value.
    Sweep {
        /// Chain file.
        #[arg(long)]
        chain: PathBuf,
        /// Parameter id such as `0,1.freq_c`.
        #[arg(long)]
        param: String,
        /// Number of grid points.
        #[arg(long, default_value_t = 500)]
        points: usize,
        /// Ground-truth assignment (JSON); random when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Seed of the random ground truth.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Octaves on each side of the truth for frequency parameters.
        #[arg(long, default_value_t = 2.0)]
        octaves: f64,
        /// STFT window length (power of two).
        #[arg(long, default_value_t = 1024)]
        window: usize,
        /// identity, log, cumsum-time or cumsum-freq.
        #[arg(long, default_value = "identity")]
        processing: String,
        /// spectrogram or mel.
        #[arg(long, default_value = "spectrogram")]
        transform: String,
        /// l1 or l2.
        #[arg(long, default_value = "l1")]
        norm: String,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Perturbation benchmark of the spectral loss variants.
    Bench {
        /// square or saw; both when absent.
        #[arg(long)]
        waveform: Vec<String>,
        /// epsilon or a distance in cents; epsilon, 300 and 600 when absent.
        #[arg(long)]
        distance: Vec<String>,
        /// Processing functions; all three table rows when absent.
        #[arg(long)]
        processing: Vec<String>,
        /// spectrogram or mel; both when absent.
        #[arg(long)]
        transform: Vec<String>,
        /// Trials per table cell.
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare autodiff gradients with finite differences.
    Gradcheck {
        /// Chain file.
        #[arg(long)]
        chain: PathBuf,
        /// Random points per parameter.
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Seed of the sampled points.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        render: RenderArgs,
    },
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let jobs = cli.jobs;
    match drivers::with_jobs(jobs, || execute(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads, parses and validates a chain file.
pub fn load_chain(path: &Path) -> Result<(ChainSpec, String)> {
    let text = read_text(path)?;
    let chain = ChainSpec::parse(&text).map_err(|e| Error::format(path, e.to_string()))?;
    chain.ensure_valid().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((chain, text))
}

fn warn_aliasing(chain: &ChainSpec, config: &RenderConfig) {
    if let Some(w) = chain.aliasing_warning(config) {
        log::warn!("{w}");
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Render {
            chain,
            out,
            params,
            random,
            seed,
            trace,
            save_params,
            render,
        } => {
            let config = render.config()?;
            let (chain, _) = load_chain(&chain)?;
            warn_aliasing(&chain, &config);
            let assignment = match (params, random) {
                (Some(p), _) => parse_assignment(&read_text(&p)?, &chain, &config).map_err(|e| Error::format(&p, e.to_string()))?,
                (None, _) => core_dataset::sample_assignment(&chain, &config, &mut rng::seeded(seed)),
            };
            cmd_render(&chain, &config, &assignment, &out, trace.as_deref())?;
            if let Some(p) = save_params {
                fs::write(&p, assignment_to_string(&assignment)).map_err(|e| Error::io(&p, e))?;
            }
            Ok(0)
        }
        Command::Dataset {
            chain: path,
            out,
            n,
            seed,
            render,
        } => {
            let config = render.config()?;
            let (chain, text) = load_chain(&path)?;
            warn_aliasing(&chain, &config);
            let started = Instant::now();
            dataset::generate_dataset(&chain, &text, &config, n, seed, &out)?;
            log::info!("wrote {n} sounds to {} in {:.2?}", out.display(), started.elapsed());
            Ok(0)
        }
        Command::Match {
            target,
            chain,
            config,
            out,
        } => {
            let run = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let (chain, _) = load_chain(&chain)?;
            let out = out.or(run.paths.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            cmd_match(&chain, &target, &run, &out)?;
            Ok(0)
        }
        Command::Sweep {
            chain,
            param,
            points,
            params,
            seed,
            octaves,
            window,
            processing,
            transform,
            norm,
            out,
            render,
        } => {
            let config = render.config()?;
            let (chain, _) = load_chain(&chain)?;
            let target = match params {
                Some(p) => parse_assignment(&read_text(&p)?, &chain, &config).map_err(|e| Error::format(&p, e.to_string()))?,
                None => core_dataset::sample_assignment(&chain, &config, &mut rng::seeded(seed)),
            };
            let loss = LossConfig {
                transform: parse_transform(&transform)?,
                ..LossConfig::output_only(window, parse_processing(&processing)?, parse_norm(&norm)?)
            };
            let grid = drivers::sweep_grid(&chain, &config, &target, &param, points, octaves)?;
            let result = drivers::sweep(&chain, &target, &param, &grid, &loss, &config)?;
            log::info!(
                "{param}: {} local minima, minimum {} at {}",
                result.local_minima,
                result.losses[result.argmin()],
                result.grid[result.argmin()]
            );
            csv::write_file(&out, &csv::sweep_csv(&result))?;
            Ok(0)
        }
        Command::Bench {
            waveform,
            distance,
            processing,
            transform,
            trials,
            seed,
            out,
        } => {
            let waveforms = if waveform.is_empty() {
                vec![Waveform::Square, Waveform::Saw]
            } else {
                waveform.iter().map(|w| Waveform::from_label(w).map_err(Error::from)).collect::<Result<_>>()?
            };
            let distances = if distance.is_empty() {
                vec![Distance::Epsilon, Distance::Cents(300.0), Distance::Cents(600.0)]
            } else {
                distance
                    .iter()
                    .map(|d| Distance::parse(d).ok_or_else(|| usage(format!("unknown distance `{d}`"))))
                    .collect::<Result<_>>()?
            };
            let processings: Vec<ProcessingKind> =
                processing.iter().map(|p| parse_processing(p)).collect::<Result<_>>()?;
            let transforms: Vec<Transform> = transform.iter().map(|t| parse_transform(t)).collect::<Result<_>>()?;
            let variants: Vec<LossVariant> = LossVariant::table()
                .into_iter()
                .filter(|v| processings.is_empty() || processings.contains(&v.processing))
                .filter(|v| transforms.is_empty() || transforms.contains(&v.transform))
                .collect();
            if variants.is_empty() {
                return Err(usage("no loss variant matches the filters".into()));
            }
            let config = RenderConfig::default();
            let mut rows = Vec::new();
            for &w in &waveforms {
                for &d in &distances {
                    rows.extend(drivers::benchmark(w, d, &variants, trials, seed, &config)?);
                }
            }
            csv::write_file(&out, &csv::bench_csv(&rows))?;
            Ok(0)
        }
        Command::Gradcheck {
            chain,
            points,
            seed,
            out,
            render,
        } => {
            let config = render.config()?;
            let (chain, _) = load_chain(&chain)?;
            let rows = gradcheck::gradcheck_chain(&chain, &config, points, seed)?;
            print!("{}", gradcheck_table(&rows));
            if let Some(p) = out {
                csv::write_file(&p, &gradcheck_csv(&rows))?;
            }
            let failed = rows.iter().filter(|r| !r.passed(points)).count();
            if failed > 0 {
                log::error!("{failed} parameter(s) exceed relative error {}", gradcheck::TOLERANCE);
                Ok(1)
            } else {
                Ok(0)
            }
        }
    }
}

fn usage(message: String) -> Error {
    Error::Core(modsynth_core::Error::Usage(message))
}

fn parse_processing(name: &str) -> Result<ProcessingKind> {
    ProcessingKind::from_name(name).ok_or_else(|| usage(format!("unknown processing `{name}`")))
}

fn parse_transform(name: &str) -> Result<Transform> {
    Transform::from_name(name).ok_or_else(|| usage(format!("unknown transform `{name}`")))
}

fn parse_norm(name: &str) -> Result<Norm> {
    match name {
        "l1" => Ok(Norm::L1),
        "l2" => Ok(Norm::L2),
        _ => Err(usage(format!("unknown norm `{name}`"))),
    }
}

/// Renders `assignment`, writing the output and optionally every cell.
pub fn cmd_render(
    chain: &ChainSpec,
    config: &RenderConfig,
    assignment: &ParameterAssignment<f64>,
    out: &Path,
    trace_dir: Option<&Path>,
) -> Result<()> {
    let tape = Tape::new();
    let trace = generate_signal(&tape, chain, &assignment.bind_constants(&tape), config)?;
    wav::write_wav(out, trace.output.values(), config.sample_rate)?;
    if let Some(dir) = trace_dir {
        create_dir(dir)?;
        for (address, signal) in &trace.cells {
            let path = dir.join(format!("cell_{}_{}.wav", address.channel, address.layer));
            wav::write_wav(&path, signal.values(), config.sample_rate)?;
        }
    }
    Ok(())
}

/// Matches the sound in `target` and writes `result.json` and `match.wav`
/// to `out`.
pub fn cmd_match(chain: &ChainSpec, target: &Path, run: &RunConfig, out: &Path) -> Result<MatchResult> {
    let audio = wav::read_wav(target)?;
    let config = RenderConfig::new(audio.sample_rate, audio.samples.len() as f64 / audio.sample_rate as f64)?;
    if config != run.render {
        log::info!(
            "render grid taken from the target: {} Hz, {} samples",
            config.sample_rate,
            audio.samples.len()
        );
    }
    warn_aliasing(chain, &config);
    let mut loss = run.loss.clone();
    // A WAV carries no intermediate signals, so the default falls back to the output.
    if run.paths.target_params.is_none() && !run.cells_explicit && loss.cells != CellSelection::OutputOnly {
        log::info!("no target parameters; using an output-only loss");
        loss.cells = CellSelection::OutputOnly;
    }
    let mut problem = MatchProblem::new(chain.clone(), config, loss, audio.samples);
    if let Some(p) = &run.paths.target_params {
        let truth = parse_assignment(&read_text(p)?, chain, &config).map_err(|e| Error::format(p, e.to_string()))?;
        problem.target_params = Some(ParameterTarget::new(truth));
    }
    problem.fixed = run.matching.fixed.clone();
    problem.labels = run.matching.labels.clone();
    problem.connections = run.matching.connections.clone();
    let opt: OptimizerConfig = run.optimizer.clone();
    let started = Instant::now();
    let matcher = Matcher::new(problem, opt)?;
    log::info!(
        "matching {} free parameters over {} trial(s)",
        matcher.layout().free_ids().len(),
        matcher.trial_count()
    );
    let result = drivers::run_match(&matcher)?;
    let wall = started.elapsed().as_secs_f64();
    create_dir(out)?;
    let samples = matcher.render(&result.best)?;
    wav::write_wav(&out.join("match.wav"), &samples, config.sample_rate)?;
    let path = out.join("result.json");
    let doc = match_json(&result, wall);
    fs::write(&path, serde_json::to_string_pretty(&doc).expect("json")).map_err(|e| Error::io(&path, e))?;
    log::info!(
        "best loss {:.6} (spectral {:.6}, LSD {:.4}) in {wall:.2} s",
        result.final_loss,
        result.final_spectral_loss,
        result.final_lsd
    );
    Ok(result)
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// JSON document describing a match result.
pub fn match_json(result: &MatchResult, wall_time_seconds: f64) -> serde_json::Value {
    let trials: Vec<_> = result
        .trials
        .iter()
        .map(|t| {
            json!({
                "branch": t.branch,
                "restart": t.restart,
                "final_loss": finite(t.final_loss),
                "diverged": t.diverged,
                "steps": t.trajectory.len(),
            })
        })
        .collect();
    json!({
        "params": AssignmentJson::from_assignment(&result.best),
        "best_branch": result.best_branch,
        "best_restart": result.best_restart,
        "final_loss": finite(result.final_loss),
        "final_spectral_loss": finite(result.final_spectral_loss),
        "final_lsd": finite(result.final_lsd),
        "trajectory": result.trajectory.iter().map(|x| finite(*x)).collect::<Vec<_>>(),
        "trials": trials,
        "wall_time_seconds": wall_time_seconds,
    })
}

pub fn gradcheck_table(rows: &[GradcheckRow]) -> String {
    let mut out = format!(
        "{:<16} {:<8} {:>6} {:>12} {:>7} {:>12}\n",
        "parameter", "module", "points", "max_rel_err", "exempt", "exempt_max"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:<8} {:>6} {:>12.3e} {:>7} {:>12.3e}\n",
            r.id,
            r.module.keyword(),
            r.points,
            r.max_relative_error,
            r.exempt_points,
            r.exempt_max_relative_error
        ));
    }
    out
}

pub fn gradcheck_csv(rows: &[GradcheckRow]) -> String {
    let mut out = String::from("parameter,module,points,max_relative_error,exempt_points,exempt_max_relative_error\n");
    for r in rows {
        out.push_str(&format!(
            "\"{}\",{},{},{},{},{}\n",
            r.id,
            r.module.keyword(),
            r.points,
            r.max_relative_error,
            r.exempt_points,
            r.exempt_max_relative_error
        ));
    }
    out
}
