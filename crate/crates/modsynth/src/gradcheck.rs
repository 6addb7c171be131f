//! Finite-difference audit of every continuous parameter of a chain.
//!
//! Each parameter is checked at random points of the chain's parameter
//! space on an L2 spectrogram loss of the output. The target of each point
//! is the point itself with the audited parameter moved slightly.
//! Steps are scaled per parameter and shrunk until the central difference
//! stays on one smooth branch of every waveform and envelope.
//! Parameters that reach the output through a square wave's phase only have
//! a surrogate gradient, and some points sit so close to a saw wrap, square
//! edge or envelope boundary that no step avoids crossing it. Both are
//! reported separately as exempt and never fail.

use std::collections::BTreeSet;

use modsynth_core::autodiff::{finite_difference_check_with, FdMethod};
use modsynth_core::chain::{generate_signal, param_id, ChainSpec, ParameterAssignment};
use modsynth_core::autodiff::{DiffBuffer, DiffScalar};
use modsynth_core::losses::{LossConfig, Norm};
use modsynth_core::modules::{envelope_segment, phase_branches, ModuleKind, ParamKind, Scale, Waveform};
use modsynth_core::signal::Signal;
use modsynth_core::spectral::{self, ProcessingKind};
use modsynth_core::rng::{self, Rng};
use modsynth_core::{dataset, CellAddress, RenderConfig, Result, Tape};

/// Relative error above which a smooth parameter fails.
pub const TOLERANCE: f64 = 1e-3;
/// Window of the audit loss.
pub const WINDOW: usize = 512;
/// Draws allowed per requested point when looking for non-exempt points.
const MAX_DRAWS_PER_POINT: usize = 20;
/// Step reductions tried before a point counts as crossing a discontinuity.
const MAX_STEP_SHRINKS: usize = 6;
/// Offset separating target streams from point streams.
const TARGET_STREAMS: u64 = 1 << 48;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub id: String,
    pub module: ModuleKind,
    /// Points checked with an exact gradient.
    pub points: usize,
    pub max_relative_error: f64,
    /// Points skipped because the gradient is a surrogate there.
    pub exempt_points: usize,
    /// Largest relative error seen at exempt points.
    pub exempt_max_relative_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self, wanted: usize) -> bool {
        self.points >= wanted && self.max_relative_error < TOLERANCE
    }
}

/// Cells whose parameters reach the output only through a square wave's
/// phase at `assignment`.
pub fn surrogate_cells(
    chain: &ChainSpec,
    a: &ParameterAssignment<f64>,
    config: &RenderConfig,
) -> BTreeSet<(CellAddress, &'static str)> {
    let mut out = BTreeSet::new();
    let square = |addr: CellAddress| {
        a.cells.get(&addr).and_then(|c| c.label("waveform").ok()) == Some(Waveform::Square.label())
    };
    for (addr, kind) in chain.modules() {
        match kind {
            ModuleKind::Oscillator if square(addr) => {
                out.insert((addr, "freq"));
            }
            ModuleKind::FmOscillator if square(addr) => {
                out.insert((addr, "freq_c"));
                out.insert((addr, "mod_index"));
                let mut stack = vec![addr];
                while let Some(cell) = stack.pop() {
                    for i in chain.incoming(cell) {
                        if a.connections[i] {
                            let from = chain.connections[i].from;
                            if let Some(Some(k)) = chain.cell(from) {
                                for spec in k.catalog(config) {
                                    out.insert((from, spec.name));
                                }
                            }
                            stack.push(from);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Initial central-difference step before extrapolation. Phase parameters
/// move the phase at the end of the render by 1e-2 cycles; others move by
/// 1e-4 of their scale. The step never leaves the parameter range.
fn initial_step(name: &str, scale: Scale, value: f64, lo: f64, hi: f64, config: &RenderConfig) -> f64 {
    let h = match (name, scale) {
        ("freq" | "freq_c" | "mod_index", _) => 1e-4 / config.duration,
        (_, Scale::Log) => 1e-4 * value,
        (_, Scale::Segment) => 1e-4 * config.grid_duration(),
        _ => 1e-4 * (hi - lo),
    };
    h.min((value - lo) / 2.0).min((hi - value) / 2.0)
}

/// Branch of every piecewise definition at every sample: saw wraps, square
/// sign changes and envelope segments, plus the signs of the real STFT bins
/// whose magnitude the loss takes. Equal signatures at both ends of a step
/// mean the loss is smooth in between.
fn branch_signature(chain: &ChainSpec, a: &ParameterAssignment<f64>, config: &RenderConfig) -> Result<Vec<i64>> {
    let tape = Tape::new();
    let trace = generate_signal(&tape, chain, &a.bind_constants(&tape), config)?;
    let times = config.times();
    let total = config.grid_duration();
    let mut out = Vec::new();
    for (addr, kind) in chain.modules() {
        let c = a.cell(addr)?;
        let modulator = chain
            .incoming(addr)
            .into_iter()
            .find(|&i| a.connections[i])
            .and_then(|i| trace.cell(chain.connections[i].from));
        let branches = match kind {
            ModuleKind::Oscillator if c.switch("active")? => {
                let w = Waveform::from_label(c.label("waveform")?)?;
                phase_branches(w, c.continuous("freq")?, None, config)
            }
            ModuleKind::FmOscillator => {
                let fm = match modulator {
                    Some(m) if c.switch("fm_active")? => Some((c.continuous("mod_index")?, m.values())),
                    _ => None,
                };
                let w = Waveform::from_label(c.label("waveform")?)?;
                phase_branches(w, c.continuous("freq_c")?, fm, config)
            }
            ModuleKind::AmplitudeAdsr => {
                let (at, d, r) = (c.continuous("attack")?, c.continuous("decay")?, c.continuous("release")?);
                out.extend(times.iter().map(|&t| envelope_segment(t, at, d, r, total) as i64));
                continue;
            }
            _ => continue,
        };
        out.extend(branches);
    }
    let signs = spectral::real_bin_signs(trace.output.values(), WINDOW, WINDOW / 4)?;
    out.extend(signs.into_iter().map(i64::from));
    Ok(out)
}

/// Largest step, from `h` down by factors of ten, whose central difference
/// stays on one branch at every sample: the point and both ends of the step
/// share one signature. `None` when every candidate
/// crosses.
fn smooth_step(
    chain: &ChainSpec,
    base: &ParameterAssignment<f64>,
    id: &str,
    x: f64,
    mut h: f64,
    config: &RenderConfig,
) -> Result<Option<f64>> {
    let centre = branch_signature(chain, base, config)?;
    for _ in 0..MAX_STEP_SHRINKS {
        let mut lo = base.clone();
        lo.set_value(id, x - h)?;
        let mut hi = base.clone();
        hi.set_value(id, x + h)?;
        if branch_signature(chain, &lo, config)? == centre && branch_signature(chain, &hi, config)? == centre {
            return Ok(Some(h));
        }
        h /= 10.0;
    }
    Ok(None)
}

fn segment_slack(a: &ParameterAssignment<f64>, addr: CellAddress, config: &RenderConfig) -> f64 {
    let c = &a.cells[&addr];
    let used: f64 = ["attack", "decay", "release"].iter().filter_map(|n| c.continuous(n).ok()).sum();
    config.grid_duration() - used
}

/// L2 spectrogram distance of the output to a target, divided by the
/// target's spectral norm so that the absolute floor of the relative error
/// sits at a fixed fraction of the loss scale. It is evaluated relative to
/// its value at a base point as
/// `(L − L₀) = Σ (S − S₀)(S + S₀ − 2T) / (L + L₀)`, which has the same
/// gradient as `L` but whose central difference does not cancel two large,
/// nearly equal losses.
struct ShiftedLoss {
    loss: LossConfig,
    target: Vec<f64>,
    /// `S₀ − 2T`.
    offset: Vec<f64>,
    base_spectrum: Vec<f64>,
    base_loss: f64,
    scale: f64,
}

impl ShiftedLoss {
    fn spectrum<'t>(loss: &LossConfig, output: &Signal<'t>) -> Result<DiffBuffer<'t>> {
        let spec = loss.transform.apply(output, WINDOW)?;
        Ok(spectral::process_with(&spec, ProcessingKind::Identity, loss.cumsum_normalize).values)
    }

    fn new(loss: &LossConfig, target: Vec<f64>, s0: Vec<f64>) -> Self {
        let base_loss = s0.iter().zip(&target).map(|(s, t)| (s - t) * (s - t)).sum::<f64>().sqrt();
        let norm = target.iter().map(|t| t * t).sum::<f64>().sqrt();
        Self {
            loss: loss.clone(),
            offset: s0.iter().zip(&target).map(|(s, t)| s - 2.0 * t).collect(),
            target,
            base_spectrum: s0,
            base_loss,
            scale: if norm > 0.0 { 1.0 / norm } else { 1.0 },
        }
    }

    fn eval<'t>(&self, output: &Signal<'t>) -> Result<DiffScalar<'t>> {
        let tape = output.samples().tape();
        let s = Self::spectrum(&self.loss, output)?;
        let diff = s.sub(&tape.constant_buffer(self.base_spectrum.clone()));
        let sum = s.add(&tape.constant_buffer(self.offset.clone()));
        let l = s.sub(&tape.constant_buffer(self.target.clone())).l2_norm();
        if self.base_loss == 0.0 {
            // The parameter does not reach the output here.
            return Ok(l * self.scale);
        }
        Ok(diff.mul(&sum).sum().checked_div(l + self.base_loss)? * self.scale)
    }
}

fn render_spectrum(
    loss: &LossConfig,
    chain: &ChainSpec,
    a: &ParameterAssignment<f64>,
    config: &RenderConfig,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let out = generate_signal(&tape, chain, &a.bind_constants(&tape), config)?.output;
    Ok(ShiftedLoss::spectrum(loss, &out)?.values().to_vec())
}

/// Target value of the audited parameter: a small random move away from
/// `x` inside `[lo, hi]`, so that the loss depends on the parameter.
/// Audio frequencies move by a few hertz, within one analysis bin.
fn nearby_value(rng: &mut Rng, kind: ModuleKind, name: &str, scale: Scale, x: f64, lo: f64, hi: f64) -> f64 {
    let audio_freq = matches!(kind, ModuleKind::Oscillator | ModuleKind::FmOscillator) && name.starts_with("freq");
    let delta = if audio_freq {
        rng::uniform(rng, 2.0, 10.0)
    } else if scale == Scale::Log {
        x * (rng::uniform(rng, 0.05, 0.25).exp2() - 1.0)
    } else {
        rng::uniform(rng, 0.02, 0.1) * (hi - lo)
    };
    let (up, down) = (x + delta, x - delta);
    match (rng::coin(rng), up <= hi, down >= lo) {
        (true, true, _) | (false, true, false) => up,
        (_, _, true) => down,
        _ => if hi - x > x - lo { hi } else { lo },
    }
}

/// Audits every continuous parameter of `chain` at `points` random points.
pub fn gradcheck_chain(chain: &ChainSpec, config: &RenderConfig, points: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    chain.ensure_valid()?;
    let loss = LossConfig::output_only(WINDOW, ProcessingKind::Identity, Norm::L2);

    let mut rows = Vec::new();
    for (p_index, (addr, spec)) in chain.continuous_parameters(config).into_iter().enumerate() {
        let ParamKind::Continuous { lo, hi, scale } = spec.kind else { continue };
        let kind = chain.cell(addr).flatten().expect("module cell");
        let id = param_id(addr, spec.name);
        let mut row = GradcheckRow {
            id: id.clone(),
            module: kind,
            points: 0,
            max_relative_error: 0.0,
            exempt_points: 0,
            exempt_max_relative_error: 0.0,
        };
        let mut draw = 0u64;
        while row.points < points && (draw as usize) < points * MAX_DRAWS_PER_POINT {
            draw += 1;
            let stream = 1 + (p_index as u64) * 1_000_000 + draw;
            let base = dataset::sample_assignment(chain, config, &mut rng::stream(seed, stream));
            let x = base.value(&id)?;
            let hi = if scale == Scale::Segment { x + segment_slack(&base, addr, config) } else { hi };
            let h = initial_step(spec.name, scale, x, lo, hi, config);
            let smooth = smooth_step(chain, &base, &id, x, h, config)?;
            let exempt = smooth.is_none() || surrogate_cells(chain, &base, config).contains(&(addr, spec.name));
            if exempt && row.exempt_points >= points {
                continue;
            }
            let h = smooth.unwrap_or(h);
            let mut target = base.clone();
            let mut target_rng = rng::stream(seed, TARGET_STREAMS + stream);
            target.set_value(&id, nearby_value(&mut target_rng, kind, spec.name, scale, x, lo, hi))?;
            let shifted = ShiftedLoss::new(
                &loss,
                render_spectrum(&loss, chain, &target, config)?,
                render_spectrum(&loss, chain, &base, config)?,
            );
            let report = finite_difference_check_with(
                |t, v| {
                    let bound = base.bind_with(|a, n, value| {
                        Ok(if a == addr && n == spec.name { v[0] } else { t.constant(value) })
                    })?;
                    shifted.eval(&generate_signal(t, chain, &bound, config)?.output)
                },
                &[x],
                &[h],
                FdMethod::Ridders,
            )?;
            let err = report.max_relative_error;
            let e = &report.entries[0];
            log::debug!("{id} draw {draw}{}: x={x:e} h={h:e} ad={:e} fd={:e} rel={err:e}", if exempt { " (exempt)" } else { "" }, e.autodiff, e.finite_difference);
            if exempt {
                row.exempt_points += 1;
                row.exempt_max_relative_error = row.exempt_max_relative_error.max(err);
            } else {
                row.points += 1;
                row.max_relative_error = row.max_relative_error.max(err);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}
