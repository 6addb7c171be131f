//! Parameter loss, signal-chain spectral loss, their weighted combination and
//! the log-spectral distance metric.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{DiffBuffer, DiffScalar, Tape};
use crate::chain::{param_id, CellAddress, ChainSpec, ParameterAssignment, RenderTrace};
use crate::error::{Error, Result};
use crate::modules::{ParamKind, ParamValue};
use crate::signal::{RenderConfig, Signal};
use crate::spectral::{self, ProcessingKind, Spectrogram, Transform, LOG_FLOOR, WINDOW_SIZES};

/// Smoothing of hard categorical predictions inside the cross-entropy.
pub const CATEGORICAL_EPSILON: f64 = 1e-6;

/// A signal taken into the spectral loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SignalPoint {
    /// Final (channel-averaged) output.
    Output,
    Cell(CellAddress),
}

/// The set of signals compared by the signal-chain loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellSelection {
    /// Every non-empty cell.
    AllModules,
    /// The final output only.
    OutputOnly,
    Explicit(Vec<SignalPoint>),
}

impl CellSelection {
    pub fn points(&self, chain: &ChainSpec) -> Vec<SignalPoint> {
        match self {
            CellSelection::AllModules => chain.modules().into_iter().map(|(a, _)| SignalPoint::Cell(a)).collect(),
            CellSelection::OutputOnly => alloc::vec![SignalPoint::Output],
            CellSelection::Explicit(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionKind {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub cells: CellSelection,
    pub windows: Vec<usize>,
    pub processings: Vec<ProcessingKind>,
    pub norm: Norm,
    pub transform: Transform,
    pub beta: f64,
    pub regression: RegressionKind,
    pub cumsum_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cells: CellSelection::AllModules,
            windows: alloc::vec![512, 1024],
            processings: alloc::vec![ProcessingKind::Identity],
            norm: Norm::L1,
            transform: Transform::Spectrogram,
            beta: 1.0,
            regression: RegressionKind::L1,
            cumsum_normalize: false,
        }
    }
}

impl LossConfig {
    /// Output-only loss with one window and one processing function.
    pub fn output_only(window: usize, processing: ProcessingKind, norm: Norm) -> Self {
        Self {
            cells: CellSelection::OutputOnly,
            windows: alloc::vec![window],
            processings: alloc::vec![processing],
            norm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::Config("loss.windows must not be empty".into()));
        }
        if let Some(w) = self.windows.iter().find(|w| !WINDOW_SIZES.contains(w)) {
            return Err(Error::Config(format!("loss.windows: {w} is not one of 256, 512, 1024, 2048")));
        }
        if self.processings.is_empty() {
            return Err(Error::Config("loss.processings must not be empty".into()));
        }
        if matches!(&self.cells, CellSelection::Explicit(p) if p.is_empty()) {
            return Err(Error::Config("loss.cells must not be empty".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("loss.beta must be a non-negative number, got {}", self.beta)));
        }
        Ok(())
    }
}

fn norm_of<'t>(diff: &DiffBuffer<'t>, norm: Norm) -> DiffScalar<'t> {
    match norm {
        Norm::L1 => diff.l1_norm(),
        Norm::L2 => diff.l2_norm(),
    }
}

fn trace_signal<'a, 't>(trace: &'a RenderTrace<'t>, point: SignalPoint) -> Result<&'a Signal<'t>> {
    match point {
        SignalPoint::Output => Ok(&trace.output),
        SignalPoint::Cell(a) => trace
            .cell(a)
            .ok_or_else(|| Error::Config(format!("cell {a} is not in the render trace"))),
    }
}

/// `Σ_j Σ_k ‖F_k(S_j(x)) − F_k(S_j(y))‖_p` for one pair of signals.
pub fn spectral_distance<'t>(x: &Signal<'t>, y: &Signal<'t>, cfg: &LossConfig) -> Result<DiffScalar<'t>> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::Usage("signals differ in length".into()));
    }
    let tape = x.samples().tape();
    let mut total = tape.constant(0.0);
    for &window in &cfg.windows {
        let sx = cfg.transform.apply(x, window)?;
        let sy = cfg.transform.apply(y, window)?;
        for &kind in &cfg.processings {
            let px = spectral::process_with(&sx, kind, cfg.cumsum_normalize).values;
            let py = spectral::process_with(&sy, kind, cfg.cumsum_normalize).values;
            total = total + norm_of(&px.sub(&py), cfg.norm);
        }
    }
    Ok(total)
}

/// Signal-chain loss over the configured cells, windows and processings.
pub fn signal_chain_loss<'t>(
    chain: &ChainSpec,
    trace: &RenderTrace<'t>,
    target: &RenderTrace<'t>,
    cfg: &LossConfig,
) -> Result<DiffScalar<'t>> {
    let tape = trace.output.samples().tape();
    let mut total = tape.constant(0.0);
    for point in cfg.cells.points(chain) {
        total = total + spectral_distance(trace_signal(trace, point)?, trace_signal(target, point)?, cfg)?;
    }
    Ok(total)
}

/// Processed target spectrograms cached for repeated comparisons.
#[derive(Debug, Clone)]
pub struct PreparedTarget {
    cfg: LossConfig,
    /// One entry per (point, window, processing), in loop order.
    entries: Vec<(SignalPoint, Vec<f64>)>,
    len: usize,
}

impl PreparedTarget {
    /// Processes the target signals of every configured point once.
    pub fn new(chain: &ChainSpec, target: &RenderTrace<'_>, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let mut entries = Vec::new();
        for point in cfg.cells.points(chain) {
            let s = trace_signal(target, point)?;
            for &window in &cfg.windows {
                let spec = cfg.transform.apply(s, window)?;
                for &kind in &cfg.processings {
                    let p = spectral::process_with(&spec, kind, cfg.cumsum_normalize);
                    entries.push((point, p.values.values().to_vec()));
                }
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            entries,
            len: target.output.len(),
        })
    }

    /// Output-only target from a bare signal.
    pub fn from_output(target: &Signal<'_>, cfg: &LossConfig) -> Result<Self> {
        if cfg.cells != CellSelection::OutputOnly {
            return Err(Error::Config("a bare target signal supports only output-only losses".into()));
        }
        let trace = RenderTrace {
            cells: Default::default(),
            output: target.clone(),
        };
        Self::new(&ChainSpec::new("target"), &trace, cfg)
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    /// Signal-chain loss of `trace` against the cached target.
    pub fn loss<'t>(&self, trace: &RenderTrace<'t>) -> Result<DiffScalar<'t>> {
        if trace.output.len() != self.len {
            return Err(Error::Usage("prediction and target differ in length".into()));
        }
        let tape = trace.output.samples().tape();
        let mut total = tape.constant(0.0);
        let per_point = self.cfg.windows.len() * self.cfg.processings.len();
        for group in self.entries.chunks(per_point) {
            let s = trace_signal(trace, group[0].0)?;
            let mut targets = group.iter();
            for &window in &self.cfg.windows {
                let spec = self.cfg.transform.apply(s, window)?;
                for &kind in &self.cfg.processings {
                    let (_, target) = targets.next().expect("entry per window and processing");
                    let p = spectral::process_with(&spec, kind, self.cfg.cumsum_normalize).values;
                    let diff = p.sub(&tape.constant_buffer(target.clone()));
                    total = total + norm_of(&diff, self.cfg.norm);
                }
            }
        }
        Ok(total)
    }
}

/// Role of a parameter inside the parameter loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Regression,
    Categorical,
}

/// Ground-truth assignment against which predictions are scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTarget {
    pub assignment: ParameterAssignment<f64>,
}

/// One term of the parameter loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTerm {
    pub id: alloc::string::String,
    pub role: ParamRole,
    pub lo: f64,
    pub hi: f64,
    pub options: usize,
}

impl ParameterTarget {
    pub fn new(assignment: ParameterAssignment<f64>) -> Self {
        Self { assignment }
    }

    /// Regression and categorical terms, in chain order.
    pub fn terms(&self, chain: &ChainSpec, config: &RenderConfig) -> Vec<ParamTerm> {
        let mut out = Vec::new();
        for (address, kind) in chain.modules() {
            for spec in kind.catalog(config) {
                let id = param_id(address, spec.name);
                out.push(match spec.kind {
                    ParamKind::Continuous { lo, hi, .. } => ParamTerm {
                        id,
                        role: ParamRole::Regression,
                        lo,
                        hi,
                        options: 0,
                    },
                    ParamKind::Categorical { options } => ParamTerm {
                        id,
                        role: ParamRole::Categorical,
                        lo: 0.0,
                        hi: 0.0,
                        options: options.len(),
                    },
                });
            }
        }
        out
    }
}

/// Cross-entropy of a hard predicted label against a one-hot target, with
/// the prediction smoothed by [`CATEGORICAL_EPSILON`].
pub fn categorical_cross_entropy(same: bool, options: usize) -> f64 {
    let eps = CATEGORICAL_EPSILON;
    if same {
        -libm::log(1.0 - eps)
    } else {
        -libm::log(eps / (options.max(2) - 1) as f64)
    }
}

/// Regression terms on range-normalised values plus categorical
/// cross-entropy terms.
pub fn parameter_loss<'t>(
    tape: &'t Tape,
    chain: &ChainSpec,
    predicted: &ParameterAssignment<DiffScalar<'t>>,
    target: &ParameterTarget,
    regression: RegressionKind,
    config: &RenderConfig,
) -> Result<DiffScalar<'t>> {
    if !predicted.cells.keys().eq(target.assignment.cells.keys()) {
        return Err(Error::Usage("predicted and target assignments cover different cells".into()));
    }
    let mut total = tape.constant(0.0);
    for (address, kind) in chain.modules() {
        let p = predicted.cell(address).map_err(|_| Error::Usage(format!("no prediction for cell {address}")))?;
        let t = target.assignment.cell(address).map_err(|_| Error::Usage(format!("no target for cell {address}")))?;
        for spec in kind.catalog(config) {
            let mismatch = || Error::Usage(format!("parameter {} differs in shape", param_id(address, spec.name)));
            match (spec.kind, p.get(spec.name), t.get(spec.name)) {
                (ParamKind::Continuous { lo, hi, .. }, Some(ParamValue::Continuous(pv)), Some(ParamValue::Continuous(tv))) => {
                    let scale = 1.0 / (hi - lo);
                    let d = (*pv - *tv) * scale;
                    total = total
                        + match regression {
                            RegressionKind::L1 => d.abs(),
                            RegressionKind::L2 => d * d,
                        };
                }
                (ParamKind::Categorical { options }, Some(ParamValue::Label(pl)), Some(ParamValue::Label(tl))) => {
                    total = total + categorical_cross_entropy(pl == tl, options.len());
                }
                _ => return Err(mismatch()),
            }
        }
    }
    Ok(total)
}

/// `L_p + β·L_SC`.
pub fn combined_loss<'t>(param_part: DiffScalar<'t>, chain_part: DiffScalar<'t>, beta: f64) -> Result<DiffScalar<'t>> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    Ok(param_part + chain_part * beta)
}

/// Frobenius norm of the difference of log magnitude spectrograms.
pub fn log_spectral_distance(x: &[f64], y: &[f64], sample_rate: u32, window: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Usage("signals differ in length".into()));
    }
    let tape = Tape::new();
    let spec = |v: &[f64]| -> Result<Spectrogram<'_>> {
        spectral::stft_magnitude(&Signal::from_values(&tape, v.to_vec(), sample_rate), window, window / 4)
    };
    let (sx, sy) = (spec(x)?, spec(y)?);
    let sum: f64 = sx
        .values
        .values()
        .iter()
        .zip(sy.values.values())
        .map(|(a, b)| {
            let d = libm::log(a + LOG_FLOOR) - libm::log(b + LOG_FLOOR);
            d * d
        })
        .sum();
    Ok(libm::sqrt(sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::parse_chain_file;
    use crate::modules::{oscillator_wave, CellParams, Waveform, SWITCH, WAVEFORMS};

    fn osc_target(amp: f64, freq: f64) -> ParameterAssignment<f64> {
        let mut p = CellParams::new();
        p.set("amp", amp).set("freq", freq);
        p.set_label("waveform", "sine", WAVEFORMS).unwrap();
        p.set_label("active", "on", SWITCH).unwrap();
        let mut a = ParameterAssignment::new(Vec::new());
        a.cells.insert(CellAddress::new(0, 0), p);
        a
    }

    #[test]
    fn parameter_loss_arithmetic() {
        let chain = parse_chain_file("chain c\ncell 0 0 osc\n").unwrap();
        let config = RenderConfig::default();
        let tape = Tape::new();
        let target = ParameterTarget::new(osc_target(0.5, 440.0));
        let same = parameter_loss(&tape, &chain, &target.assignment.bind_constants(&tape), &target, RegressionKind::L1, &config)
            .unwrap();
        assert!((same.value() - 2.0 * -libm::log(1.0 - 1e-6)).abs() < 1e-15);
        let pred = osc_target(0.2, 440.0).bind_constants(&tape);
        let l1 = parameter_loss(&tape, &chain, &pred, &target, RegressionKind::L1, &config).unwrap();
        assert!((l1.value() - same.value() - 0.3).abs() < 1e-12);
        let fspan = 20_000.0 - 20.0;
        let pred = osc_target(0.4, 440.0 + 0.2 * fspan).bind_constants(&tape);
        let l2 = parameter_loss(&tape, &chain, &pred, &target, RegressionKind::L2, &config).unwrap();
        assert!((l2.value() - same.value() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_affine_in_beta() {
        let tape = Tape::new();
        let (lp, lsc) = (tape.constant(0.7), tape.constant(3.2));
        let at = |b| combined_loss(lp, lsc, b).unwrap().value();
        assert_eq!(at(0.0), 0.7);
        assert_eq!(combined_loss(tape.constant(0.0), lsc, 1.0).unwrap().value(), 3.2);
        assert!(((at(1.0) - at(0.0)) - 2.0 * (at(0.5) - at(0.0))).abs() < 1e-12);
        assert!(combined_loss(lp, lsc, -1.0).is_err());
    }

    #[test]
    fn lsd_scaling_closed_form() {
        let tape = Tape::new();
        let config = RenderConfig::default();
        let x = oscillator_wave(Waveform::Sine, tape.constant(0.5), tape.constant(500.0), &config);
        let mut rng = crate::rng::seeded(5);
        let noise: Vec<f64> = x.values().iter().map(|v| v + 0.05 * crate::rng::normal(&mut rng)).collect();
        let doubled: Vec<f64> = noise.iter().map(|v| 2.0 * v).collect();
        let lsd = log_spectral_distance(&doubled, &noise, 16_000, 1024).unwrap();
        let s = spectral::stft_magnitude(&Signal::from_values(&tape, noise.clone(), 16_000), 1024, 256).unwrap();
        let min = s.values.values().iter().copied().fold(f64::INFINITY, f64::min);
        let expected = libm::log(2.0) * libm::sqrt((s.bins * s.frames) as f64);
        let tol = 1e-3;
        assert!((lsd - expected).abs() < tol * expected, "{lsd} vs {expected}, min magnitude {min}");
        assert_eq!(log_spectral_distance(&noise, &noise, 16_000, 1024).unwrap(), 0.0);
        assert_eq!(
            log_spectral_distance(&noise, x.values(), 16_000, 1024).unwrap(),
            log_spectral_distance(x.values(), &noise, 16_000, 1024).unwrap()
        );
    }
}
