//! Synthesizer modules.
//!
//! Each module is a pure differentiable function from its parameters (and
//! optional input signals) to one [`Signal`]. Waveforms use closed-form
//! expressions of the phase, so gradients with respect to amplitude,
//! frequency and modulation depth are exact except at waveform
//! discontinuities. The square wave is rendered with a true sign function;
//! its backward pass uses the derivative of `tanh(σ·x)` with
//! σ = [`SQUARE_SURROGATE_STEEPNESS`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::autodiff::{DiffBuffer, DiffScalar, Tape};
use crate::error::{Error, Result};
use crate::signal::{RenderConfig, Signal};

/// Steepness of the `tanh` surrogate used for the square wave's gradient.
pub const SQUARE_SURROGATE_STEEPNESS: f64 = 100.0;

/// Number of taps of the lowpass FIR kernel.
pub const LOWPASS_TAPS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleKind {
    Oscillator,
    Lfo,
    FmOscillator,
    LowpassFilter,
    AmplitudeAdsr,
    Mix,
    Tremolo,
}

/// Bounds on the number of incoming connections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arity {
    pub min: usize,
    pub max: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Linear,
    /// Sampled and optimised in log space.
    Log,
    /// A segment duration; all segments of a module share the render
    /// duration as a budget.
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    Continuous { lo: f64, hi: f64, scale: Scale },
    Categorical { options: &'static [&'static str] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: ParamKind,
}

impl ParamSpec {
    const fn continuous(name: &'static str, lo: f64, hi: f64, scale: Scale) -> Self {
        Self {
            name,
            kind: ParamKind::Continuous { lo, hi, scale },
        }
    }

    const fn categorical(name: &'static str, options: &'static [&'static str]) -> Self {
        Self {
            name,
            kind: ParamKind::Categorical { options },
        }
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        match self.kind {
            ParamKind::Continuous { lo, hi, .. } => Some((lo, hi)),
            ParamKind::Categorical { .. } => None,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, ParamKind::Continuous { .. })
    }
}

pub const WAVEFORMS: &[&str] = &["sine", "square", "saw"];
pub const SWITCH: &[&str] = &["off", "on"];

pub const AUDIO_FREQ_RANGE: (f64, f64) = (20.0, 20_000.0);
pub const LFO_FREQ_RANGE: (f64, f64) = (0.5, 20.0);
pub const MOD_INDEX_RANGE: (f64, f64) = (0.0, 100.0);
pub const CUTOFF_RANGE: (f64, f64) = (20.0, 8_000.0);

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] = [
        ModuleKind::Oscillator,
        ModuleKind::Lfo,
        ModuleKind::FmOscillator,
        ModuleKind::LowpassFilter,
        ModuleKind::AmplitudeAdsr,
        ModuleKind::Mix,
        ModuleKind::Tremolo,
    ];

    /// Keyword used in chain files.
    pub fn keyword(self) -> &'static str {
        match self {
            ModuleKind::Oscillator => "osc",
            ModuleKind::Lfo => "lfo",
            ModuleKind::FmOscillator => "fm_osc",
            ModuleKind::LowpassFilter => "lowpass",
            ModuleKind::AmplitudeAdsr => "adsr",
            ModuleKind::Mix => "mix",
            ModuleKind::Tremolo => "tremolo",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.keyword() == word)
    }

    /// Parameter catalog. Envelope segment ranges depend on the render
    /// duration.
    pub fn catalog(self, config: &RenderConfig) -> Vec<ParamSpec> {
        let (flo, fhi) = AUDIO_FREQ_RANGE;
        match self {
            ModuleKind::Oscillator => alloc::vec![
                ParamSpec::continuous("amp", 0.0, 1.0, Scale::Linear),
                ParamSpec::continuous("freq", flo, fhi, Scale::Log),
                ParamSpec::categorical("waveform", WAVEFORMS),
                ParamSpec::categorical("active", SWITCH),
            ],
            ModuleKind::Lfo => alloc::vec![
                ParamSpec::continuous("freq", LFO_FREQ_RANGE.0, LFO_FREQ_RANGE.1, Scale::Log),
                ParamSpec::categorical("active", SWITCH),
            ],
            ModuleKind::FmOscillator => alloc::vec![
                ParamSpec::continuous("amp_c", 0.0, 1.0, Scale::Linear),
                ParamSpec::continuous("freq_c", flo, fhi, Scale::Log),
                ParamSpec::categorical("waveform", WAVEFORMS),
                ParamSpec::continuous("mod_index", MOD_INDEX_RANGE.0, MOD_INDEX_RANGE.1, Scale::Linear),
                ParamSpec::categorical("fm_active", SWITCH),
            ],
            ModuleKind::LowpassFilter => alloc::vec![ParamSpec::continuous(
                "cutoff",
                CUTOFF_RANGE.0,
                CUTOFF_RANGE.1,
                Scale::Log
            )],
            ModuleKind::AmplitudeAdsr => {
                let t = config.grid_duration();
                alloc::vec![
                    ParamSpec::continuous("attack", 0.0, t, Scale::Segment),
                    ParamSpec::continuous("decay", 0.0, t, Scale::Segment),
                    ParamSpec::continuous("sustain", 0.0, 1.0, Scale::Linear),
                    ParamSpec::continuous("release", 0.0, t, Scale::Segment),
                ]
            }
            ModuleKind::Tremolo => alloc::vec![ParamSpec::continuous("depth", 0.0, 1.0, Scale::Linear)],
            ModuleKind::Mix => Vec::new(),
        }
    }

    pub fn arity(self) -> Arity {
        let (min, max) = match self {
            ModuleKind::Oscillator | ModuleKind::Lfo => (0, Some(0)),
            ModuleKind::FmOscillator => (0, Some(1)),
            ModuleKind::LowpassFilter | ModuleKind::AmplitudeAdsr => (1, Some(1)),
            ModuleKind::Mix => (1, None),
            ModuleKind::Tremolo => (2, Some(2)),
        };
        Arity { min, max }
    }

    /// Categorical switches that turn the module, or part of it, off.
    pub fn activation_params(self) -> &'static [&'static str] {
        match self {
            ModuleKind::Oscillator | ModuleKind::Lfo => &["active"],
            ModuleKind::FmOscillator => &["fm_active"],
            _ => &[],
        }
    }

    pub fn is_generator(self) -> bool {
        matches!(self, ModuleKind::Oscillator | ModuleKind::Lfo | ModuleKind::FmOscillator)
    }

    /// Highest frequency this module can emit by its own parameters.
    pub fn max_frequency(self) -> f64 {
        match self {
            ModuleKind::Oscillator | ModuleKind::FmOscillator => AUDIO_FREQ_RANGE.1,
            ModuleKind::Lfo => LFO_FREQ_RANGE.1,
            _ => 0.0,
        }
    }
}

impl core::fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.keyword())
    }
}

/// Access to the forward value of a parameter, for plain reals and tracked
/// scalars alike.
pub trait ParamScalar: Copy {
    fn real(&self) -> f64;
}

impl ParamScalar for f64 {
    fn real(&self) -> f64 {
        *self
    }
}

impl ParamScalar for DiffScalar<'_> {
    fn real(&self) -> f64 {
        self.value()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamValue<T> {
    Continuous(T),
    Label(&'static str),
}

/// Parameter values of one cell, keyed by catalog name.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams<T> {
    values: BTreeMap<String, ParamValue<T>>,
}

impl<T> Default for CellParams<T> {
    fn default() -> Self {
        Self {
            values: BTreeMap::new(),
        }
    }
}

impl<T: ParamScalar> CellParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, value: T) -> &mut Self {
        self.values.insert(name.to_string(), ParamValue::Continuous(value));
        self
    }

    /// Stores a categorical label; `label` must be one of the `options`.
    pub fn set_label(&mut self, name: &str, label: &str, options: &'static [&'static str]) -> Result<&mut Self> {
        let interned = options
            .iter()
            .copied()
            .find(|o| *o == label)
            .ok_or_else(|| Error::Assignment(format!("`{label}` is not a valid value for `{name}`")))?;
        self.values.insert(name.into(), ParamValue::Label(interned));
        Ok(self)
    }

    pub fn set_value(&mut self, name: &str, value: ParamValue<T>) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue<T>> {
        self.values.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamValue<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn continuous(&self, name: &str) -> Result<T> {
        match self.values.get(name) {
            Some(ParamValue::Continuous(v)) => Ok(*v),
            Some(ParamValue::Label(_)) => Err(Error::Assignment(format!("`{name}` is categorical"))),
            None => Err(Error::Assignment(format!("missing parameter `{name}`"))),
        }
    }

    pub fn label(&self, name: &str) -> Result<&'static str> {
        match self.values.get(name) {
            Some(ParamValue::Label(l)) => Ok(l),
            Some(ParamValue::Continuous(_)) => Err(Error::Assignment(format!("`{name}` is continuous"))),
            None => Err(Error::Assignment(format!("missing parameter `{name}`"))),
        }
    }

    pub fn switch(&self, name: &str) -> Result<bool> {
        Ok(self.label(name)? == "on")
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<CellParams<U>> {
        let mut values = BTreeMap::new();
        for (k, v) in &self.values {
            let nv = match v {
                ParamValue::Continuous(x) => ParamValue::Continuous(f(k, x)?),
                ParamValue::Label(l) => ParamValue::Label(l),
            };
            values.insert(k.clone(), nv);
        }
        Ok(CellParams { values })
    }

    pub fn to_reals(&self) -> CellParams<f64> {
        self.map(|_, v| Ok(v.real())).expect("infallible")
    }

    /// Checks that the values cover exactly `kind`'s catalog and lie in range.
    pub fn validate(&self, kind: ModuleKind, config: &RenderConfig) -> Result<()> {
        let catalog = kind.catalog(config);
        for spec in &catalog {
            match (spec.kind, self.values.get(spec.name)) {
                (_, None) => {
                    return Err(Error::Assignment(format!("{kind}: missing parameter `{}`", spec.name)))
                }
                (ParamKind::Continuous { lo, hi, .. }, Some(ParamValue::Continuous(v))) => {
                    check_range(spec.name, v.real(), lo, hi)?;
                }
                (ParamKind::Categorical { options }, Some(ParamValue::Label(l))) => {
                    if !options.contains(l) {
                        return Err(Error::Assignment(format!("`{l}` is not a valid `{}`", spec.name)));
                    }
                }
                _ => {
                    return Err(Error::Assignment(format!(
                        "{kind}: parameter `{}` has the wrong type",
                        spec.name
                    )))
                }
            }
        }
        if let Some(extra) = self.values.keys().find(|k| !catalog.iter().any(|s| s.name == k.as_str())) {
            return Err(Error::Assignment(format!("{kind}: unknown parameter `{extra}`")));
        }
        if kind == ModuleKind::AmplitudeAdsr {
            let total = self.continuous("attack")?.real()
                + self.continuous("decay")?.real()
                + self.continuous("release")?.real();
            check_segment_budget(total, config.grid_duration())?;
        }
        Ok(())
    }
}

fn check_range(name: &str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if !(value >= lo && value <= hi) {
        return Err(Error::ParameterRange {
            name: name.into(),
            value,
            lo,
            hi,
        });
    }
    Ok(())
}

fn check_segment_budget(total: f64, duration: f64) -> Result<()> {
    if total > duration * (1.0 + 1e-12) {
        return Err(Error::ParameterRange {
            name: "attack+decay+release".into(),
            value: total,
            lo: 0.0,
            hi: duration,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Waveform {
    Sine,
    Square,
    Saw,
}

impl Waveform {
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "sine" => Ok(Waveform::Sine),
            "square" => Ok(Waveform::Square),
            "saw" => Ok(Waveform::Saw),
            other => Err(Error::Assignment(format!("unknown waveform `{other}`"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Waveform::Sine => "sine",
            Waveform::Square => "square",
            Waveform::Saw => "saw",
        }
    }

    /// Waveforms whose frequency gradient is a surrogate, not exact.
    pub fn has_surrogate_gradient(self) -> bool {
        self == Waveform::Square
    }

    /// Waveform evaluated at a phase measured in cycles.
    pub fn eval(self, cycles: f64) -> f64 {
        match self {
            Waveform::Sine => libm::sin(2.0 * PI * cycles),
            Waveform::Square => signum(libm::sin(2.0 * PI * cycles)),
            Waveform::Saw => 2.0 * frac(cycles) - 1.0,
        }
    }

    /// Backward-pass derivative with respect to the phase in cycles.
    fn slope(self, cycles: f64) -> f64 {
        match self {
            Waveform::Sine => 2.0 * PI * libm::cos(2.0 * PI * cycles),
            Waveform::Square => {
                let s = libm::sin(2.0 * PI * cycles);
                let t = libm::tanh(SQUARE_SURROGATE_STEEPNESS * s);
                SQUARE_SURROGATE_STEEPNESS * (1.0 - t * t) * 2.0 * PI * libm::cos(2.0 * PI * cycles)
            }
            Waveform::Saw => {
                if frac(cycles) == 0.0 {
                    0.0
                } else {
                    2.0
                }
            }
        }
    }

    /// Index of the smooth piece of the waveform holding phase `cycles`.
    /// Two phases with the same branch are joined by a smooth path.
    pub fn branch(self, cycles: f64) -> i64 {
        match self {
            Waveform::Sine => 0,
            Waveform::Square => libm::floor(2.0 * cycles) as i64,
            Waveform::Saw => libm::floor(cycles) as i64,
        }
    }

    fn apply<'t>(self, cycles: &DiffBuffer<'t>) -> DiffBuffer<'t> {
        cycles.map(move |c| self.eval(c), move |c| self.slope(c))
    }
}

fn frac(x: f64) -> f64 {
    x - libm::floor(x)
}

fn signum(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `t·f` reduced to about `[0, 1)` cycles, with the product's rounding error
/// restored so the phase stays exact to far below one cycle's ulp after
/// thousands of cycles.
fn wrapped_phase(t: f64, f: f64) -> f64 {
    let p = t * f;
    frac(p) + libm::fma(t, f, -p)
}

/// Phase in cycles of a wave at frequency `freq` on the render grid.
fn phase_buffer<'t>(freq: DiffScalar<'t>, config: &RenderConfig) -> DiffBuffer<'t> {
    let times = config.times();
    let f = freq.value();
    let values = times.iter().map(|&t| wrapped_phase(t, f)).collect();
    let node = freq.node();
    freq.tape().custom_buffer(values, node.is_some(), move |g, adj| {
        if let Some(n) = node {
            adj.add(n, 0, g.iter().zip(&times).map(|(g, t)| g * t).sum());
        }
    })
}

/// Closed-form periodic wave `amp · w(freq · t)` with zero initial phase.
/// No range checks; see [`render_oscillator`] for the catalog-checked form.
pub fn oscillator_wave<'t>(
    waveform: Waveform,
    amp: DiffScalar<'t>,
    freq: DiffScalar<'t>,
    config: &RenderConfig,
) -> Signal<'t> {
    let cycles = phase_buffer(freq, config);
    Signal::new(waveform.apply(&cycles).scale(amp), config.sample_rate)
}

/// Phase-modulated wave: the phase in cycles is
/// `freq·t_k + index/sr · Σ_{j≤k} m_j`, i.e. the modulator sets the
/// instantaneous frequency deviation in Hz.
pub fn fm_wave<'t>(
    waveform: Waveform,
    amp: DiffScalar<'t>,
    freq: DiffScalar<'t>,
    index: DiffScalar<'t>,
    modulator: &Signal<'t>,
    config: &RenderConfig,
) -> Signal<'t> {
    let sr = config.sample_rate as f64;
    let carrier = phase_buffer(freq, config);
    let deviation = modulator.samples().cumsum().scale(index * (1.0 / sr));
    let cycles = carrier.add(&deviation);
    Signal::new(waveform.apply(&cycles).scale(amp), config.sample_rate)
}

/// Branch of `waveform` (see [`Waveform::branch`]) at every sample, with
/// the phase computed exactly as [`oscillator_wave`] and [`fm_wave`] do.
/// `fm` holds the modulation index and modulator samples.
pub fn phase_branches(waveform: Waveform, freq: f64, fm: Option<(f64, &[f64])>, config: &RenderConfig) -> Vec<i64> {
    let times = config.times();
    let mut cycles: Vec<f64> = times.iter().map(|&t| wrapped_phase(t, freq)).collect();
    if let Some((index, modulator)) = fm {
        let k = index * (1.0 / config.sample_rate as f64);
        let mut acc = 0.0;
        for (c, m) in cycles.iter_mut().zip(modulator) {
            acc += m;
            *c += acc * k;
        }
    }
    // Whole turns removed by the wrap keep wraps of the product visible.
    let per_turn = match waveform {
        Waveform::Sine => 0,
        Waveform::Square => 2,
        Waveform::Saw => 1,
    };
    times
        .iter()
        .zip(cycles)
        .map(|(&t, c)| per_turn * libm::floor(t * freq) as i64 + waveform.branch(c))
        .collect()
}

/// Oscillator module: sine, square or saw; silent when `active` is off.
pub fn render_oscillator<'t>(
    tape: &'t Tape,
    params: &CellParams<DiffScalar<'t>>,
    config: &RenderConfig,
) -> Result<Signal<'t>> {
    if !params.switch("active")? {
        return Ok(Signal::zeros(tape, config));
    }
    let amp = params.continuous("amp")?;
    let freq = params.continuous("freq")?;
    check_range("amp", amp.value(), 0.0, 1.0)?;
    check_range("freq", freq.value(), AUDIO_FREQ_RANGE.0, AUDIO_FREQ_RANGE.1)?;
    let waveform = Waveform::from_label(params.label("waveform")?)?;
    Ok(oscillator_wave(waveform, amp, freq, config))
}

/// Sub-audible sine in [-1, 1].
pub fn render_lfo<'t>(
    tape: &'t Tape,
    params: &CellParams<DiffScalar<'t>>,
    config: &RenderConfig,
) -> Result<Signal<'t>> {
    if !params.switch("active")? {
        return Ok(Signal::zeros(tape, config));
    }
    let freq = params.continuous("freq")?;
    check_range("freq", freq.value(), LFO_FREQ_RANGE.0, LFO_FREQ_RANGE.1)?;
    Ok(oscillator_wave(Waveform::Sine, tape.constant(1.0), freq, config))
}

/// FM oscillator. With `fm_active` off the modulator is ignored and the
/// module behaves as a plain oscillator.
pub fn render_fm_oscillator<'t>(
    params: &CellParams<DiffScalar<'t>>,
    modulator: Option<&Signal<'t>>,
    config: &RenderConfig,
) -> Result<Signal<'t>> {
    let amp = params.continuous("amp_c")?;
    let freq = params.continuous("freq_c")?;
    let index = params.continuous("mod_index")?;
    check_range("amp_c", amp.value(), 0.0, 1.0)?;
    check_range("freq_c", freq.value(), AUDIO_FREQ_RANGE.0, AUDIO_FREQ_RANGE.1)?;
    check_range("mod_index", index.value(), MOD_INDEX_RANGE.0, MOD_INDEX_RANGE.1)?;
    let waveform = Waveform::from_label(params.label("waveform")?)?;
    if !params.switch("fm_active")? {
        return Ok(oscillator_wave(waveform, amp, freq, config));
    }
    let modulator = modulator
        .ok_or_else(|| Error::ChainValidation("fm_active is on but no modulator is connected".into()))?;
    Ok(fm_wave(waveform, amp, freq, index, modulator, config))
}

/// Piecewise-linear amplitude envelope on the render grid.
pub fn adsr_envelope<'t>(
    attack: DiffScalar<'t>,
    decay: DiffScalar<'t>,
    sustain: DiffScalar<'t>,
    release: DiffScalar<'t>,
    config: &RenderConfig,
) -> Result<DiffBuffer<'t>> {
    let tape = attack.tape();
    let total_t = config.grid_duration();
    let (a, d, s, r) = (attack.value(), decay.value(), sustain.value(), release.value());
    for (name, v) in [("attack", a), ("decay", d), ("release", r)] {
        check_range(name, v, 0.0, total_t)?;
    }
    check_range("sustain", s, 0.0, 1.0)?;
    check_segment_budget(a + d + r, total_t)?;

    let times = config.times();
    let env: Vec<f64> = times.iter().map(|&t| envelope_point(t, a, d, s, r, total_t).0).collect();
    let nodes = [attack.node(), decay.node(), sustain.node(), release.node()];
    let tracked = nodes.iter().any(Option::is_some);
    Ok(tape.custom_buffer(env, tracked, move |g, adj| {
        let mut acc = [0.0; 4];
        for (&t, gk) in times.iter().zip(g) {
            let (_, partials) = envelope_point(t, a, d, s, r, total_t);
            for (a, p) in acc.iter_mut().zip(partials) {
                *a += gk * p;
            }
        }
        for (node, v) in nodes.iter().zip(acc) {
            if let Some(n) = node {
                adj.add(*n, 0, v);
            }
        }
    }))
}

/// Envelope value and its partials with respect to (attack, decay, sustain,
/// release) at time `t`.
fn envelope_point(t: f64, a: f64, d: f64, s: f64, r: f64, total: f64) -> (f64, [f64; 4]) {
    match envelope_segment(t, a, d, r, total) {
        0 => (t / a, [-t / (a * a), 0.0, 0.0, 0.0]),
        1 => {
            let u = (t - a) / d;
            (1.0 - (1.0 - s) * u, [(1.0 - s) / d, (1.0 - s) * u / d, u, 0.0])
        }
        2 => (s, [0.0, 0.0, 1.0, 0.0]),
        _ => {
            let w = (total - t) / r;
            (s * w, [0.0, 0.0, w, -s * w / r])
        }
    }
}

/// Envelope segment holding time `t`: 0 attack, 1 decay, 2 sustain,
/// 3 release.
pub fn envelope_segment(t: f64, a: f64, d: f64, r: f64, total: f64) -> u8 {
    if t < a {
        0
    } else if t < a + d {
        1
    } else if t < total - r {
        2
    } else {
        3
    }
}

/// Amplitude envelope module: `input × env`.
pub fn apply_adsr<'t>(
    input: &Signal<'t>,
    params: &CellParams<DiffScalar<'t>>,
    config: &RenderConfig,
) -> Result<Signal<'t>> {
    let env = adsr_envelope(
        params.continuous("attack")?,
        params.continuous("decay")?,
        params.continuous("sustain")?,
        params.continuous("release")?,
        config,
    )?;
    Ok(input.map_samples(|x| x.mul(&env)))
}

/// Hamming-windowed sinc lowpass kernel with unit DC gain; the taps are
/// closed-form functions of the cutoff.
pub fn lowpass_kernel<'t>(cutoff: DiffScalar<'t>, config: &RenderConfig) -> Result<DiffBuffer<'t>> {
    let fc = cutoff.value();
    let sr = config.sample_rate as f64;
    if !(fc > 0.0) || fc > config.nyquist() {
        return Err(Error::ParameterRange {
            name: "cutoff".into(),
            value: fc,
            lo: 0.0,
            hi: config.nyquist(),
        });
    }
    let centre = (LOWPASS_TAPS - 1) as f64 / 2.0;
    let window: Vec<f64> = (0..LOWPASS_TAPS)
        .map(|n| 0.54 - 0.46 * libm::cos(2.0 * PI * n as f64 / (LOWPASS_TAPS - 1) as f64))
        .collect();
    let tap = move |n: usize, fc: f64| -> (f64, f64) {
        let m = n as f64 - centre;
        if m == 0.0 {
            (2.0 * fc / sr, 2.0 / sr)
        } else {
            let arg = 2.0 * PI * fc * m / sr;
            (libm::sin(arg) / (PI * m), 2.0 * libm::cos(arg) / sr)
        }
    };
    let raw: Vec<f64> = (0..LOWPASS_TAPS).map(|n| window[n] * tap(n, fc).0).collect();
    let node = cutoff.node();
    let raw = cutoff.tape().custom_buffer(raw, node.is_some(), move |g, adj| {
        if let Some(node) = node {
            let d: f64 = (0..LOWPASS_TAPS).map(|n| g[n] * window[n] * tap(n, fc).1).sum();
            adj.add(node, 0, d);
        }
    });
    let gain = raw.sum();
    Ok(raw.scale(1.0 / gain))
}

/// Lowpass module; output length equals input length.
pub fn apply_lowpass<'t>(
    input: &Signal<'t>,
    params: &CellParams<DiffScalar<'t>>,
    config: &RenderConfig,
) -> Result<Signal<'t>> {
    let kernel = lowpass_kernel(params.continuous("cutoff")?, config)?;
    Ok(input.map_samples(|x| x.convolve_same(&kernel)))
}

/// Elementwise mean of the inputs.
pub fn mix<'t>(inputs: &[Signal<'t>]) -> Result<Signal<'t>> {
    let (first, rest) = inputs
        .split_first()
        .ok_or_else(|| Error::ChainValidation("mix needs at least one input".into()))?;
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let mut acc = first.samples().clone();
    for s in rest {
        if s.len() != first.len() {
            return Err(Error::ChainValidation("mix inputs differ in length".into()));
        }
        acc = acc.add(s.samples());
    }
    Ok(Signal::new(acc.scale(1.0 / inputs.len() as f64), first.sample_rate()))
}

/// Tremolo: `in · ((1 - depth) + depth · (lfo + 1) / 2)`.
pub fn apply_tremolo<'t>(
    input: &Signal<'t>,
    lfo: Option<&Signal<'t>>,
    params: &CellParams<DiffScalar<'t>>,
) -> Result<Signal<'t>> {
    let lfo = lfo.ok_or_else(|| Error::ChainValidation("tremolo needs an LFO input".into()))?;
    let depth = params.continuous("depth")?;
    check_range("depth", depth.value(), 0.0, 1.0)?;
    let gain = lfo.samples().offset(-1.0).scale(depth * 0.5).offset(1.0);
    Ok(input.map_samples(|x| x.mul(&gain)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use alloc::vec;

    fn cfg(sr: u32, dur: f64) -> RenderConfig {
        RenderConfig::new(sr, dur).unwrap()
    }

    fn osc_params<'t>(tape: &'t Tape, amp: f64, freq: f64, wave: &str, active: bool) -> CellParams<DiffScalar<'t>> {
        let mut p = CellParams::new();
        p.set("amp", tape.constant(amp)).set("freq", tape.constant(freq));
        p.set_label("waveform", wave, WAVEFORMS).unwrap();
        p.set_label("active", if active { "on" } else { "off" }, SWITCH).unwrap();
        p
    }

    #[test]
    fn saw_grid_example() {
        let tape = Tape::new();
        let s = oscillator_wave(Waveform::Saw, tape.constant(1.0), tape.constant(1.0), &cfg(4, 1.0));
        assert_eq!(s.values(), &[-1.0, -0.5, 0.0, 0.5]);
    }

    #[test]
    fn zero_amplitude_is_silent() {
        let tape = Tape::new();
        for w in ["sine", "square", "saw"] {
            let s = render_oscillator(&tape, &osc_params(&tape, 0.0, 440.0, w, true), &cfg(16_000, 0.1)).unwrap();
            assert!(s.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn sine_matches_direct_formula() {
        let tape = Tape::new();
        let s = render_oscillator(&tape, &osc_params(&tape, 1.0, 440.0, "sine", true), &RenderConfig::default())
            .unwrap();
        for (k, v) in s.values().iter().enumerate() {
            let expected = libm::sin(2.0 * PI * 440.0 * k as f64 / 16_000.0);
            assert!((v - expected).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn inactive_oscillator_is_zero() {
        let tape = Tape::new();
        let s = render_oscillator(&tape, &osc_params(&tape, 0.8, 440.0, "saw", false), &cfg(16_000, 0.1)).unwrap();
        assert!(s.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn out_of_range_frequency() {
        let tape = Tape::new();
        let r = render_oscillator(&tape, &osc_params(&tape, 0.5, 10.0, "sine", true), &cfg(16_000, 0.1));
        assert!(matches!(r, Err(Error::ParameterRange { .. })));
    }

    #[test]
    fn amplitude_bound_holds() {
        let tape = Tape::new();
        for w in ["sine", "square", "saw"] {
            let s = render_oscillator(&tape, &osc_params(&tape, 0.37, 1234.5, w, true), &cfg(16_000, 0.2)).unwrap();
            assert!(s.values().iter().all(|v| v.abs() <= 0.37 + 1e-15));
        }
    }

    fn lfo_params(tape: &Tape, freq: f64, active: bool) -> CellParams<DiffScalar<'_>> {
        let mut p = CellParams::new();
        p.set("freq", tape.constant(freq));
        p.set_label("active", if active { "on" } else { "off" }, SWITCH).unwrap();
        p
    }

    #[test]
    fn lfo_quarter_period_and_zero_mean() {
        let tape = Tape::new();
        let s = render_lfo(&tape, &lfo_params(&tape, 1.0, true), &RenderConfig::default()).unwrap();
        assert!((s.values()[4000] - 1.0).abs() < 1e-12);
        let s = render_lfo(&tape, &lfo_params(&tape, 4.0, true), &RenderConfig::default()).unwrap();
        let mean: f64 = s.values().iter().sum::<f64>() / s.len() as f64;
        assert!(mean.abs() < 1e-9);
        let off = render_lfo(&tape, &lfo_params(&tape, 4.0, false), &RenderConfig::default()).unwrap();
        assert!(off.values().iter().all(|v| *v == 0.0));
        assert!(render_lfo(&tape, &lfo_params(&tape, 30.0, true), &RenderConfig::default()).is_err());
    }

    fn fm_params<'t>(tape: &'t Tape, freq: f64, index: f64, wave: &str, on: bool) -> CellParams<DiffScalar<'t>> {
        let mut p = CellParams::new();
        p.set("amp_c", tape.constant(0.9))
            .set("freq_c", tape.constant(freq))
            .set("mod_index", tape.constant(index));
        p.set_label("waveform", wave, WAVEFORMS).unwrap();
        p.set_label("fm_active", if on { "on" } else { "off" }, SWITCH).unwrap();
        p
    }

    #[test]
    fn fm_with_zero_index_or_bypass_equals_plain_oscillator() {
        let tape = Tape::new();
        let config = cfg(16_000, 0.25);
        let m = render_lfo(&tape, &lfo_params(&tape, 5.0, true), &config).unwrap();
        let plain = oscillator_wave(Waveform::Saw, tape.constant(0.9), tape.constant(330.0), &config);
        let zero = render_fm_oscillator(&fm_params(&tape, 330.0, 0.0, "saw", true), Some(&m), &config).unwrap();
        assert_eq!(zero.values(), plain.values());
        let bypass =
            render_fm_oscillator(&fm_params(&tape, 330.0, 50.0, "saw", false), Some(&m), &config).unwrap();
        assert_eq!(bypass.values(), plain.values());
        let missing = render_fm_oscillator(&fm_params(&tape, 330.0, 50.0, "saw", true), None, &config);
        assert!(matches!(missing, Err(Error::ChainValidation(_))));
    }

    #[test]
    fn adsr_identity_and_midpoint() {
        let tape = Tape::new();
        let config = RenderConfig::default();
        let c = |v| tape.constant(v);
        let env = adsr_envelope(c(0.0), c(0.0), c(1.0), c(0.0), &config).unwrap();
        assert!(env.values().iter().all(|v| *v == 1.0));
        let env = adsr_envelope(c(0.4), c(0.1), c(0.5), c(0.2), &config).unwrap();
        assert!((env.values()[3200] - 0.5).abs() < 1e-12);
        assert!(env.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(adsr_envelope(c(0.5), c(0.4), c(0.5), c(0.2), &config).is_err());
    }

    #[test]
    fn adsr_sustain_gradient() {
        let config = cfg(2_000, 1.0);
        let report = finite_difference_check(
            |t, p| {
                let env = adsr_envelope(t.constant(0.1), t.constant(0.2), p[0], t.constant(0.3), &config)?;
                Ok(env.square().sum())
            },
            &[0.6],
            &[1e-6],
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn adsr_time_gradients() {
        let config = cfg(2_000, 1.0);
        let report = finite_difference_check(
            |t, p| {
                let env = adsr_envelope(p[0], p[1], p[2], p[3], &config)?;
                let w = t.constant_buffer(config.times()).map(|x| libm::sin(7.0 * x) + 1.5, |_| 0.0);
                Ok(env.mul(&w).square().sum())
            },
            &[0.1234, 0.2345, 0.6, 0.3456],
            &[1e-7],
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    fn cutoff_params(tape: &Tape, fc: f64) -> CellParams<DiffScalar<'_>> {
        let mut p = CellParams::new();
        p.set("cutoff", tape.constant(fc));
        p
    }

    #[test]
    fn lowpass_passband_and_stopband() {
        let tape = Tape::new();
        let config = RenderConfig::default();
        let a = tape.constant(1.0);
        let low = oscillator_wave(Waveform::Sine, a, tape.constant(100.0), &config);
        let out = apply_lowpass(&low, &cutoff_params(&tape, 4000.0), &config).unwrap();
        assert!((out.rms() / low.rms() - 1.0).abs() < 0.01);
        let high = oscillator_wave(Waveform::Sine, a, tape.constant(6000.0), &config);
        let out = apply_lowpass(&high, &cutoff_params(&tape, 500.0), &config).unwrap();
        assert!(out.rms() < 0.05 * high.rms());
        assert_eq!(out.len(), high.len());
        assert!(apply_lowpass(&high, &cutoff_params(&tape, 9000.0), &config).is_err());
    }

    #[test]
    fn lowpass_kernel_has_unit_dc_gain() {
        let tape = Tape::new();
        let k = lowpass_kernel(tape.constant(1234.0), &RenderConfig::default()).unwrap();
        assert_eq!(k.len(), LOWPASS_TAPS);
        assert!((k.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lowpass_cutoff_gradient() {
        let config = cfg(4_000, 0.25);
        let report = finite_difference_check(
            |t, p| {
                let x = oscillator_wave(Waveform::Saw, t.constant(0.7), t.constant(173.0), &config);
                let mut params = CellParams::new();
                params.set("cutoff", p[0]);
                Ok(apply_lowpass(&x, &params, &config)?.samples().square().sum())
            },
            &[611.0],
            &[1e-4],
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }

    #[test]
    fn mix_examples() {
        let tape = Tape::new();
        let config = cfg(1_000, 0.1);
        let s = oscillator_wave(Waveform::Sine, tape.constant(0.5), tape.constant(30.0), &config);
        let neg = s.map_samples(|b| b.scale(-1.0));
        assert_eq!(mix(&[s.clone()]).unwrap().values(), s.values());
        assert_eq!(mix(&[s.clone(), s.clone()]).unwrap().values(), s.values());
        assert!(mix(&[s.clone(), neg]).unwrap().values().iter().all(|v| *v == 0.0));
        let half = mix(&[Signal::zeros(&tape, &config), s.clone()]).unwrap();
        for (h, v) in half.values().iter().zip(s.values()) {
            assert!((h - v / 2.0).abs() < 1e-15);
        }
        assert!(mix(&[]).is_err());
    }

    #[test]
    fn tremolo_examples() {
        let tape = Tape::new();
        let config = cfg(1_000, 0.1);
        let s = oscillator_wave(Waveform::Saw, tape.constant(0.5), tape.constant(30.0), &config);
        let n = config.num_samples();
        let minus = Signal::from_values(&tape, vec![-1.0; n], 1_000);
        let plus = Signal::from_values(&tape, vec![1.0; n], 1_000);
        let depth = |d: f64| {
            let mut p = CellParams::new();
            p.set("depth", tape.constant(d));
            p
        };
        assert_eq!(apply_tremolo(&s, Some(&minus), &depth(0.0)).unwrap().values(), s.values());
        assert!(apply_tremolo(&s, Some(&minus), &depth(1.0)).unwrap().values().iter().all(|v| *v == 0.0));
        assert_eq!(apply_tremolo(&s, Some(&plus), &depth(1.0)).unwrap().values(), s.values());
        assert!(apply_tremolo(&s, None, &depth(1.0)).is_err());
    }

    #[test]
    fn catalog_declares_arity_and_activation() {
        let config = RenderConfig::default();
        for kind in ModuleKind::ALL {
            let catalog = kind.catalog(&config);
            for a in kind.activation_params() {
                assert!(catalog.iter().any(|s| s.name == *a && !s.is_continuous()));
            }
            assert_eq!(ModuleKind::from_keyword(kind.keyword()), Some(kind));
            let _ = kind.arity();
        }
    }
}
