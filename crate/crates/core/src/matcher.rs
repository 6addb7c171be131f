//! Gradient-descent sound matching.
//!
//! Continuous parameters are optimised in an unconstrained domain and mapped
//! onto their catalog ranges: linear ranges through a sigmoid, frequencies
//! through a sigmoid in log-Hz, and envelope segment times through a softmax
//! with a slack term so their sum stays below the render duration. Unknown
//! categorical parameters are enumerated; each combination is optimised
//! from several random starts and the lowest final objective wins.
//!
//! The objective at step `t` is `w(t)·L_p + β(t)·L_SC`, where `w` defaults to
//! 1 when ground-truth parameters are supplied and 0 otherwise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{DiffScalar, Tape};
use crate::chain::{generate_signal, param_id, CellAddress, ChainSpec, ParameterAssignment, RenderTrace};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, ParameterTarget, PreparedTarget, SignalPoint};
use crate::modules::{CellParams, ParamKind, ParamValue, Scale};
use crate::rng;
use crate::signal::{RenderConfig, Signal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    GradientDescent,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Piecewise-linear schedule over optimisation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule(pub Vec<(usize, f64)>);

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Self(alloc::vec![(0, value)])
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config(format!("{name} needs at least one breakpoint")));
        }
        if self.0.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config(format!("{name} breakpoints must be sorted by step")));
        }
        if self.0.iter().any(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("{name} values must be non-negative")));
        }
        Ok(())
    }

    pub fn at(&self, step: usize) -> f64 {
        beta_at(&self.0, step)
    }

    /// True when the schedule is positive at some step.
    pub fn ever_positive(&self) -> bool {
        self.0.iter().any(|(_, v)| *v > 0.0)
    }
}

/// Linear interpolation between breakpoints, clamped to the end values.
pub fn beta_at(schedule: &[(usize, f64)], step: usize) -> f64 {
    let Some(&(first_step, first)) = schedule.first() else {
        return 0.0;
    };
    if step <= first_step {
        return first;
    }
    for w in schedule.windows(2) {
        let ((s0, v0), (s1, v1)) = (w[0], w[1]);
        if step <= s1 {
            let u = (step - s0) as f64 / (s1 - s0) as f64;
            return v0 + (v1 - v0) * u;
        }
    }
    schedule.last().map_or(0.0, |l| l.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
    /// Weight of the signal-chain loss.
    pub beta_schedule: Schedule,
    /// Weight of the parameter loss; `None` means 1 with ground-truth
    /// parameters and 0 without.
    pub param_weight: Option<Schedule>,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            algorithm: Algorithm::Adam,
            beta_schedule: Schedule::constant(1.0),
            param_weight: None,
            restarts: 8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("optimizer.steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("optimizer.learning_rate must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("optimizer.restarts must be positive".into()));
        }
        self.beta_schedule.validate("optimizer.beta_schedule")?;
        if let Some(w) = &self.param_weight {
            w.validate("optimizer.param_weight")?;
        }
        Ok(())
    }
}

/// Everything a match run needs besides the optimiser settings.
#[derive(Debug, Clone)]
pub struct MatchProblem {
    pub chain: ChainSpec,
    pub config: RenderConfig,
    pub loss: LossConfig,
    /// Target output samples.
    pub target: Vec<f64>,
    /// Ground truth, needed for the parameter loss and for losses on
    /// intermediate cells.
    pub target_params: Option<ParameterTarget>,
    /// Continuous parameters frozen at a value, by parameter id.
    pub fixed: BTreeMap<String, f64>,
    /// Known categorical labels, by parameter id; the rest are enumerated.
    pub labels: BTreeMap<String, String>,
    /// Connection states; all on when absent.
    pub connections: Option<Vec<bool>>,
}

impl MatchProblem {
    pub fn new(chain: ChainSpec, config: RenderConfig, loss: LossConfig, target: Vec<f64>) -> Self {
        Self {
            chain,
            config,
            loss,
            target,
            target_params: None,
            fixed: BTreeMap::new(),
            labels: BTreeMap::new(),
            connections: None,
        }
    }

    /// Uses `truth` as ground truth and fixes its categorical labels.
    pub fn with_known_labels(mut self, truth: &ParameterAssignment<f64>) -> Self {
        for (address, params) in &truth.cells {
            for (name, v) in params.iter() {
                if let ParamValue::Label(l) = v {
                    self.labels.insert(param_id(*address, name), (*l).into());
                }
            }
        }
        self.connections = Some(truth.connections.clone());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mapping {
    Linear { lo: f64, hi: f64 },
    Log { lo: f64, hi: f64 },
    Segment { group: usize },
}

#[derive(Debug, Clone)]
struct FreeParam {
    id: String,
    address: CellAddress,
    name: &'static str,
    mapping: Mapping,
}

#[derive(Debug, Clone)]
struct SegmentGroup {
    budget: f64,
    members: Vec<usize>,
}

#[derive(Debug, Clone)]
struct CategoricalSlot {
    address: CellAddress,
    name: &'static str,
    options: &'static [&'static str],
}

/// Resolved parameter layout of a match problem.
#[derive(Debug, Clone)]
pub struct Layout {
    free: Vec<FreeParam>,
    groups: Vec<SegmentGroup>,
    fixed: Vec<(CellAddress, &'static str, f64)>,
    known: Vec<(CellAddress, &'static str, &'static str)>,
    unknown: Vec<CategoricalSlot>,
    connections: Vec<bool>,
    /// Every module cell, including those without parameters.
    cells: Vec<CellAddress>,
}

impl Layout {
    pub fn new(problem: &MatchProblem) -> Result<Self> {
        let chain = &problem.chain;
        chain.ensure_valid()?;
        let config = &problem.config;
        let mut free = Vec::new();
        let mut groups = Vec::new();
        let mut fixed = Vec::new();
        let mut known = Vec::new();
        let mut unknown = Vec::new();
        let mut used = 0;
        for (address, kind) in chain.modules() {
            let mut segment_members = Vec::new();
            let mut frozen_segments = 0.0;
            let mut has_segments = false;
            for spec in kind.catalog(config) {
                let id = param_id(address, spec.name);
                match spec.kind {
                    ParamKind::Continuous { lo, hi, scale } => {
                        if let Some(&v) = problem.fixed.get(&id) {
                            used += 1;
                            fixed.push((address, spec.name, v));
                            if scale == Scale::Segment {
                                frozen_segments += v;
                                has_segments = true;
                            }
                            continue;
                        }
                        let hi = if spec.name == "cutoff" { hi.min(config.nyquist()) } else { hi };
                        let mapping = match scale {
                            Scale::Linear => Mapping::Linear { lo, hi },
                            Scale::Log => Mapping::Log { lo, hi },
                            Scale::Segment => {
                                has_segments = true;
                                segment_members.push(free.len());
                                Mapping::Segment { group: groups.len() }
                            }
                        };
                        free.push(FreeParam {
                            id,
                            address,
                            name: spec.name,
                            mapping,
                        });
                    }
                    ParamKind::Categorical { options } => match problem.labels.get(&id) {
                        Some(label) => {
                            used += 1;
                            let l = options.iter().copied().find(|o| *o == label.as_str()).ok_or_else(|| {
                                Error::Config(format!("`{label}` is not a valid value for {id}"))
                            })?;
                            known.push((address, spec.name, l));
                        }
                        None => unknown.push(CategoricalSlot {
                            address,
                            name: spec.name,
                            options,
                        }),
                    },
                }
            }
            if has_segments && !segment_members.is_empty() {
                let budget = config.grid_duration() - frozen_segments;
                if !(budget > 0.0) {
                    return Err(Error::Config(format!("fixed envelope segments of {address} leave no time")));
                }
                groups.push(SegmentGroup {
                    budget,
                    members: segment_members,
                });
            }
        }
        if used != problem.fixed.len() + problem.labels.len() {
            let unknown_id = problem
                .fixed
                .keys()
                .chain(problem.labels.keys())
                .find(|id| {
                    !fixed.iter().any(|(a, n, _)| param_id(*a, n) == **id)
                        && !known.iter().any(|(a, n, _)| param_id(*a, n) == **id)
                })
                .cloned()
                .unwrap_or_default();
            return Err(Error::Config(format!("`{unknown_id}` is not a parameter of the chain")));
        }
        let connections = problem.connections.clone().unwrap_or_else(|| chain.all_connections_on());
        if connections.len() != chain.connections.len() {
            return Err(Error::Config("connection states do not match the chain".into()));
        }
        Ok(Self {
            free,
            groups,
            fixed,
            known,
            unknown,
            connections,
            cells: chain.modules().into_iter().map(|(a, _)| a).collect(),
        })
    }

    /// Number of categorical combinations to enumerate.
    pub fn branch_count(&self) -> usize {
        self.unknown.iter().map(|s| s.options.len()).product()
    }

    pub fn free_ids(&self) -> Vec<String> {
        self.free.iter().map(|f| f.id.clone()).collect()
    }

    fn branch_labels(&self, branch: usize) -> Vec<(CellAddress, &'static str, &'static str)> {
        let mut out = self.known.clone();
        let mut rest = branch;
        for slot in &self.unknown {
            let n = slot.options.len();
            out.push((slot.address, slot.name, slot.options[rest % n]));
            rest /= n;
        }
        out
    }

    /// Maps unconstrained values onto natural parameter values.
    fn natural<'t>(&self, tape: &'t Tape, u: &[DiffScalar<'t>]) -> Vec<DiffScalar<'t>> {
        let mut denominators: Vec<Option<DiffScalar<'t>>> = alloc::vec![None; self.groups.len()];
        for (g, group) in self.groups.iter().enumerate() {
            let mut d = tape.constant(1.0);
            for &m in &group.members {
                d = d + u[m].exp();
            }
            denominators[g] = Some(d);
        }
        self.free
            .iter()
            .zip(u)
            .map(|(f, &x)| match f.mapping {
                Mapping::Linear { lo, hi } => x.sigmoid() * (hi - lo) + lo,
                Mapping::Log { lo, hi } => {
                    let (a, b) = (libm::log(lo), libm::log(hi));
                    (x.sigmoid() * (b - a) + a).exp()
                }
                Mapping::Segment { group } => {
                    let d = denominators[group].expect("group denominator");
                    x.exp() / d * self.groups[group].budget
                }
            })
            .collect()
    }

    /// Natural values of an unconstrained point.
    pub fn natural_values(&self, u: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let vars: Vec<DiffScalar<'_>> = u.iter().map(|&v| tape.constant(v)).collect();
        self.natural(&tape, &vars).iter().map(|s| s.value()).collect()
    }

    fn assemble<'t>(
        &self,
        tape: &'t Tape,
        natural: &[DiffScalar<'t>],
        branch: usize,
    ) -> ParameterAssignment<DiffScalar<'t>> {
        let mut a = ParameterAssignment::new(self.connections.clone());
        for &address in &self.cells {
            a.cell_mut(address);
        }
        for (f, v) in self.free.iter().zip(natural) {
            a.cell_mut(f.address).set(f.name, *v);
        }
        for (address, name, v) in &self.fixed {
            a.cell_mut(*address).set(name, tape.constant(*v));
        }
        for (address, name, label) in self.branch_labels(branch) {
            a.cell_mut(address).set_value(name, ParamValue::Label(label));
        }
        a
    }

    /// Real-valued assignment of an unconstrained point.
    pub fn assignment(&self, u: &[f64], branch: usize) -> ParameterAssignment<f64> {
        let tape = Tape::new();
        let vars: Vec<DiffScalar<'_>> = u.iter().map(|&v| tape.constant(v)).collect();
        let natural = self.natural(&tape, &vars);
        self.assemble(&tape, &natural, branch).to_reals()
    }
}

/// Outcome of one (branch, restart) optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub branch: usize,
    pub restart: usize,
    /// Objective before each update.
    pub trajectory: Vec<f64>,
    /// Objective at the final parameters, with the last step's weights.
    pub final_loss: f64,
    pub diverged: bool,
    pub unconstrained: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub best: ParameterAssignment<f64>,
    pub best_branch: usize,
    pub best_restart: usize,
    pub trajectory: Vec<f64>,
    pub final_loss: f64,
    /// Signal-chain loss of the best match.
    pub final_spectral_loss: f64,
    /// Log-spectral distance between the best match and the target.
    pub final_lsd: f64,
    pub trials: Vec<TrialResult>,
}

/// Immutable state shared by every trial of one problem.
#[derive(Debug, Clone)]
pub struct Matcher {
    problem: MatchProblem,
    opt: OptimizerConfig,
    layout: Layout,
    prepared: PreparedTarget,
    param_weight: Schedule,
}

/// Window used for the reported log-spectral distance.
pub const LSD_WINDOW: usize = 1024;

impl Matcher {
    pub fn new(problem: MatchProblem, opt: OptimizerConfig) -> Result<Self> {
        problem.config.validate()?;
        problem.loss.validate()?;
        opt.validate()?;
        if problem.target.len() != problem.config.num_samples() {
            return Err(Error::Config(format!(
                "target has {} samples, the render grid has {}",
                problem.target.len(),
                problem.config.num_samples()
            )));
        }
        let param_weight = match (&opt.param_weight, &problem.target_params) {
            (Some(w), None) if w.ever_positive() => {
                return Err(Error::Config(
                    "the schedule uses the parameter loss but no target parameters were given".into(),
                ))
            }
            (Some(w), _) => w.clone(),
            (None, Some(_)) => Schedule::constant(1.0),
            (None, None) => Schedule::constant(0.0),
        };
        let layout = Layout::new(&problem)?;
        let prepared = prepare_target(&problem)?;
        Ok(Self {
            problem,
            opt,
            layout,
            prepared,
            param_weight,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn problem(&self) -> &MatchProblem {
        &self.problem
    }

    /// Number of independent trials: branches × restarts.
    pub fn trial_count(&self) -> usize {
        self.layout.branch_count() * self.opt.restarts
    }

    /// Objective and its gradient with respect to `u`.
    fn evaluate(&self, u: &[f64], branch: usize, step: usize) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let ids = self.layout.free_ids();
        let vars = ids
            .iter()
            .zip(u)
            .map(|(id, &v)| tape.parameter(id.clone(), v))
            .collect::<Result<Vec<_>>>()?;
        let natural = self.layout.natural(&tape, &vars);
        let assignment = self.layout.assemble(&tape, &natural, branch);
        let trace = generate_signal(&tape, &self.problem.chain, &assignment, &self.problem.config)?;
        let beta = self.opt.beta_schedule.at(step);
        let weight = self.param_weight.at(step);
        let mut objective = tape.constant(0.0);
        if beta > 0.0 {
            objective = objective + self.prepared.loss(&trace)? * beta;
        }
        if weight > 0.0 {
            let target = self.problem.target_params.as_ref().expect("checked in new");
            let lp = losses::parameter_loss(
                &tape,
                &self.problem.chain,
                &assignment,
                target,
                self.problem.loss.regression,
                &self.problem.config,
            )?;
            objective = objective + lp * weight;
        }
        let grads = tape.backward(&objective)?;
        let g = ids.iter().map(|id| grads.get(id).unwrap_or(0.0)).collect();
        Ok((objective.value(), g))
    }

    /// Unconstrained starting point of a restart.
    pub fn initial_point(&self, branch: usize, restart: usize) -> Vec<f64> {
        let index = (branch * self.opt.restarts + restart) as u64;
        let mut r = rng::stream(self.opt.seed, index);
        (0..self.layout.free.len()).map(|_| rng::uniform(&mut r, -2.0, 2.0)).collect()
    }

    /// Runs one (branch, restart) optimisation.
    pub fn run_trial(&self, branch: usize, restart: usize) -> Result<TrialResult> {
        let mut u = self.initial_point(branch, restart);
        self.optimize(&mut u, branch, restart)
    }

    /// Trial `index` in `0..trial_count()`, ordered by branch then restart.
    pub fn run_trial_index(&self, index: usize) -> Result<TrialResult> {
        self.run_trial(index / self.opt.restarts, index % self.opt.restarts)
    }

    fn optimize(&self, u: &mut [f64], branch: usize, restart: usize) -> Result<TrialResult> {
        let n = u.len();
        let (mut m, mut v) = (alloc::vec![0.0; n], alloc::vec![0.0; n]);
        let mut trajectory = Vec::with_capacity(self.opt.steps);
        let lr = self.opt.learning_rate;
        let diverged = |trajectory: Vec<f64>, u: &[f64]| TrialResult {
            branch,
            restart,
            trajectory,
            final_loss: f64::INFINITY,
            diverged: true,
            unconstrained: u.to_vec(),
        };
        for step in 0..self.opt.steps {
            let (loss, g) = self.evaluate(u, branch, step)?;
            trajectory.push(loss);
            if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Ok(diverged(trajectory, u));
            }
            let t = (step + 1) as i32;
            for i in 0..n {
                match self.opt.algorithm {
                    Algorithm::GradientDescent => u[i] -= lr * g[i],
                    Algorithm::Adam => {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mh = m[i] / (1.0 - libm::pow(ADAM_BETA1, t as f64));
                        let vh = v[i] / (1.0 - libm::pow(ADAM_BETA2, t as f64));
                        u[i] -= lr * mh / (libm::sqrt(vh) + ADAM_EPSILON);
                    }
                }
            }
        }
        let (final_loss, _) = self.evaluate(u, branch, self.opt.steps - 1)?;
        if !final_loss.is_finite() {
            return Ok(diverged(trajectory, u));
        }
        Ok(TrialResult {
            branch,
            restart,
            trajectory,
            final_loss,
            diverged: false,
            unconstrained: u.to_vec(),
        })
    }

    /// Picks the best trial and scores it. `trials` may be in any order.
    pub fn merge(&self, mut trials: Vec<TrialResult>) -> Result<MatchResult> {
        trials.sort_by_key(|t| (t.branch, t.restart));
        let best = trials
            .iter()
            .filter(|t| !t.diverged)
            .min_by(|a, b| a.final_loss.total_cmp(&b.final_loss))
            .ok_or_else(|| Error::NumericDomain {
                op: "match",
                detail: "every restart diverged".into(),
            })?
            .clone();
        let assignment = self.layout.assignment(&best.unconstrained, best.branch);
        let tape = Tape::new();
        let trace = generate_signal(&tape, &self.problem.chain, &assignment.bind_constants(&tape), &self.problem.config)?;
        let spectral = self.prepared.loss(&trace)?.value();
        let lsd = losses::log_spectral_distance(
            trace.output.values(),
            &self.problem.target,
            self.problem.config.sample_rate,
            LSD_WINDOW,
        )?;
        Ok(MatchResult {
            best: assignment,
            best_branch: best.branch,
            best_restart: best.restart,
            trajectory: best.trajectory.clone(),
            final_loss: best.final_loss,
            final_spectral_loss: spectral,
            final_lsd: lsd,
            trials,
        })
    }

    /// Runs every trial sequentially and merges them.
    pub fn run(&self) -> Result<MatchResult> {
        let trials = (0..self.trial_count())
            .map(|i| self.run_trial_index(i))
            .collect::<Result<Vec<_>>>()?;
        self.merge(trials)
    }

    /// Renders the output of an assignment.
    pub fn render(&self, assignment: &ParameterAssignment<f64>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let trace = generate_signal(&tape, &self.problem.chain, &assignment.bind_constants(&tape), &self.problem.config)?;
        Ok(trace.output.values().to_vec())
    }
}

fn prepare_target(problem: &MatchProblem) -> Result<PreparedTarget> {
    let tape = Tape::new();
    let output = Signal::from_values(&tape, problem.target.clone(), problem.config.sample_rate);
    let points = problem.loss.cells.points(&problem.chain);
    let needs_cells = points.iter().any(|p| matches!(p, SignalPoint::Cell(_)));
    let cells = match (&problem.target_params, needs_cells) {
        (_, false) => BTreeMap::new(),
        (Some(t), true) => {
            generate_signal(&tape, &problem.chain, &t.assignment.bind_constants(&tape), &problem.config)?.cells
        }
        (None, true) => {
            return Err(Error::Config(
                "losses on intermediate cells need target parameters; use an output-only loss".into(),
            ))
        }
    };
    PreparedTarget::new(&problem.chain, &RenderTrace { cells, output }, &problem.loss)
}

/// Matches `problem` with `opt`, running every trial sequentially.
pub fn match_sound(problem: MatchProblem, opt: OptimizerConfig) -> Result<MatchResult> {
    Matcher::new(problem, opt)?.run()
}

/// Unconstrained value for a natural value of a sigmoid-mapped parameter.
pub fn logit_for(value: f64, lo: f64, hi: f64, log_scale: bool) -> f64 {
    let (v, a, b) = if log_scale {
        (libm::log(value), libm::log(lo), libm::log(hi))
    } else {
        (value, lo, hi)
    };
    let p = ((v - a) / (b - a)).clamp(1e-12, 1.0 - 1e-12);
    libm::log(p / (1.0 - p))
}

impl CellParams<f64> {
    /// Values of this cell as plain numbers, categorical entries skipped.
    pub fn continuous_values(&self) -> Vec<(&str, f64)> {
        self.iter()
            .filter_map(|(k, v)| match v {
                ParamValue::Continuous(x) => Some((k, *x)),
                ParamValue::Label(_) => None,
            })
            .collect()
    }
}
