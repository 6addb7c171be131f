//! Cell matrix, chain files, validation and layer-ordered rendering.
//!
//! Chain file grammar (one statement per line, `#` starts a comment):
//!
//! ```text
//! chain <name>
//! cell <channel> <layer> <kind>          # kind: osc lfo fm_osc lowpass adsr mix tremolo empty
//! connect <ch>,<ly> -> <ch>,<ly> [optional]
//! ```

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::{DiffScalar, Tape};
use crate::error::{Error, Result};
use crate::modules::{self, CellParams, ModuleKind, ParamScalar, ParamSpec};
use crate::rng::{self, Rng};
use crate::signal::{RenderConfig, Signal};

/// Position of a cell in the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellAddress {
    pub channel: usize,
    pub layer: usize,
}

impl CellAddress {
    pub const fn new(channel: usize, layer: usize) -> Self {
        Self { channel, layer }
    }

    /// Parses `"<ch>,<ly>"`.
    pub fn parse(text: &str) -> Option<Self> {
        let (ch, ly) = text.split_once(',')?;
        Some(Self::new(parse_index(ch)?, parse_index(ly)?))
    }

    fn render_key(&self) -> (usize, usize) {
        (self.layer, self.channel)
    }
}

fn parse_index(text: &str) -> Option<usize> {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    text.parse().ok()
}

impl fmt::Display for CellAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.channel, self.layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionKind {
    Fixed,
    Optional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connection {
    pub from: CellAddress,
    pub to: CellAddress,
    pub kind: ConnectionKind,
    /// Source line, or 0 when built programmatically.
    pub line: usize,
}

/// One `cell` statement; `kind` is `None` for an empty cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellDecl {
    pub address: CellAddress,
    pub kind: Option<ModuleKind>,
    pub line: usize,
}

/// Structural problem found by [`ChainSpec::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    BackwardConnection { line: usize, from: CellAddress, to: CellAddress },
    CellOccupied { line: usize, address: CellAddress, first_line: usize },
    DanglingEndpoint { line: usize, address: CellAddress },
    DuplicateConnection { line: usize, from: CellAddress, to: CellAddress },
    MissingRequiredInput { line: usize, address: CellAddress, kind: ModuleKind, detail: String },
    TooManyInputs { line: usize, address: CellAddress, kind: ModuleKind, count: usize, max: usize },
    InputToEmptyCell { line: usize, address: CellAddress, count: usize },
    EmptyFinalLayer { layer: usize },
    NoCells,
}

impl Violation {
    /// Short stable label of the violation class.
    pub fn label(&self) -> &'static str {
        match self {
            Violation::BackwardConnection { .. } => "backward connection",
            Violation::CellOccupied { .. } => "cell occupied",
            Violation::DanglingEndpoint { .. } => "dangling endpoint",
            Violation::DuplicateConnection { .. } => "duplicate connection",
            Violation::MissingRequiredInput { .. } => "missing required input",
            Violation::TooManyInputs { .. } => "too many inputs",
            Violation::InputToEmptyCell { .. } => "input to empty cell",
            Violation::EmptyFinalLayer { .. } => "empty final layer",
            Violation::NoCells => "no cells",
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            Violation::BackwardConnection { line, .. }
            | Violation::CellOccupied { line, .. }
            | Violation::DanglingEndpoint { line, .. }
            | Violation::DuplicateConnection { line, .. }
            | Violation::MissingRequiredInput { line, .. }
            | Violation::TooManyInputs { line, .. }
            | Violation::InputToEmptyCell { line, .. } => Some(*line),
            _ => None,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BackwardConnection { line, from, to } => {
                write!(f, "line {line}: backward connection {from} -> {to}; inputs must come from an earlier layer")
            }
            Violation::CellOccupied { line, address, first_line } => {
                write!(f, "line {line}: cell occupied: {address} already declared on line {first_line}")
            }
            Violation::DanglingEndpoint { line, address } => {
                write!(f, "line {line}: dangling endpoint: no cell declared at {address}")
            }
            Violation::DuplicateConnection { line, from, to } => {
                write!(f, "line {line}: duplicate connection {from} -> {to}")
            }
            Violation::MissingRequiredInput { line, address, kind, detail } => {
                write!(f, "line {line}: missing required input: {kind} at {address} {detail}")
            }
            Violation::TooManyInputs { line, address, kind, count, max } => {
                write!(f, "line {line}: too many inputs: {kind} at {address} has {count}, accepts at most {max}")
            }
            Violation::InputToEmptyCell { line, address, count } => {
                write!(f, "line {line}: input to empty cell: {address} receives {count} connection(s) but hosts no module")
            }
            Violation::EmptyFinalLayer { layer } => {
                write!(f, "empty final layer: layer {layer} holds no module")
            }
            Violation::NoCells => f.write_str("no cells: the chain declares no cells"),
        }
    }
}

/// A parsed chain: named grid of cells plus connections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainSpec {
    pub name: String,
    pub cells: Vec<CellDecl>,
    pub connections: Vec<Connection>,
}

impl ChainSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            cells: Vec::new(),
            connections: Vec::new(),
        }
    }

    pub fn with_cell(mut self, channel: usize, layer: usize, kind: Option<ModuleKind>) -> Self {
        self.cells.push(CellDecl {
            address: CellAddress::new(channel, layer),
            kind,
            line: 0,
        });
        self
    }

    pub fn with_connection(mut self, from: (usize, usize), to: (usize, usize), kind: ConnectionKind) -> Self {
        self.connections.push(Connection {
            from: CellAddress::new(from.0, from.1),
            to: CellAddress::new(to.0, to.1),
            kind,
            line: 0,
        });
        self
    }

    /// Parses the syntax only; structural checks are left to
    /// [`ChainSpec::validate`].
    pub fn parse_unchecked(text: &str) -> Result<Self> {
        let mut name: Option<String> = None;
        let mut cells = Vec::new();
        let mut connections = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("");
            let tokens: Vec<&str> = content.split_whitespace().collect();
            let Some((&head, args)) = tokens.split_first() else {
                continue;
            };
            let err = |message: String| Error::Parse { line, message };
            match head {
                "chain" => {
                    if name.is_some() {
                        return Err(err("a chain is already declared".into()));
                    }
                    match args {
                        [n] => name = Some((*n).to_string()),
                        _ => return Err(err("expected `chain <name>`".into())),
                    }
                }
                "cell" => {
                    let [ch, ly, kind] = args else {
                        return Err(err("expected `cell <channel> <layer> <kind>`".into()));
                    };
                    let (Some(channel), Some(layer)) = (parse_index(ch), parse_index(ly)) else {
                        return Err(err(format!(
                            "malformed address `{ch} {ly}`: expected two non-negative integers"
                        )));
                    };
                    let kind = match *kind {
                        "empty" => None,
                        k => Some(ModuleKind::from_keyword(k).ok_or_else(|| {
                            err(format!(
                                "unknown module kind `{k}`: expected one of osc, lfo, fm_osc, lowpass, adsr, mix, tremolo, empty"
                            ))
                        })?),
                    };
                    cells.push(CellDecl {
                        address: CellAddress::new(channel, layer),
                        kind,
                        line,
                    });
                }
                "connect" => {
                    let (from, arrow, to, kind) = match args {
                        [from, arrow, to] => (from, arrow, to, ConnectionKind::Fixed),
                        [from, arrow, to, opt] if *opt == "optional" => (from, arrow, to, ConnectionKind::Optional),
                        [_, _, _, other] => return Err(err(format!("expected `optional`, found `{other}`"))),
                        _ => return Err(err("expected `connect <ch>,<ly> -> <ch>,<ly> [optional]`".into())),
                    };
                    if *arrow != "->" {
                        return Err(err(format!("expected `->`, found `{arrow}`")));
                    }
                    let address = |t: &str| {
                        CellAddress::parse(t)
                            .ok_or_else(|| err(format!("malformed address `{t}`: expected `<channel>,<layer>`")))
                    };
                    connections.push(Connection {
                        from: address(from)?,
                        to: address(to)?,
                        kind,
                        line,
                    });
                }
                other => {
                    return Err(err(format!(
                        "unknown statement `{other}`: expected `chain`, `cell` or `connect`"
                    )))
                }
            }
        }
        let name = name.ok_or(Error::Parse {
            line: text.lines().count().max(1),
            message: "no chain declared".into(),
        })?;
        Ok(Self {
            name,
            cells,
            connections,
        })
    }

    /// Parses a chain file, rejecting duplicate cells and dangling endpoints.
    pub fn parse(text: &str) -> Result<Self> {
        let spec = Self::parse_unchecked(text)?;
        let structural = spec.validate().into_iter().find(|v| {
            matches!(v, Violation::CellOccupied { .. } | Violation::DanglingEndpoint { .. })
        });
        match structural {
            Some(v) => Err(Error::Parse {
                line: v.line().unwrap_or(0),
                message: v.to_string(),
            }),
            None => Ok(spec),
        }
    }

    /// Canonical chain-file text.
    pub fn to_text(&self) -> String {
        let mut out = format!("chain {}\n", self.name);
        for c in &self.cells {
            let kind = c.kind.map_or("empty", ModuleKind::keyword);
            out += &format!("cell {} {} {kind}\n", c.address.channel, c.address.layer);
        }
        for c in &self.connections {
            let opt = if c.kind == ConnectionKind::Optional { " optional" } else { "" };
            out += &format!("connect {} -> {}{opt}\n", c.from, c.to);
        }
        out
    }

    /// First declaration at `address`: `Some(None)` for an empty cell.
    pub fn cell(&self, address: CellAddress) -> Option<Option<ModuleKind>> {
        self.cells.iter().find(|c| c.address == address).map(|c| c.kind)
    }

    /// Distinct declared cells (first declaration wins), in render order.
    pub fn declared(&self) -> Vec<(CellAddress, Option<ModuleKind>)> {
        let mut map = BTreeMap::new();
        for c in &self.cells {
            map.entry(c.address.render_key()).or_insert((c.address, c.kind));
        }
        map.into_values().collect()
    }

    /// Non-empty cells in render order.
    pub fn modules(&self) -> Vec<(CellAddress, ModuleKind)> {
        self.declared().into_iter().filter_map(|(a, k)| k.map(|k| (a, k))).collect()
    }

    pub fn max_layer(&self) -> Option<usize> {
        self.cells.iter().map(|c| c.address.layer).max()
    }

    /// Declared cells of the maximum layer.
    pub fn final_cells(&self) -> Vec<CellAddress> {
        let Some(max) = self.max_layer() else {
            return Vec::new();
        };
        self.declared().into_iter().map(|(a, _)| a).filter(|a| a.layer == max).collect()
    }

    /// Indices of connections ending at `address`.
    pub fn incoming(&self, address: CellAddress) -> Vec<usize> {
        (0..self.connections.len()).filter(|&i| self.connections[i].to == address).collect()
    }

    pub fn optional_count(&self) -> usize {
        self.connections.iter().filter(|c| c.kind == ConnectionKind::Optional).count()
    }

    /// Connection states with every optional connection on.
    pub fn all_connections_on(&self) -> Vec<bool> {
        alloc::vec![true; self.connections.len()]
    }

    /// Every structural violation; empty when the chain is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.cells.is_empty() {
            out.push(Violation::NoCells);
            return out;
        }
        let mut first: BTreeMap<CellAddress, &CellDecl> = BTreeMap::new();
        for c in &self.cells {
            match first.get(&c.address) {
                Some(prev) => out.push(Violation::CellOccupied {
                    line: c.line,
                    address: c.address,
                    first_line: prev.line,
                }),
                None => {
                    first.insert(c.address, c);
                }
            }
        }
        let mut seen = BTreeSet::new();
        let mut sound = alloc::vec![true; self.connections.len()];
        for (i, c) in self.connections.iter().enumerate() {
            for end in [c.from, c.to] {
                if !first.contains_key(&end) {
                    out.push(Violation::DanglingEndpoint { line: c.line, address: end });
                    sound[i] = false;
                }
            }
            if c.from.layer >= c.to.layer {
                out.push(Violation::BackwardConnection {
                    line: c.line,
                    from: c.from,
                    to: c.to,
                });
                sound[i] = false;
            }
            if !seen.insert((c.from, c.to)) {
                out.push(Violation::DuplicateConnection {
                    line: c.line,
                    from: c.from,
                    to: c.to,
                });
                sound[i] = false;
            }
        }
        for (&address, decl) in &first {
            let incoming: Vec<&Connection> = self
                .incoming(address)
                .into_iter()
                .filter(|&i| sound[i])
                .map(|i| &self.connections[i])
                .collect();
            let Some(kind) = decl.kind else {
                if !incoming.is_empty() {
                    out.push(Violation::InputToEmptyCell {
                        line: decl.line,
                        address,
                        count: incoming.len(),
                    });
                }
                continue;
            };
            let arity = kind.arity();
            if let Some(max) = arity.max {
                if incoming.len() > max {
                    out.push(Violation::TooManyInputs {
                        line: decl.line,
                        address,
                        kind,
                        count: incoming.len(),
                        max,
                    });
                    continue;
                }
            }
            if kind == ModuleKind::Tremolo {
                let is_lfo = |c: &&&Connection| first.get(&c.from).and_then(|d| d.kind) == Some(ModuleKind::Lfo);
                let lfo = incoming.iter().filter(is_lfo).count();
                if lfo == 0 {
                    out.push(Violation::MissingRequiredInput {
                        line: decl.line,
                        address,
                        kind,
                        detail: "needs an incoming connection from an lfo".into(),
                    });
                } else if lfo == incoming.len() {
                    out.push(Violation::MissingRequiredInput {
                        line: decl.line,
                        address,
                        kind,
                        detail: "needs an incoming audio connection besides the lfo".into(),
                    });
                }
            } else if incoming.len() < arity.min {
                out.push(Violation::MissingRequiredInput {
                    line: decl.line,
                    address,
                    kind,
                    detail: format!("needs at least {} incoming connection(s)", arity.min),
                });
            }
        }
        if let Some(max) = self.max_layer() {
            if !first.values().any(|d| d.address.layer == max && d.kind.is_some()) {
                out.push(Violation::EmptyFinalLayer { layer: max });
            }
        }
        out
    }

    /// Errors with every violation when the chain is invalid.
    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            return Ok(());
        }
        let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(Error::ChainValidation(text.join("; ")))
    }

    /// Warning when the sample rate cannot represent the chain's generators.
    pub fn aliasing_warning(&self, config: &RenderConfig) -> Option<String> {
        let max = self.modules().iter().map(|(_, k)| k.max_frequency()).fold(0.0, f64::max);
        config.aliasing_warning(max)
    }

    /// Every continuous parameter of the chain in render order.
    pub fn continuous_parameters(&self, config: &RenderConfig) -> Vec<(CellAddress, ParamSpec)> {
        let mut out = Vec::new();
        for (address, kind) in self.modules() {
            for spec in kind.catalog(config) {
                if spec.is_continuous() {
                    out.push((address, spec));
                }
            }
        }
        out
    }
}

/// Parses and structurally checks a chain file.
pub fn parse_chain_file(text: &str) -> Result<ChainSpec> {
    ChainSpec::parse(text)
}

/// Identifier of a parameter: `"<ch>,<ly>.<name>"`.
pub fn param_id(address: CellAddress, name: &str) -> String {
    format!("{address}.{name}")
}

/// Inverse of [`param_id`].
pub fn parse_param_id(id: &str) -> Option<(CellAddress, &str)> {
    let (addr, name) = id.split_once('.')?;
    Some((CellAddress::parse(addr)?, name)).filter(|(_, n)| !n.is_empty())
}

/// Parameter values for every module cell plus on/off states of every
/// connection (fixed connections are always on).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterAssignment<T = f64> {
    pub cells: BTreeMap<CellAddress, CellParams<T>>,
    pub connections: Vec<bool>,
}

impl<T: ParamScalar> ParameterAssignment<T> {
    pub fn new(connections: Vec<bool>) -> Self {
        Self {
            cells: BTreeMap::new(),
            connections,
        }
    }

    pub fn cell(&self, address: CellAddress) -> Result<&CellParams<T>> {
        self.cells
            .get(&address)
            .ok_or_else(|| Error::Assignment(format!("no parameters for cell {address}")))
    }

    pub fn cell_mut(&mut self, address: CellAddress) -> &mut CellParams<T> {
        self.cells.entry(address).or_default()
    }

    pub fn to_reals(&self) -> ParameterAssignment<f64> {
        ParameterAssignment {
            cells: self.cells.iter().map(|(a, p)| (*a, p.to_reals())).collect(),
            connections: self.connections.clone(),
        }
    }

    /// Checks coverage of the chain's modules, catalog ranges and connection
    /// states.
    pub fn validate(&self, chain: &ChainSpec, config: &RenderConfig) -> Result<()> {
        if self.connections.len() != chain.connections.len() {
            return Err(Error::Assignment(format!(
                "{} connection states given for {} connections",
                self.connections.len(),
                chain.connections.len()
            )));
        }
        for (c, on) in chain.connections.iter().zip(&self.connections) {
            if c.kind == ConnectionKind::Fixed && !on {
                return Err(Error::Assignment(format!("fixed connection {} -> {} is off", c.from, c.to)));
            }
        }
        let modules = chain.modules();
        for (address, kind) in &modules {
            self.cell(*address)?
                .validate(*kind, config)
                .map_err(|e| prefix_error(e, *address))?;
        }
        if let Some(extra) = self.cells.keys().find(|a| !modules.iter().any(|(m, _)| m == *a)) {
            return Err(Error::Assignment(format!("parameters given for non-module cell {extra}")));
        }
        Ok(())
    }
}

fn prefix_error(e: Error, address: CellAddress) -> Error {
    match e {
        Error::Assignment(m) => Error::Assignment(format!("cell {address}: {m}")),
        Error::ParameterRange { name, value, lo, hi } => Error::ParameterRange {
            name: param_id(address, &name),
            value,
            lo,
            hi,
        },
        other => other,
    }
}

impl ParameterAssignment<f64> {
    /// Binds each continuous value through `f`, which receives the cell,
    /// parameter name and value.
    pub fn bind_with<'t, F>(&self, mut f: F) -> Result<ParameterAssignment<DiffScalar<'t>>>
    where
        F: FnMut(CellAddress, &str, f64) -> Result<DiffScalar<'t>>,
    {
        let mut cells = BTreeMap::new();
        for (address, params) in &self.cells {
            cells.insert(*address, params.map(|name, v| f(*address, name, *v))?);
        }
        Ok(ParameterAssignment {
            cells,
            connections: self.connections.clone(),
        })
    }

    /// All continuous values as untracked constants.
    pub fn bind_constants<'t>(&self, tape: &'t Tape) -> ParameterAssignment<DiffScalar<'t>> {
        self.bind_with(|_, _, v| Ok(tape.constant(v))).expect("infallible")
    }

    /// All continuous values as tape parameters named by [`param_id`].
    pub fn bind_parameters<'t>(&self, tape: &'t Tape) -> Result<ParameterAssignment<DiffScalar<'t>>> {
        self.bind_with(|a, n, v| tape.parameter(param_id(a, n), v))
    }

    /// Continuous value by parameter id.
    pub fn value(&self, id: &str) -> Result<f64> {
        let (address, name) = parse_param_id(id).ok_or_else(|| Error::Usage(format!("malformed parameter id `{id}`")))?;
        self.cell(address)?.continuous(name)
    }

    /// Replaces a continuous value by parameter id.
    pub fn set_value(&mut self, id: &str, value: f64) -> Result<()> {
        let (address, name) = parse_param_id(id).ok_or_else(|| Error::Usage(format!("malformed parameter id `{id}`")))?;
        let cell = self
            .cells
            .get_mut(&address)
            .ok_or_else(|| Error::Assignment(format!("no parameters for cell {address}")))?;
        cell.continuous(name)?;
        cell.set(name, value);
        Ok(())
    }
}

/// Output of every module cell plus the final sound.
#[derive(Debug, Clone)]
pub struct RenderTrace<'t> {
    pub cells: BTreeMap<CellAddress, Signal<'t>>,
    pub output: Signal<'t>,
}

impl<'t> RenderTrace<'t> {
    pub fn cell(&self, address: CellAddress) -> Option<&Signal<'t>> {
        self.cells.get(&address)
    }
}

/// Renders every cell in ascending layer order and averages the final layer.
pub fn generate_signal<'t>(
    tape: &'t Tape,
    chain: &ChainSpec,
    assignment: &ParameterAssignment<DiffScalar<'t>>,
    config: &RenderConfig,
) -> Result<RenderTrace<'t>> {
    config.validate()?;
    chain.ensure_valid()?;
    assignment.validate(chain, config)?;
    let declared = chain.declared();
    let kinds: BTreeMap<CellAddress, Option<ModuleKind>> = declared.iter().copied().collect();
    let mut outputs: BTreeMap<CellAddress, Signal<'t>> = BTreeMap::new();
    let zeros = Signal::zeros(tape, config);
    for (address, kind) in &declared {
        let Some(kind) = *kind else { continue };
        let params = assignment.cell(*address)?;
        let inputs: Vec<(ModuleKind, Signal<'t>)> = chain
            .incoming(*address)
            .into_iter()
            .filter(|&i| assignment.connections[i])
            .map(|i| {
                let from = chain.connections[i].from;
                let signal = outputs.get(&from).cloned().unwrap_or_else(|| zeros.clone());
                (kinds[&from].unwrap_or(ModuleKind::Mix), signal)
            })
            .collect();
        let first = inputs.first().map(|(_, s)| s);
        let out = match kind {
            ModuleKind::Oscillator => modules::render_oscillator(tape, params, config)?,
            ModuleKind::Lfo => modules::render_lfo(tape, params, config)?,
            ModuleKind::FmOscillator => modules::render_fm_oscillator(params, first, config)?,
            ModuleKind::LowpassFilter => match first {
                Some(x) => modules::apply_lowpass(x, params, config)?,
                None => zeros.clone(),
            },
            ModuleKind::AmplitudeAdsr => match first {
                Some(x) => modules::apply_adsr(x, params, config)?,
                None => zeros.clone(),
            },
            ModuleKind::Mix => {
                if inputs.is_empty() {
                    zeros.clone()
                } else {
                    let signals: Vec<Signal<'t>> = inputs.iter().map(|(_, s)| s.clone()).collect();
                    modules::mix(&signals)?
                }
            }
            ModuleKind::Tremolo => {
                let lfo = inputs.iter().find(|(k, _)| *k == ModuleKind::Lfo).map(|(_, s)| s);
                let audio = inputs.iter().find(|(k, _)| *k != ModuleKind::Lfo).map(|(_, s)| s);
                match (audio, lfo) {
                    (Some(x), Some(l)) => modules::apply_tremolo(x, Some(l), params)?,
                    (Some(x), None) => x.clone(),
                    (None, _) => zeros.clone(),
                }
            }
        };
        outputs.insert(*address, out);
    }
    let finals = chain.final_cells();
    let last: Vec<Signal<'t>> = finals
        .iter()
        .map(|a| outputs.get(a).cloned().unwrap_or_else(|| zeros.clone()))
        .collect();
    let output = modules::mix(&last)?;
    Ok(RenderTrace { cells: outputs, output })
}

/// Probability that a generated connection is optional.
const RANDOM_OPTIONAL_PROBABILITY: f64 = 0.3;

/// A random valid chain of up to `max_layers` layers.
///
/// Layer 0 holds one to three generators. Every later layer holds one or
/// two processors wired to earlier cells within their arity limits; a
/// tremolo is only placed when an earlier LFO exists. Some connections are
/// optional.
pub fn random_chain(rng: &mut Rng, max_layers: usize) -> ChainSpec {
    let layers = 1 + rng::index(rng, max_layers.max(1));
    let mut chain = ChainSpec::new("random");
    let mut placed: Vec<(CellAddress, ModuleKind)> = Vec::new();
    let generators = [ModuleKind::Oscillator, ModuleKind::Lfo, ModuleKind::FmOscillator];
    let first = 1 + rng::index(rng, 3);
    for ch in 0..first {
        // The first generator always makes sound.
        let kind = if ch == 0 {
            ModuleKind::Oscillator
        } else {
            generators[rng::index(rng, generators.len())]
        };
        chain = chain.with_cell(ch, 0, Some(kind));
        placed.push((CellAddress::new(ch, 0), kind));
    }
    for layer in 1..layers {
        let audio: Vec<CellAddress> =
            placed.iter().filter(|(_, k)| *k != ModuleKind::Lfo).map(|(a, _)| *a).collect();
        let lfos: Vec<CellAddress> =
            placed.iter().filter(|(_, k)| *k == ModuleKind::Lfo).map(|(a, _)| *a).collect();
        let mut new_cells = Vec::new();
        for ch in 0..1 + rng::index(rng, 2) {
            let mut kinds = alloc::vec![
                ModuleKind::FmOscillator,
                ModuleKind::LowpassFilter,
                ModuleKind::AmplitudeAdsr,
                ModuleKind::Mix
            ];
            if !lfos.is_empty() {
                kinds.push(ModuleKind::Tremolo);
            }
            let kind = kinds[rng::index(rng, kinds.len())];
            let pick = |rng: &mut Rng, from: &[CellAddress]| from[rng::index(rng, from.len())];
            let inputs: Vec<CellAddress> = match kind {
                ModuleKind::FmOscillator => {
                    if rng::coin(rng) {
                        alloc::vec![placed[rng::index(rng, placed.len())].0]
                    } else {
                        Vec::new()
                    }
                }
                ModuleKind::LowpassFilter | ModuleKind::AmplitudeAdsr => alloc::vec![pick(rng, &audio)],
                ModuleKind::Mix => {
                    let a = pick(rng, &audio);
                    let b = pick(rng, &audio);
                    if a == b {
                        alloc::vec![a]
                    } else {
                        alloc::vec![a, b]
                    }
                }
                _ => alloc::vec![pick(rng, &lfos), pick(rng, &audio)],
            };
            let address = CellAddress::new(ch, layer);
            chain = chain.with_cell(ch, layer, Some(kind));
            for from in inputs {
                // Required inputs stay fixed so the chain always validates.
                let optional = matches!(kind, ModuleKind::FmOscillator | ModuleKind::Mix)
                    && rng::uniform(rng, 0.0, 1.0) < RANDOM_OPTIONAL_PROBABILITY;
                let kind = if optional { ConnectionKind::Optional } else { ConnectionKind::Fixed };
                chain = chain.with_connection((from.channel, from.layer), (ch, layer), kind);
            }
            new_cells.push((address, kind));
        }
        placed.extend(new_cells);
    }
    chain
}

/// Random on/off states of the optional connections plus the activation
/// switches they force.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub connections: Vec<bool>,
    /// Cells whose generator is unused and must be switched off.
    pub forced_off: BTreeSet<CellAddress>,
    /// FM cells without a resolved modulator (`fm_active` must be off).
    pub unmodulated: BTreeSet<CellAddress>,
}

/// Probability that an optional connection is kept.
pub const OPTIONAL_CONNECTION_PROBABILITY: f64 = 0.5;

/// Draws every optional connection independently and derives the
/// activation constraints the result implies.
pub fn resolve_optional(chain: &ChainSpec, rng: &mut Rng) -> Resolution {
    let connections: Vec<bool> = chain
        .connections
        .iter()
        .map(|c| c.kind == ConnectionKind::Fixed || rng::uniform(rng, 0.0, 1.0) < OPTIONAL_CONNECTION_PROBABILITY)
        .collect();
    resolution_for(chain, connections)
}

/// Activation constraints implied by fixed connection states.
pub fn resolution_for(chain: &ChainSpec, connections: Vec<bool>) -> Resolution {
    let finals = chain.final_cells();
    let mut forced_off = BTreeSet::new();
    let mut unmodulated = BTreeSet::new();
    for (address, kind) in chain.modules() {
        let has_output = finals.contains(&address)
            || chain
                .connections
                .iter()
                .zip(&connections)
                .any(|(c, on)| *on && c.from == address);
        if matches!(kind, ModuleKind::Oscillator | ModuleKind::Lfo) && !has_output {
            forced_off.insert(address);
        }
        if kind == ModuleKind::FmOscillator && !chain.incoming(address).into_iter().any(|i| connections[i]) {
            unmodulated.insert(address);
        }
    }
    Resolution {
        connections,
        forced_off,
        unmodulated,
    }
}
