//! Run configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment. Keys are grouped
//! by dotted prefixes (`render.`, `loss.`, `optimizer.`, `match.`,
//! `paths.`). Lists are separated by commas or whitespace. Every key is
//! optional and defaults to the library default. See the README for the
//! full key list.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use modsynth_core::chain::parse_param_id;
use modsynth_core::losses::{CellSelection, LossConfig, Norm, RegressionKind, SignalPoint};
use modsynth_core::matcher::{Algorithm, OptimizerConfig, Schedule};
use modsynth_core::spectral::{ProcessingKind, Transform};
use modsynth_core::{CellAddress, RenderConfig};

use crate::error::{Error, Result};

/// Output locations and auxiliary inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    /// Ground-truth parameters (JSON) enabling the parameter loss.
    pub target_params: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Frozen values, known labels and connection states for a match run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSettings {
    pub fixed: BTreeMap<String, f64>,
    pub labels: BTreeMap<String, String>,
    pub connections: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub render: RenderConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub matching: MatchSettings,
    pub paths: Paths,
    /// Whether `loss.cells` appeared in the file.
    pub cells_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            matching: MatchSettings::default(),
            paths: Paths::default(),
            cells_explicit: false,
        }
    }
}

struct Ctx<'a> {
    path: &'a Path,
    line: usize,
    key: &'a str,
}

impl Ctx<'_> {
    fn err(&self, message: impl std::fmt::Display) -> Error {
        Error::Config {
            path: self.path.into(),
            line: self.line,
            message: format!("{}: {message}", self.key),
        }
    }

    fn parse<T: std::str::FromStr>(&self, value: &str, what: &str) -> Result<T> {
        value.parse().map_err(|_| self.err(format!("expected {what}, got `{value}`")))
    }

    fn bool(&self, value: &str) -> Result<bool> {
        match value {
            "true" | "on" | "yes" => Ok(true),
            "false" | "off" | "no" => Ok(false),
            _ => Err(self.err(format!("expected true or false, got `{value}`"))),
        }
    }

    fn schedule(&self, value: &str) -> Result<Schedule> {
        let items = list(value);
        if let [single] = items.as_slice() {
            if !single.contains(':') {
                return Ok(Schedule::constant(self.parse(single, "a number")?));
            }
        }
        let points = items
            .iter()
            .map(|item| {
                let (step, v) = item
                    .split_once(':')
                    .ok_or_else(|| self.err(format!("expected `step:value`, got `{item}`")))?;
                Ok((self.parse(step, "a step count")?, self.parse(v, "a number")?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Schedule(points))
    }
}

fn list(value: &str) -> Vec<&str> {
    value.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    /// Loads and validates a configuration file. Relative paths inside it
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.target_params, &mut cfg.paths.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses configuration text; `path` is used in error messages only.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut first_line: HashMap<&'static str, usize> = HashMap::new();
        let (mut sample_rate, mut duration) = (cfg.render.sample_rate, cfg.render.duration);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                path: path.into(),
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = Ctx { path, line, key };
            if key.is_empty() {
                return Err(ctx.err("empty key"));
            }
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(ctx.err(format!("already set on line {prev}")));
            }
            let section = key.split('.').next().unwrap_or("");
            for s in ["render", "loss", "optimizer"] {
                if section == s {
                    first_line.entry(s).or_insert(line);
                }
            }
            match key {
                "render.sample_rate" => sample_rate = ctx.parse(value, "a positive integer")?,
                "render.duration" => duration = ctx.parse(value, "a number of seconds")?,
                "loss.cells" => {
                    cfg.loss.cells = parse_cells(&ctx, value)?;
                    cfg.cells_explicit = true;
                }
                "loss.windows" => {
                    cfg.loss.windows = list(value)
                        .iter()
                        .map(|w| ctx.parse(w, "a window size"))
                        .collect::<Result<_>>()?
                }
                "loss.processings" => {
                    cfg.loss.processings = list(value)
                        .iter()
                        .map(|p| {
                            ProcessingKind::from_name(p).ok_or_else(|| {
                                ctx.err(format!(
                                    "unknown processing `{p}` (expected identity, log, cumsum-time or cumsum-freq)"
                                ))
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "loss.norm" => {
                    cfg.loss.norm = match value {
                        "l1" => Norm::L1,
                        "l2" => Norm::L2,
                        _ => return Err(ctx.err(format!("expected l1 or l2, got `{value}`"))),
                    }
                }
                "loss.transform" => {
                    cfg.loss.transform = Transform::from_name(value)
                        .ok_or_else(|| ctx.err(format!("expected spectrogram or mel, got `{value}`")))?
                }
                "loss.beta" => cfg.loss.beta = ctx.parse(value, "a number")?,
                "loss.regression" => {
                    cfg.loss.regression = match value {
                        "l1" => RegressionKind::L1,
                        "l2" => RegressionKind::L2,
                        _ => return Err(ctx.err(format!("expected l1 or l2, got `{value}`"))),
                    }
                }
                "loss.cumsum_normalize" => cfg.loss.cumsum_normalize = ctx.bool(value)?,
                "optimizer.steps" => cfg.optimizer.steps = ctx.parse(value, "a step count")?,
                "optimizer.learning_rate" => cfg.optimizer.learning_rate = ctx.parse(value, "a number")?,
                "optimizer.algorithm" => {
                    cfg.optimizer.algorithm = match value {
                        "adam" => Algorithm::Adam,
                        "gd" | "gradient_descent" => Algorithm::GradientDescent,
                        _ => return Err(ctx.err(format!("expected adam or gd, got `{value}`"))),
                    }
                }
                "optimizer.beta_schedule" => cfg.optimizer.beta_schedule = ctx.schedule(value)?,
                "optimizer.param_weight" => cfg.optimizer.param_weight = Some(ctx.schedule(value)?),
                "optimizer.restarts" => cfg.optimizer.restarts = ctx.parse(value, "a positive integer")?,
                "optimizer.seed" => cfg.optimizer.seed = ctx.parse(value, "an unsigned integer")?,
                "match.connections" => {
                    cfg.matching.connections =
                        Some(list(value).iter().map(|v| ctx.bool(v)).collect::<Result<_>>()?)
                }
                "paths.target_params" => cfg.paths.target_params = Some(PathBuf::from(value)),
                "paths.out_dir" => cfg.paths.out_dir = Some(PathBuf::from(value)),
                _ => {
                    if let Some(id) = key.strip_prefix("match.fixed.") {
                        check_id(&ctx, id)?;
                        cfg.matching.fixed.insert(id.into(), ctx.parse(value, "a number")?);
                    } else if let Some(id) = key.strip_prefix("match.label.") {
                        check_id(&ctx, id)?;
                        cfg.matching.labels.insert(id.into(), value.into());
                    } else {
                        return Err(ctx.err("unknown key"));
                    }
                }
            }
        }
        let section_err = |section: &'static str, e: modsynth_core::Error| Error::Config {
            path: path.into(),
            line: first_line.get(section).copied().unwrap_or(0),
            message: e.to_string(),
        };
        cfg.render = RenderConfig::new(sample_rate, duration).map_err(|e| section_err("render", e))?;
        cfg.loss.validate().map_err(|e| section_err("loss", e))?;
        cfg.optimizer.validate().map_err(|e| section_err("optimizer", e))?;
        Ok(cfg)
    }
}

fn check_id(ctx: &Ctx<'_>, id: &str) -> Result<()> {
    parse_param_id(id)
        .map(|_| ())
        .ok_or_else(|| ctx.err(format!("`{id}` is not a parameter id like `0,1.freq`")))
}

fn parse_cells(ctx: &Ctx<'_>, value: &str) -> Result<CellSelection> {
    match value {
        "all" => return Ok(CellSelection::AllModules),
        "output" => return Ok(CellSelection::OutputOnly),
        _ => {}
    }
    value
        .split_whitespace()
        .map(|item| match item {
            "output" => Ok(SignalPoint::Output),
            _ => CellAddress::parse(item)
                .map(SignalPoint::Cell)
                .ok_or_else(|| ctx.err(format!("expected `all`, `output` or cell addresses like `0,1`, got `{item}`"))),
        })
        .collect::<Result<Vec<_>>>()
        .map(CellSelection::Explicit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("run.cfg"))
    }

    #[test]
    fn empty_is_default() {
        assert_eq!(parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn full_file() {
        let cfg = parse(
            "render.sample_rate = 8000\nrender.duration = 0.5\n\
             loss.cells = output 0,1\nloss.windows = 512, 1024\nloss.processings = identity cumsum-time\n\
             loss.norm = l2\nloss.transform = mel\nloss.beta = 0.5\nloss.regression = l2\nloss.cumsum_normalize = true\n\
             optimizer.steps = 100\noptimizer.learning_rate = 0.01\noptimizer.algorithm = gd\n\
             optimizer.beta_schedule = 2000:0, 6000:1\noptimizer.param_weight = 0\noptimizer.restarts = 2\n\
             optimizer.seed = 5  # trailing comment\n\
             match.fixed.0,0.freq = 440\nmatch.label.0,0.waveform = sine\nmatch.connections = on off\n\
             paths.target_params = truth.json\n",
        )
        .unwrap();
        assert_eq!(cfg.render.sample_rate, 8000);
        assert_eq!(cfg.loss.cells, CellSelection::Explicit(vec![SignalPoint::Output, SignalPoint::Cell(CellAddress::new(0, 1))]));
        assert_eq!(cfg.loss.windows, vec![512, 1024]);
        assert_eq!(cfg.loss.processings, vec![ProcessingKind::Identity, ProcessingKind::CumsumTime]);
        assert_eq!(cfg.loss.transform, Transform::Mel);
        assert_eq!(cfg.optimizer.algorithm, Algorithm::GradientDescent);
        assert_eq!(cfg.optimizer.beta_schedule, Schedule(vec![(2000, 0.0), (6000, 1.0)]));
        assert_eq!(cfg.optimizer.param_weight, Some(Schedule::constant(0.0)));
        assert_eq!(cfg.optimizer.seed, 5);
        assert_eq!(cfg.matching.fixed["0,0.freq"], 440.0);
        assert_eq!(cfg.matching.labels["0,0.waveform"], "sine");
        assert_eq!(cfg.matching.connections, Some(vec![true, false]));
        assert_eq!(cfg.paths.target_params, Some(PathBuf::from("truth.json")));
    }

    #[test]
    fn errors_name_line_and_field() {
        let cases = [
            ("\nloss.norm = l3\n", 2, "loss.norm"),
            ("optimizer.steps = many\n", 1, "optimizer.steps"),
            ("bogus = 1\n", 1, "bogus"),
            ("loss.beta = 1\nloss.beta = 2\n", 2, "already set"),
            ("just words\n", 1, "key = value"),
            ("loss.windows = 300\n", 1, "loss.windows"),
            ("render.duration = 0.5\nrender.sample_rate = 0\n", 1, "sample"),
            ("match.fixed.freq = 3\n", 1, "parameter id"),
        ];
        for (text, line, needle) in cases {
            match parse(text) {
                Err(Error::Config { line: l, message, .. }) => {
                    assert_eq!(l, line, "{text}: {message}");
                    assert!(message.contains(needle), "{text}: {message}");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
