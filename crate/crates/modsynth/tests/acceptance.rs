//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) and always exits 0 so that a
//! criterion known to be out of reach shows up as FAIL in the report
//! without masking the rest of the test suite. The hard assertions live in
//! the ordinary unit and integration tests.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use modsynth::{cli, csv, dataset as files, drivers, gradcheck};
use modsynth_core::chain::{generate_signal, parse_chain_file, random_chain, ChainSpec, ParameterAssignment};
use modsynth_core::experiments::{Distance, LossVariant};
use modsynth_core::losses::{self, CellSelection, LossConfig, Norm, ParamRole, ParameterTarget};
use modsynth_core::matcher::{match_sound, MatchProblem, OptimizerConfig, Schedule};
use modsynth_core::modules::{ParamKind, Scale, Waveform, SWITCH, WAVEFORMS};
use modsynth_core::spectral::{self, ProcessingKind};
use modsynth_core::{dataset, rng, CellAddress, RenderConfig, Tape};
use rayon::prelude::*;

type Outcome = Result<(bool, String), Box<dyn StdError + Send + Sync>>;

/// Seed shared by every randomised criterion.
const SEED: u64 = 1;

fn chains_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../chains")
}

fn load(name: &str) -> ChainSpec {
    let path = chains_dir().join(format!("{name}.chain"));
    parse_chain_file(&fs::read_to_string(&path).expect("bundled chain")).expect("valid bundled chain")
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

/// Criterion 1: autodiff against finite differences on every bundled chain.
fn gradients() -> Outcome {
    const POINTS: usize = 20;
    let started = Instant::now();
    let config = RenderConfig::default();
    let names = ["single_osc", "fm", "fig4", "basic", "optional"];
    let reports = names
        .par_iter()
        .map(|n| gradcheck::gradcheck_chain(&load(n), &config, POINTS, SEED).map(|rows| (*n, rows)))
        .collect::<Result<Vec<_>, _>>()?;
    let elapsed = started.elapsed();
    let mut worst = (0.0f64, String::new());
    let mut failed = Vec::new();
    let mut kinds = std::collections::BTreeSet::new();
    for (name, rows) in &reports {
        for row in rows {
            kinds.insert(format!("{}.{}", row.module.keyword(), row.id.rsplit('.').next().unwrap_or("")));
            if row.max_relative_error > worst.0 {
                worst = (row.max_relative_error, format!("{name}:{}", row.id));
            }
            if !row.passed(POINTS) {
                failed.push(format!("{name}:{} ({} pts, {:.1e})", row.id, row.points, row.max_relative_error));
            }
        }
    }
    let detail = format!(
        "{} module parameters, {POINTS} points each, worst {:.1e} at {}, {:.0?} (limit 300 s){}",
        kinds.len(),
        worst.0,
        worst.1,
        elapsed,
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    Ok((failed.is_empty() && within(elapsed, 300), detail))
}

/// Criterion 2: trend reproduction of the perturbation benchmark.
fn benchmark() -> Outcome {
    const TRIALS: u64 = 1000;
    let started = Instant::now();
    let config = RenderConfig::default();
    let variants = LossVariant::table();
    let mut acc: BTreeMap<(String, String, String, String), f64> = BTreeMap::new();
    for w in [Waveform::Square, Waveform::Saw] {
        for d in [Distance::Epsilon, Distance::Cents(300.0), Distance::Cents(600.0)] {
            for row in drivers::benchmark(w, d, &variants, TRIALS, SEED, &config)? {
                acc.insert(
                    (w.label().into(), row.variant.transform.name().into(), row.variant.processing.name().into(), d.label()),
                    row.accuracy,
                );
            }
        }
    }
    let elapsed = started.elapsed();
    let get = |w: &str, t: &str, p: &str, d: &str| acc[&(w.to_string(), t.to_string(), p.to_string(), d.to_string())];
    let chance = |x: f64| (0.40..=0.60).contains(&x);

    let eps: Vec<f64> = acc.iter().filter(|(k, _)| k.3 == "epsilon").map(|(_, v)| *v).collect();
    let a = eps.iter().all(|x| chance(*x));
    let (lo, hi) = eps.iter().fold((1.0f64, 0.0f64), |(l, h), x| (l.min(*x), h.max(*x)));

    let mut b = true;
    let mut b_detail = Vec::new();
    for w in ["square", "saw"] {
        for d in ["300", "600"] {
            let ct = get(w, "spectrogram", "cumsum-time", d);
            let id = get(w, "spectrogram", "identity", d);
            b &= ct > id;
            b_detail.push(format!("{w}/{d} {ct:.3}{}{id:.3}", if ct > id { ">" } else { "<=" }));
        }
    }
    let mut c = true;
    let mut c_detail = Vec::new();
    for w in ["square", "saw"] {
        for d in ["epsilon", "300", "600"] {
            let v = get(w, "mel", "identity", d);
            c &= chance(v);
            c_detail.push(format!("{w}/{d} {v:.3}"));
        }
    }
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    let detail = format!(
        "(a) {} eps in [{lo:.3}, {hi:.3}]; (b) {} CumsumTime vs Identity: {}; (c) {} mel+Identity: {}; {TRIALS} trials, {:.0?} (limit 1800 s)",
        mark(a),
        mark(b),
        b_detail.join(", "),
        mark(c),
        c_detail.join(", "),
        elapsed
    );
    Ok((a && b && c && within(elapsed, 1800), detail))
}

fn set_labels(a: &mut ParameterAssignment<f64>, address: CellAddress, pairs: &[(&str, &str, &'static [&'static str])]) {
    for (name, label, options) in pairs {
        a.cell_mut(address).set_label(name, label, options).expect("known label");
    }
}

/// Criterion 3: loss-surface shapes of the FM carrier and amplitude sweeps.
fn sweeps() -> Outcome {
    const POINTS: usize = 500;
    let started = Instant::now();
    let config = RenderConfig::default();
    let loss = LossConfig::output_only(1024, ProcessingKind::Identity, Norm::L2);

    let fm = load("fm");
    let mut truth = dataset::sample_assignment(&fm, &config, &mut rng::seeded(SEED));
    set_labels(&mut truth, CellAddress::new(0, 0), &[("waveform", "sine", WAVEFORMS), ("active", "on", SWITCH)]);
    set_labels(&mut truth, CellAddress::new(0, 1), &[("waveform", "sine", WAVEFORMS), ("fm_active", "on", SWITCH)]);
    let id = "0,1.freq_c";
    let grid = drivers::sweep_grid(&fm, &config, &truth, id, POINTS, 2.0)?;
    let fm_sweep = drivers::sweep(&fm, &truth, id, &grid, &loss, &config)?;
    let fm_truth = truth.value(id)?;
    let best = fm_sweep.argmin();
    let fm_ok = fm_sweep.local_minima >= 5 && fm_sweep.losses[best] == 0.0 && fm_sweep.grid[best] == fm_truth;

    let osc = load("single_osc");
    let mut truth = dataset::sample_assignment(&osc, &config, &mut rng::seeded(SEED));
    set_labels(&mut truth, CellAddress::new(0, 0), &[("active", "on", SWITCH)]);
    let id = "0,0.amp";
    let grid = drivers::sweep_grid(&osc, &config, &truth, id, POINTS, 2.0)?;
    let amp_sweep = drivers::sweep(&osc, &truth, id, &grid, &loss, &config)?;
    let amp_ok = amp_sweep.local_minima == 1 && amp_sweep.losses[amp_sweep.argmin()] == 0.0;

    let elapsed = started.elapsed();
    let detail = format!(
        "FM freq_c (truth {fm_truth:.1} Hz): {} strict minima, min {:e} at truth={}; amplitude: {} minimum; {:.0?} (limit 300 s)",
        fm_sweep.local_minima,
        fm_sweep.losses[best],
        fm_sweep.grid[best] == fm_truth,
        amp_sweep.local_minima,
        elapsed
    );
    Ok((fm_ok && amp_ok && within(elapsed, 300), detail))
}

/// Criterion 4: self-comparison identities and the plain-spectrogram identity.
fn identities() -> Outcome {
    const CHAINS: u64 = 50;
    let config = RenderConfig::new(16_000, 0.5)?;
    let ce_same = losses::categorical_cross_entropy(true, 2);
    let mut worst_excess = 0.0f64;
    let mut worst_plain = 0.0f64;
    for i in 0..CHAINS {
        let mut r = rng::stream(SEED, i);
        let chain = random_chain(&mut r, 4);
        let a = dataset::sample_assignment(&chain, &config, &mut r);
        let b = dataset::sample_assignment(&chain, &config, &mut r);
        let n_cat = ParameterTarget::new(a.clone())
            .terms(&chain, &config)
            .iter()
            .filter(|t| t.role == ParamRole::Categorical)
            .count();
        let bound = n_cat as f64 * ce_same + 1e-12;

        let tape = Tape::new();
        let bound_a = a.bind_constants(&tape);
        let trace = generate_signal(&tape, &chain, &bound_a, &config)?;
        let target = ParameterTarget::new(a.clone());
        let lp = losses::parameter_loss(&tape, &chain, &bound_a, &target, losses::RegressionKind::L1, &config)?;
        let lsc = losses::signal_chain_loss(&chain, &trace, &trace, &LossConfig::default())?;
        let combined = losses::combined_loss(lp, lsc, 1.0)?;
        let lsd = losses::log_spectral_distance(trace.output.values(), trace.output.values(), config.sample_rate, 1024)?;
        for v in [lp.value(), lsc.value(), combined.value(), lsd] {
            worst_excess = worst_excess.max(v - bound);
            if !(v <= bound) {
                return Ok((false, format!("chain {i}: self-comparison {v:e} exceeds {bound:e}")));
            }
        }

        let other = generate_signal(&tape, &chain, &b.bind_constants(&tape), &config)?;
        for norm in [Norm::L1, Norm::L2] {
            let cfg = LossConfig {
                cells: CellSelection::OutputOnly,
                ..LossConfig::output_only(1024, ProcessingKind::Identity, norm)
            };
            let chain_loss = losses::signal_chain_loss(&chain, &other, &trace, &cfg)?.value();
            let sx = spectral::stft_magnitude(&other.output, 1024, 256)?;
            let sy = spectral::stft_magnitude(&trace.output, 1024, 256)?;
            let diffs = sx.values.values().iter().zip(sy.values.values()).map(|(x, y)| x - y);
            let plain = match norm {
                Norm::L1 => diffs.map(f64::abs).sum::<f64>(),
                Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            };
            let rel = (chain_loss - plain).abs() / plain.abs().max(1.0);
            worst_plain = worst_plain.max(rel);
            if rel > 1e-9 {
                return Ok((false, format!("chain {i}: signal-chain loss {chain_loss} vs plain {plain}")));
            }
        }
    }
    Ok((
        true,
        format!(
            "{CHAINS} random chains: self-losses within the categorical floor (max excess {worst_excess:.1e}), plain spectrogram identity to {worst_plain:.1e} (limit 1e-9)"
        ),
    ))
}

/// Amplitude-only match of a sine at a random frequency; true on success.
fn amplitude_match(seed: u64, config: &RenderConfig) -> Result<bool, Box<dyn StdError + Send + Sync>> {
    let chain = load("single_osc");
    let mut r = rng::stream(SEED, 10_000 + seed);
    let amp = rng::uniform(&mut r, 0.05, 1.0);
    let freq = rng::log_uniform(&mut r, 100.0, 2000.0);
    let mut truth = dataset::sample_assignment(&chain, config, &mut r);
    truth.set_value("0,0.amp", amp)?;
    truth.set_value("0,0.freq", freq)?;
    set_labels(&mut truth, CellAddress::new(0, 0), &[("waveform", "sine", WAVEFORMS), ("active", "on", SWITCH)]);
    let target = dataset::render(&chain, config, &truth)?;
    let loss = LossConfig::output_only(512, ProcessingKind::Identity, Norm::L2);
    let mut problem = MatchProblem::new(chain, *config, loss, target).with_known_labels(&truth);
    problem.fixed.insert("0,0.freq".into(), freq);
    let opt = OptimizerConfig {
        steps: 500,
        restarts: 1,
        seed,
        ..OptimizerConfig::default()
    };
    let found = match_sound(problem, opt)?.best.value("0,0.amp")?;
    Ok((found - amp).abs() <= 0.01 * amp)
}

/// Parameter-loss-only match of the fig4 chain; worst error as a fraction of range.
fn parameter_match(config: &RenderConfig) -> Result<(f64, String), Box<dyn StdError + Send + Sync>> {
    let chain = load("fig4");
    let truth = dataset::sample_assignment(&chain, config, &mut rng::seeded(SEED));
    let target = dataset::render(&chain, config, &truth)?;
    let mut problem = MatchProblem::new(chain.clone(), *config, LossConfig::default(), target).with_known_labels(&truth);
    problem.target_params = Some(ParameterTarget::new(truth.clone()));
    let opt = OptimizerConfig {
        steps: 500,
        restarts: 1,
        seed: SEED,
        beta_schedule: Schedule::constant(0.0),
        ..OptimizerConfig::default()
    };
    let best = match_sound(problem, opt)?.best;
    let mut worst = (0.0f64, String::new());
    for (address, spec) in chain.continuous_parameters(config) {
        let ParamKind::Continuous { lo, hi, scale } = spec.kind else { continue };
        let id = modsynth_core::chain::param_id(address, spec.name);
        let hi = if spec.name == "cutoff" { hi.min(config.nyquist()) } else { hi };
        let range = if scale == Scale::Segment { config.grid_duration() } else { hi - lo };
        let err = (best.value(&id)? - truth.value(&id)?).abs() / range;
        if err > worst.0 {
            worst = (err, id);
        }
    }
    Ok(worst)
}

/// FM spectral-only match; recorded, not required.
fn fm_match(config: &RenderConfig) -> Result<f64, Box<dyn StdError + Send + Sync>> {
    let chain = load("fm");
    let mut truth = dataset::sample_assignment(&chain, config, &mut rng::seeded(SEED));
    set_labels(&mut truth, CellAddress::new(0, 0), &[("waveform", "sine", WAVEFORMS), ("active", "on", SWITCH)]);
    set_labels(&mut truth, CellAddress::new(0, 1), &[("waveform", "sine", WAVEFORMS), ("fm_active", "on", SWITCH)]);
    let target = dataset::render(&chain, config, &truth)?;
    let loss = LossConfig::output_only(1024, ProcessingKind::Identity, Norm::L1);
    let problem = MatchProblem::new(chain, *config, loss, target).with_known_labels(&truth);
    let opt = OptimizerConfig {
        steps: 300,
        restarts: 4,
        seed: SEED,
        ..OptimizerConfig::default()
    };
    let m = modsynth_core::matcher::Matcher::new(problem, opt)?;
    let best = drivers::run_match(&m)?.best;
    let t = truth.value("0,1.freq_c")?;
    Ok((best.value("0,1.freq_c")? - t).abs() / t)
}

/// Criterion 5: matching smoke tests.
fn matching() -> Outcome {
    const SEEDS: u64 = 100;
    let started = Instant::now();
    let config = RenderConfig::new(16_000, 0.25)?;
    let wins = (0..SEEDS)
        .into_par_iter()
        .map(|s| amplitude_match(s, &config))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|ok| *ok)
        .count();
    let (worst, worst_id) = parameter_match(&config)?;
    let fm = fm_match(&config)?;
    let ok = wins >= 95 && worst <= 0.01;
    let detail = format!(
        "amplitude within 1% for {wins}/{SEEDS} seeds (need 95); fig4 parameter-loss match worst {:.3}% of range at {worst_id} (limit 1%); FM spectral-only freq_c error {:.1}% (recorded, may fail); {:.0?}",
        worst * 100.0,
        fm * 100.0,
        started.elapsed()
    );
    Ok((ok, detail))
}

fn read_dir_bytes(dir: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path())?);
    }
    Ok(out)
}

/// Criterion 6: byte-identical reruns.
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let config = RenderConfig::new(16_000, 0.5)?;
    let chain = load("fig4");
    let text = fs::read_to_string(chains_dir().join("fig4.chain"))?;
    let mut checks = Vec::new();

    let (d1, d2) = (tmp.path().join("d1"), tmp.path().join("d2"));
    files::generate_dataset(&chain, &text, &config, 10, SEED, &d1)?;
    drivers::with_jobs(Some(3), || files::generate_dataset(&chain, &text, &config, 10, SEED, &d2))?;
    checks.push(("dataset", read_dir_bytes(&d1)? == read_dir_bytes(&d2)?));

    let a = dataset::sample_assignment(&chain, &config, &mut rng::seeded(7));
    let (w1, w2) = (tmp.path().join("r1.wav"), tmp.path().join("r2.wav"));
    cli::cmd_render(&chain, &config, &a, &w1, None)?;
    cli::cmd_render(&chain, &config, &dataset::sample_assignment(&chain, &config, &mut rng::seeded(7)), &w2, None)?;
    checks.push(("render", fs::read(&w1)? == fs::read(&w2)?));

    let loss = LossConfig::output_only(1024, ProcessingKind::Identity, Norm::L1);
    let grid = drivers::sweep_grid(&chain, &config, &a, "0,0.freq", 100, 2.0)?;
    let s1 = csv::sweep_csv(&drivers::sweep(&chain, &a, "0,0.freq", &grid, &loss, &config)?);
    let s2 = drivers::with_jobs(Some(2), || drivers::sweep(&chain, &a, "0,0.freq", &grid, &loss, &config))?;
    checks.push(("sweep", s1 == csv::sweep_csv(&s2)));

    let v = LossVariant::table();
    let bench = |jobs| {
        drivers::with_jobs(jobs, || drivers::benchmark(Waveform::Saw, Distance::Cents(300.0), &v, 200, SEED, &RenderConfig::default()))
    };
    checks.push(("benchmark", csv::bench_csv(&bench(None)?) == csv::bench_csv(&bench(Some(1))?)));

    let ok = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, detail))
}

/// Criterion 7: every malformed chain reports its documented violation.
fn validation() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/malformed");
    let mut total = 0;
    let mut wrong = Vec::new();
    let mut classes = std::collections::BTreeSet::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let text = fs::read_to_string(&path)?;
        let expect = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# expect: "))
            .ok_or_else(|| format!("{} lacks an expect header", path.display()))?;
        let (label, line) = match expect.split_once(" @ ") {
            Some((l, n)) => (l.trim(), Some(n.trim().parse::<usize>()?)),
            None => (expect.trim(), None),
        };
        total += 1;
        classes.insert(label.to_string());
        let chain = ChainSpec::parse_unchecked(&text)?;
        let found = chain.validate().iter().any(|v| v.label() == label && v.line() == line);
        if !found || chain.ensure_valid().is_ok() {
            wrong.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let required = ["backward connection", "cell occupied", "missing required input", "dangling endpoint"];
    let covered = required.iter().all(|r| classes.contains(*r));
    let detail = format!(
        "{} of {total} malformed chains report the documented violation and line; {} classes{}",
        total - wrong.len(),
        classes.len(),
        if wrong.is_empty() { String::new() } else { format!("; wrong: {}", wrong.join(", ")) }
    );
    Ok((total >= 20 && wrong.is_empty() && covered, detail))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient correctness", gradients),
        ("perturbation benchmark trends", benchmark),
        ("loss-surface sweeps", sweeps),
        ("loss identities", identities),
        ("matching smoke tests", matching),
        ("determinism", determinism),
        ("chain validation corpus", validation),
    ];
    let mut passed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        passed += ok as usize;
        println!("C{} {} {name}: {detail}", i + 1, if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {passed}/{} criteria pass", criteria.len());
}
