//! CSV export of sweeps and benchmark rows.
//!
//! Floats are written in Rust's shortest round-trip form, so parsing a file
//! back reproduces the in-memory values exactly.

use std::fmt::Write as _;
use std::path::Path;

use modsynth_core::experiments::{BenchmarkRow, SweepResult};

use crate::error::{Error, Result};

pub const SWEEP_HEADER: &str = "param_value,loss";
pub const BENCH_HEADER: &str = "waveform,transform,processing,distance,trials,accuracy";

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (v, l) in result.grid.iter().zip(&result.losses) {
        writeln!(out, "{v},{l}").expect("write to string");
    }
    out
}

pub fn bench_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.waveform.label(),
            r.variant.transform.name(),
            r.variant.processing.name(),
            r.distance.label(),
            r.trials,
            r.accuracy
        )
        .expect("write to string");
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Parses a sweep CSV into `(param_value, loss)` pairs.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(format!("expected header `{SWEEP_HEADER}`"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let (a, b) = l.split_once(',').ok_or_else(|| format!("line {}: expected two columns", i + 2))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: bad number `{s}`", i + 2));
            Ok((num(a)?, num(b)?))
        })
        .collect()
}

/// Parses a benchmark CSV into its string columns.
pub fn parse_bench_csv(text: &str) -> Result<Vec<[String; 6]>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(BENCH_HEADER) {
        return Err(format!("expected header `{BENCH_HEADER}`"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let cols: Vec<String> = l.split(',').map(String::from).collect();
            cols.try_into().map_err(|_| format!("line {}: expected six columns", i + 2))
        })
        .collect()
}
