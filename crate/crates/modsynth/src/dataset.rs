//! Dataset directories: `chain.txt`, `metadata.jsonl` and one WAV per record.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use modsynth_core::chain::ChainSpec;
use modsynth_core::dataset::{self, DatasetRecord};
use modsynth_core::RenderConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{AssignmentJson, JsonValue};
use crate::wav;

pub const METADATA_FILE: &str = "metadata.jsonl";
pub const CHAIN_FILE: &str = "chain.txt";

/// One line of `metadata.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataLine {
    pub index: u64,
    pub seed: u64,
    pub file: String,
    pub connections: Vec<bool>,
    pub cells: BTreeMap<String, BTreeMap<String, JsonValue>>,
}

impl MetadataLine {
    pub fn from_record(record: &DatasetRecord) -> Self {
        let a = AssignmentJson::from_assignment(&record.assignment);
        Self {
            index: record.index,
            seed: record.seed,
            file: wav_name(record.index),
            connections: a.connections,
            cells: a.cells,
        }
    }

    pub fn assignment(&self) -> AssignmentJson {
        AssignmentJson {
            connections: self.connections.clone(),
            cells: self.cells.clone(),
        }
    }
}

pub fn wav_name(index: u64) -> String {
    format!("{index:06}.wav")
}

/// Writes `n` records of `chain` with master seed `seed` to `out_dir`.
///
/// `chain_text` is copied verbatim to `chain.txt`. Records render in
/// parallel; metadata is written in index order.
pub fn generate_dataset(
    chain: &ChainSpec,
    chain_text: &str,
    config: &RenderConfig,
    n: u64,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<DatasetRecord>> {
    chain.ensure_valid()?;
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let chain_path = out_dir.join(CHAIN_FILE);
    fs::write(&chain_path, chain_text).map_err(|e| Error::io(&chain_path, e))?;
    let results: Vec<Result<DatasetRecord>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let record = dataset::record(chain, config, seed, i);
            let samples = dataset::render(chain, config, &record.assignment)?;
            wav::write_wav(&out_dir.join(wav_name(i)), &samples, config.sample_rate)?;
            Ok(record)
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_err()).count();
    if failures > 0 {
        log::warn!("{failures} of {n} records failed; {} is incomplete", out_dir.display());
    }
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let meta_path = out_dir.join(METADATA_FILE);
    let mut file = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(&MetadataLine::from_record(r)).expect("metadata serializes"));
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(&meta_path, e))?;
    Ok(records)
}

/// Reads `metadata.jsonl` from a dataset directory.
pub fn read_metadata(dir: &Path) -> Result<Vec<MetadataLine>> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
