//! JSON form of parameter assignments.
//!
//! ```json
//! {"connections": [true, false],
//!  "cells": {"0,0": {"amp": 0.5, "freq": 440.0, "waveform": "sine", "active": "on"}}}
//! ```

use std::collections::BTreeMap;

use modsynth_core::chain::{ChainSpec, ParameterAssignment};
use modsynth_core::modules::{ParamKind, ParamValue};
use modsynth_core::{CellAddress, Error, RenderConfig, Result};
use serde::{Deserialize, Serialize};

/// A continuous value or a categorical label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JsonValue {
    Number(f64),
    Label(String),
}

/// Serializable assignment: connection states plus per-cell values keyed by
/// `"channel,layer"` and catalog parameter name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssignmentJson {
    pub connections: Vec<bool>,
    pub cells: BTreeMap<String, BTreeMap<String, JsonValue>>,
}

impl AssignmentJson {
    pub fn from_assignment(a: &ParameterAssignment<f64>) -> Self {
        let cells = a
            .cells
            .iter()
            .map(|(address, params)| {
                let values = params
                    .iter()
                    .map(|(name, v)| {
                        let v = match v {
                            ParamValue::Continuous(x) => JsonValue::Number(*x),
                            ParamValue::Label(l) => JsonValue::Label((*l).into()),
                        };
                        (name.to_string(), v)
                    })
                    .collect();
                (address.to_string(), values)
            })
            .collect();
        Self {
            connections: a.connections.clone(),
            cells,
        }
    }

    /// Checked conversion against `chain`'s catalogs.
    pub fn to_assignment(&self, chain: &ChainSpec, config: &RenderConfig) -> Result<ParameterAssignment<f64>> {
        let mut a = ParameterAssignment::new(self.connections.clone());
        for (key, values) in &self.cells {
            let address =
                CellAddress::parse(key).ok_or_else(|| Error::Assignment(format!("malformed cell address `{key}`")))?;
            let kind = chain
                .cell(address)
                .flatten()
                .ok_or_else(|| Error::Assignment(format!("cell {address} holds no module")))?;
            let catalog = kind.catalog(config);
            let cell = a.cell_mut(address);
            for (name, v) in values {
                let spec = catalog
                    .iter()
                    .find(|s| s.name == name)
                    .ok_or_else(|| Error::Assignment(format!("{kind} has no parameter `{name}`")))?;
                match (&spec.kind, v) {
                    (ParamKind::Continuous { .. }, JsonValue::Number(x)) => {
                        cell.set(name, *x);
                    }
                    (ParamKind::Categorical { options }, JsonValue::Label(l)) => {
                        cell.set_label(name, l, options)?;
                    }
                    (ParamKind::Continuous { .. }, JsonValue::Label(_)) => {
                        return Err(Error::Assignment(format!("{address}.{name} must be a number")))
                    }
                    (ParamKind::Categorical { .. }, JsonValue::Number(_)) => {
                        return Err(Error::Assignment(format!("{address}.{name} must be a label")))
                    }
                }
            }
        }
        // Modules without parameters may be left out of the document.
        for (address, kind) in chain.modules() {
            if kind.catalog(config).is_empty() {
                a.cell_mut(address);
            }
        }
        a.validate(chain, config)?;
        Ok(a)
    }
}

/// Parses an assignment document and validates it against `chain`.
pub fn parse_assignment(text: &str, chain: &ChainSpec, config: &RenderConfig) -> Result<ParameterAssignment<f64>> {
    let doc: AssignmentJson =
        serde_json::from_str(text).map_err(|e| Error::Assignment(format!("invalid parameter JSON: {e}")))?;
    doc.to_assignment(chain, config)
}

pub fn assignment_to_string(a: &ParameterAssignment<f64>) -> String {
    serde_json::to_string_pretty(&AssignmentJson::from_assignment(a)).expect("assignment serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use modsynth_core::chain::parse_chain_file;
    use modsynth_core::{dataset, rng};

    const CHAIN: &str = "chain t\ncell 0 0 osc\ncell 0 1 adsr\nconnect 0,0 -> 0,1 optional\n";

    #[test]
    fn round_trip() {
        let chain = parse_chain_file(CHAIN).unwrap();
        let config = RenderConfig::default();
        let a = dataset::sample_assignment(&chain, &config, &mut rng::seeded(3));
        let text = assignment_to_string(&a);
        assert_eq!(parse_assignment(&text, &chain, &config).unwrap(), a);
    }

    #[test]
    fn rejects_bad_values() {
        let chain = parse_chain_file(CHAIN).unwrap();
        let config = RenderConfig::default();
        let bad = [
            r#"{"connections":[true],"cells":{"0,0":{"amp":"x"}}}"#,
            r#"{"connections":[true],"cells":{"5,5":{}}}"#,
            r#"{"connections":[true],"cells":{"0,0":{"nope":1}}}"#,
            r#"{"connections":[true],"cells":{"0,0":{"amp":0.5,"freq":440,"waveform":"tri","active":"on"}}}"#,
            r#"{"connections":[true]}"#,
            "not json",
        ];
        for b in bad {
            assert!(parse_assignment(b, &chain, &config).is_err(), "{b}");
        }
    }
}
