//! Conductivity CSV files and run reports.
//!
//! Reports hold everything that is reproducible for a seed (configuration,
//! loss histories); wall-clock timings are kept in a separate record so
//! repeated runs produce byte-identical reports.

use super::{ReconConfig, ReconResult};
use crate::error::{Error, Result};
use crate::forward::ConductivityField;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

const HEADER: &str = "element,sigma_s_per_m";

pub fn save_conductivity(sigma: &ConductivityField) -> String {
    let mut out = String::with_capacity(32 * sigma.len());
    out.push_str(HEADER);
    out.push('\n');
    for (e, s) in sigma.values().iter().enumerate() {
        writeln!(out, "{e},{s:.16e}").unwrap();
    }
    out
}

pub fn load_conductivity(text: &str) -> Result<ConductivityField> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(Error::parse(1, format!("expected header `{HEADER}`"))),
    }
    let mut values = Vec::new();
    for (i, line) in lines {
        let (idx, value) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(i + 1, "expected `element,sigma`"))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad element index `{}`", idx.trim())))?;
        if idx != values.len() {
            return Err(Error::parse(i + 1, format!("expected element {}, found {idx}", values.len())));
        }
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad conductivity `{}`", value.trim())))?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::Validation("conductivity file has no elements".into()));
    }
    ConductivityField::new(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub elements: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    pub iterations: usize,
    /// One entry per iteration, before that iteration's update.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub loss_history: Vec<f64>,
    /// Squared residual norm of the returned conductivity.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub stages: Vec<StageReport>,
}

impl ReconReport {
    /// Report of an unsupervised run; `final_losses` are the misfits of the
    /// per-stage output fields.
    pub fn unsupervised(config: &ReconConfig, result: &ReconResult, final_losses: &[f64]) -> Result<Self> {
        if final_losses.len() != result.stages.len() {
            return Err(Error::Shape(format!(
                "{} final losses for {} stages",
                final_losses.len(),
                result.stages.len()
            )));
        }
        Ok(ReconReport {
            method: "unsup".into(),
            seed: Some(config.seed),
            config: serde_json::to_value(config)?,
            stages: result
                .stages
                .iter()
                .zip(final_losses)
                .map(|(s, &final_loss)| StageReport {
                    elements: s.elements,
                    k: Some(s.k),
                    iterations: s.loss_history.len(),
                    loss_history: s.loss_history.clone(),
                    final_loss,
                })
                .collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stage_seconds: Vec<f64>,
}

impl TimingReport {
    pub fn of(result: &ReconResult) -> Self {
        TimingReport {
            stage_seconds: result.stages.iter().map(|s| s.wall_time_s).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conductivity_round_trip() {
        let sigma = ConductivityField::new(vec![1.5, 0.1 + 0.2, 1e-6, 123.456789012345678]).unwrap();
        let text = save_conductivity(&sigma);
        assert!(text.starts_with("element,sigma_s_per_m\n0,1.5000000000000000e0\n"));
        let back = load_conductivity(&text).unwrap();
        assert!(back.values().iter().zip(sigma.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupt_conductivity_is_rejected() {
        let ok = "element,sigma_s_per_m\n0,1.0\n1,2.0\n";
        assert!(load_conductivity(ok).is_ok());
        for bad in [
            "sigma\n0,1.0\n",
            "element,sigma_s_per_m\n0,1.0\n2,2.0\n",
            "element,sigma_s_per_m\n0,abc\n",
            "element,sigma_s_per_m\n0,-1.0\n",
            "element,sigma_s_per_m\n0,inf\n",
            "element,sigma_s_per_m\n",
            "element,sigma_s_per_m\n0;1.0\n",
        ] {
            assert!(load_conductivity(bad).is_err(), "{bad:?}");
        }
    }
}
