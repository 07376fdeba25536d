//! Voltage files: CSV `drive,m_plus,m_minus,volts` in drive-major order,
//! with a JSON sidecar naming the electrode count and drive amplitude of the
//! adjacent protocol that produced them.

use super::{MeasurementPair, StimulationProtocol, VoltageVector};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

const HEADER: &str = "drive,m_plus,m_minus,volts";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub electrode_count: usize,
    /// Drive current in amperes.
    pub amplitude: f64,
}

impl ProtocolSpec {
    pub fn of(protocol: &StimulationProtocol) -> Self {
        ProtocolSpec {
            electrode_count: protocol.electrode_count(),
            amplitude: protocol.drives().first().map_or(0.0, |d| d.amplitude),
        }
    }

    pub fn protocol(&self) -> Result<StimulationProtocol> {
        if !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Validation(format!("drive amplitude must be positive, got {}", self.amplitude)));
        }
        StimulationProtocol::adjacent(self.electrode_count, self.amplitude)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn save_voltages(protocol: &StimulationProtocol, v: &VoltageVector) -> Result<String> {
    if v.len() != protocol.measurement_count() {
        return Err(Error::Shape(format!(
            "{} voltages for {} measurements",
            v.len(),
            protocol.measurement_count()
        )));
    }
    let mut out = String::with_capacity(40 * v.len());
    out.push_str(HEADER);
    out.push('\n');
    for ((d, m), volts) in protocol.iter().zip(&v.0) {
        writeln!(out, "{d},{},{},{volts:.16e}", m.positive, m.negative).unwrap();
    }
    Ok(out)
}

/// Reads a voltage file, checking every row against `protocol`'s canonical
/// order.
pub fn load_voltages(text: &str, protocol: &StimulationProtocol) -> Result<VoltageVector> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(Error::parse(1, format!("expected header `{HEADER}`"))),
    }
    let mut expected = protocol.iter();
    let mut values = Vec::with_capacity(protocol.measurement_count());
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(i + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(i + 1, format!("bad index `{s}`")));
        let (d, plus, minus) = (int(fields[0])?, int(fields[1])?, int(fields[2])?);
        let volts: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad voltage `{}`", fields[3])))?;
        if !volts.is_finite() {
            return Err(Error::parse(i + 1, "voltage is not finite"));
        }
        let row = (
            d,
            MeasurementPair {
                positive: plus,
                negative: minus,
            },
        );
        match expected.next() {
            Some(want) if want == row => values.push(volts),
            Some(want) => {
                return Err(Error::parse(
                    i + 1,
                    format!(
                        "expected drive {} pair ({}, {}), found drive {d} pair ({plus}, {minus})",
                        want.0, want.1.positive, want.1.negative
                    ),
                ))
            }
            None => return Err(Error::parse(i + 1, "more rows than the protocol has measurements")),
        }
    }
    if values.len() != protocol.measurement_count() {
        return Err(Error::Validation(format!(
            "{} voltage rows, protocol has {} measurements",
            values.len(),
            protocol.measurement_count()
        )));
    }
    Ok(VoltageVector(values))
}
