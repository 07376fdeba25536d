use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default injected current amplitude, 0.5 mA.
pub const DEFAULT_AMPLITUDE: f64 = 5e-4;
pub const DEFAULT_ELECTRODES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    pub source: usize,
    pub sink: usize,
    /// Current in amperes, entering at `source` and leaving at `sink`.
    pub amplitude: f64,
}

/// Differential voltage `phi[positive] - phi[negative]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MeasurementPair {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulationProtocol {
    electrode_count: usize,
    drives: Vec<Drive>,
    measurements: Vec<Vec<MeasurementPair>>,
}

impl StimulationProtocol {
    pub fn new(electrode_count: usize, drives: Vec<Drive>, measurements: Vec<Vec<MeasurementPair>>) -> Result<Self> {
        if drives.len() != measurements.len() {
            return Err(Error::Shape(format!(
                "{} drives but {} measurement lists",
                drives.len(),
                measurements.len()
            )));
        }
        for (d, (drive, pairs)) in drives.iter().zip(&measurements).enumerate() {
            if drive.source >= electrode_count || drive.sink >= electrode_count || drive.source == drive.sink {
                return Err(Error::Validation(format!("drive {d} has invalid electrodes {drive:?}")));
            }
            if !drive.amplitude.is_finite() {
                return Err(Error::Validation(format!("drive {d} amplitude is not finite")));
            }
            for m in pairs {
                if m.positive >= electrode_count || m.negative >= electrode_count || m.positive == m.negative {
                    return Err(Error::Validation(format!("drive {d} has invalid measurement {m:?}")));
                }
                let touches = [m.positive, m.negative]
                    .iter()
                    .any(|&e| e == drive.source || e == drive.sink);
                if touches {
                    return Err(Error::Validation(format!(
                        "drive {d} measurement {m:?} touches a current-carrying electrode"
                    )));
                }
            }
        }
        Ok(StimulationProtocol {
            electrode_count,
            drives,
            measurements,
        })
    }

    /// Adjacent drive `(i, i+1)` with adjacent measurements `(j, j+1)` on
    /// every pair not touching the drive electrodes: `L - 3` per drive.
    pub fn adjacent(electrode_count: usize, amplitude: f64) -> Result<Self> {
        if electrode_count < 4 {
            return Err(Error::InvalidParameter(format!(
                "adjacent protocol needs at least 4 electrodes, got {electrode_count}"
            )));
        }
        let l = electrode_count;
        let drives: Vec<Drive> = (0..l)
            .map(|i| Drive {
                source: i,
                sink: (i + 1) % l,
                amplitude,
            })
            .collect();
        let measurements = drives
            .iter()
            .map(|d| {
                (0..l)
                    .map(|j| MeasurementPair {
                        positive: j,
                        negative: (j + 1) % l,
                    })
                    .filter(|m| ![m.positive, m.negative].iter().any(|&e| e == d.source || e == d.sink))
                    .collect()
            })
            .collect();
        Self::new(l, drives, measurements)
    }

    pub fn electrode_count(&self) -> usize {
        self.electrode_count
    }

    pub fn drives(&self) -> &[Drive] {
        &self.drives
    }

    pub fn measurements(&self, drive: usize) -> &[MeasurementPair] {
        &self.measurements[drive]
    }

    /// Total number of voltages, drive-major.
    pub fn measurement_count(&self) -> usize {
        self.measurements.iter().map(Vec::len).sum()
    }

    /// Every `(drive, pair)` in drive-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, MeasurementPair)> + '_ {
        self.measurements
            .iter()
            .enumerate()
            .flat_map(|(d, pairs)| pairs.iter().map(move |&m| (d, m)))
    }

    /// Distinct measurement pairs in sorted order; one adjoint field each.
    pub fn unique_pairs(&self) -> Vec<MeasurementPair> {
        let mut pairs: Vec<MeasurementPair> = self.measurements.iter().flatten().copied().collect();
        pairs.sort();
        pairs.dedup();
        pairs
    }
}
