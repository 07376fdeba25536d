//! Conditional input path: externally produced pixel feature maps, 3x3
//! feature unfolding, and nearest-pixel sampling at element centroids.
//!
//! Feature maps use the `MREITFM1` binary layout: magic, then u32 C, H, W
//! (little-endian), then `C * H * W` little-endian f64 values, channel-major
//! then row-major.

use crate::error::{Error, Result};
use crate::mesh::CentroidSet;
use crate::net::FeatureMatrix;

const MAGIC: &[u8; 8] = b"MREITFM1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels < 1 || height < 3 || width < 3 {
            return Err(Error::Validation(format!(
                "feature map must be at least 1x3x3, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Validation(format!(
                "{} values for a {channels}x{height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[(c * self.height + i) * self.width + j]
    }
}

pub fn load_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic, expected MREITFM1".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("feature map dimensions overflow".into()))?;
    let payload = &bytes[20..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "header declares {c}x{h}x{w} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureMap::new(c, h, w, values)
}

pub fn save_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * map.values.len());
    out.extend_from_slice(MAGIC);
    for d in [map.channels, map.height, map.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// 3x3 feature unfold with zero padding. Output channel `block * C + c`
/// holds input channel `c` at offset `(l, m)`, `block = 3 (l + 1) + (m + 1)`.
pub fn unfold(map: &FeatureMap) -> FeatureMap {
    let (c_in, h, w) = (map.channels, map.height, map.width);
    let mut values = vec![0.0; 9 * c_in * h * w];
    for l in -1i64..=1 {
        for m in -1i64..=1 {
            let block = (3 * (l + 1) + (m + 1)) as usize;
            for c in 0..c_in {
                let out_c = block * c_in + c;
                for i in 0..h {
                    let si = i as i64 + l;
                    if si < 0 || si >= h as i64 {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as i64 + m;
                        if sj < 0 || sj >= w as i64 {
                            continue;
                        }
                        values[(out_c * h + i) * w + j] = map.at(c, si as usize, sj as usize);
                    }
                }
            }
        }
    }
    FeatureMap {
        channels: 9 * c_in,
        height: h,
        width: w,
        values,
    }
}

/// Per-point features sampled from an (unfolded) map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFeatures(pub FeatureMatrix);

/// Pixel index of a normalized coordinate: nearest pixel, halves rounded
/// away from zero, clamped to the grid.
pub fn pixel_index(coord: f64, size: usize) -> usize {
    let pos = ((coord + 1.0) / 2.0 * (size - 1) as f64).round();
    if pos.is_nan() || pos < 0.0 {
        0
    } else {
        (pos as usize).min(size - 1)
    }
}

/// Nearest-pixel lookup of every channel at each normalized centroid;
/// x selects the column and y the row.
pub fn sample_nearest(unfolded: &FeatureMap, coords: &CentroidSet) -> ConditionalFeatures {
    let c = unfolded.channels;
    let data = coords
        .coords
        .iter()
        .flat_map(|p| {
            let j = pixel_index(p.x, unfolded.width);
            let i = pixel_index(p.y, unfolded.height);
            (0..c).map(move |ch| unfolded.at(ch, i, j))
        })
        .collect();
    ConditionalFeatures(FeatureMatrix {
        rows: coords.len(),
        width: c,
        data,
    })
}

/// `(x', y', features[0..9])` per point.
pub fn assemble_conditional_input(coords: &CentroidSet, cond: &ConditionalFeatures) -> Result<FeatureMatrix> {
    let f = &cond.0;
    if f.width != 9 {
        return Err(Error::Shape(format!("conditional features must be 9 wide, got {}", f.width)));
    }
    if f.rows != coords.len() {
        return Err(Error::Shape(format!("{} feature rows for {} points", f.rows, coords.len())));
    }
    let data = coords
        .coords
        .iter()
        .enumerate()
        .flat_map(|(p, pt)| [pt.x, pt.y].into_iter().chain(f.row(p).iter().copied()))
        .collect();
    FeatureMatrix::new(coords.len(), 11, data)
}
