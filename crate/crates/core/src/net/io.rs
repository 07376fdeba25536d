//! `MREITNP1` parameter files and the JSON config sidecar.
//!
//! Layout: magic, u32 layer count, then per layer u32 out width, u32 in
//! width, row-major f64 weights and f64 biases, all little-endian.

use super::{Layer, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MREITNP1";

pub fn save_params(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * params.parameter_count() + 8 * params.layers.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        out.extend_from_slice(&(l.out_width as u32).to_le_bytes());
        out.extend_from_slice(&(l.in_width as u32).to_le_bytes());
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("parameter file truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(vals)
    }
}

pub fn load_params(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic, expected MREITNP1".into()));
    }
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let out_width = r.u32()?;
        let in_width = r.u32()?;
        let weight = r.f64s(out_width * in_width)?;
        let bias = r.f64s(out_width)?;
        layers.push(Layer {
            out_width,
            in_width,
            weight,
            bias,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    Ok(NetworkParams { layers })
}

pub fn save_config(config: &NetworkConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(config)?)
}

pub fn load_config(text: &str) -> Result<NetworkConfig> {
    let config: NetworkConfig = serde_json::from_str(text)?;
    config.validate()?;
    Ok(config)
}
