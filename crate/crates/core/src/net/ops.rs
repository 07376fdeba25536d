//! Per-point building blocks. Every output row depends only on its own
//! input row (or its neighbor multiset), computed in a fixed order, so
//! results are bitwise independent of point order and thread count.

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::forward::SIGMA_MIN;
use crate::mesh::NeighborIndex;
use rayon::prelude::*;

/// Points processed together so each matrix row is loaded once per tile.
const TILE: usize = 4;

/// `out[p] = init + sum_i x[p][i] * mat[i]` with `mat` stored `k x m`.
/// Zero entries of `x` are skipped (ReLU outputs are sparse).
pub(crate) fn rows_times(x: &[f64], k: usize, mat: &[f64], m: usize, init: Option<&[f64]>) -> Vec<f64> {
    let n = if k == 0 { 0 } else { x.len() / k };
    let mut out = vec![0.0; n * m];
    out.par_chunks_mut(TILE * m)
        .zip(x.par_chunks(TILE * k))
        .with_min_len(8)
        .for_each(|(out_tile, x_tile)| {
            if let Some(init) = init {
                for row in out_tile.chunks_mut(m) {
                    row.copy_from_slice(init);
                }
            }
            for i in 0..k {
                let mat_row = &mat[i * m..(i + 1) * m];
                for (row, xr) in out_tile.chunks_mut(m).zip(x_tile.chunks(k)) {
                    let s = xr[i];
                    if s != 0.0 {
                        for (o, w) in row.iter_mut().zip(mat_row) {
                            *o += s * w;
                        }
                    }
                }
            }
        });
    out
}

/// `weight` is `out x in`, `weight_t` its transpose. Returns pre-activations.
pub(crate) fn affine(features: &FeatureMatrix, weight_t: &[f64], bias: &[f64]) -> Result<FeatureMatrix> {
    let out_w = bias.len();
    if weight_t.len() != features.width * out_w {
        return Err(Error::Shape(format!(
            "weight has {} entries, expected {} x {}",
            weight_t.len(),
            out_w,
            features.width
        )));
    }
    Ok(FeatureMatrix {
        rows: features.rows,
        width: out_w,
        data: rows_times(&features.data, features.width, weight_t, out_w, Some(bias)),
    })
}

pub(crate) fn relu_in_place(m: &mut FeatureMatrix) {
    for v in m.data.iter_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
}

/// Shared per-point linear layer, `weight` given `out x in` row-major.
/// `activate` applies ReLU (all layers but the last).
pub fn pointwise_linear(features: &FeatureMatrix, weight: &[f64], bias: &[f64], activate: bool) -> Result<FeatureMatrix> {
    let out_w = bias.len();
    if weight.len() != out_w * features.width {
        return Err(Error::Shape(format!(
            "weight has {} entries, expected {out_w} x {}",
            weight.len(),
            features.width
        )));
    }
    let mut out = affine(features, &transpose(weight, out_w, features.width), bias)?;
    if activate {
        relu_in_place(&mut out);
    }
    Ok(out)
}

pub(crate) fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Concatenates each point's features with the elementwise max over its
/// neighbor set. Also returns, per pooled entry, the winning point index
/// (first neighbor in list order on ties).
pub(crate) fn fuse_with_argmax(features: &FeatureMatrix, neighbors: &NeighborIndex) -> Result<(FeatureMatrix, Vec<u32>)> {
    let (n, w) = (features.rows, features.width);
    if neighbors.len() != n {
        return Err(Error::Shape(format!(
            "neighbor index covers {} points, features have {n}",
            neighbors.len()
        )));
    }
    let mut data = vec![0.0; n * 2 * w];
    let mut argmax = vec![0u32; n * w];
    let mut bad = std::sync::atomic::AtomicBool::new(false);
    data.par_chunks_mut(2 * w)
        .zip(argmax.par_chunks_mut(w))
        .enumerate()
        .with_min_len(16)
        .for_each(|(p, (row, arg))| {
            let list = neighbors.of(p);
            if list.iter().any(|&q| q >= n) {
                bad.store(true, std::sync::atomic::Ordering::Relaxed);
                return;
            }
            row[..w].copy_from_slice(features.row(p));
            let first = list[0];
            row[w..].copy_from_slice(features.row(first));
            arg.fill(first as u32);
            for &q in &list[1..] {
                for ((best, a), &v) in row[w..].iter_mut().zip(arg.iter_mut()).zip(features.row(q)) {
                    if v > *best {
                        *best = v;
                        *a = q as u32;
                    }
                }
            }
        });
    if *bad.get_mut() {
        return Err(Error::Shape("neighbor index out of range".into()));
    }
    Ok((
        FeatureMatrix {
            rows: n,
            width: 2 * w,
            data,
        },
        argmax,
    ))
}

/// Local symmetric fusion: own features followed by the neighbor max.
pub fn fuse_local(features: &FeatureMatrix, neighbors: &NeighborIndex) -> Result<FeatureMatrix> {
    fuse_with_argmax(features, neighbors).map(|(m, _)| m)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output scale of the positivity map, S/m.
pub const SIGMA_SCALE: f64 = 1.0;

/// Maps raw network outputs to conductivities `softplus(raw) + SIGMA_MIN`.
pub fn output_map(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&r| softplus(r) * SIGMA_SCALE + SIGMA_MIN).collect()
}
