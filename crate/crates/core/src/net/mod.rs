//! Unordered coordinate feature network.
//!
//! A stack of shared per-point linear layers (kernel-size-1 convolutions)
//! with ReLU, interleaved with parameter-free local fusion blocks that
//! append the elementwise max over each point's k nearest neighbors. The
//! last layer emits one raw scalar per point which [`output_map`] turns into
//! a positive conductivity. Nothing depends on the number or order of the
//! points, so one parameter set evaluates on any mesh of the same domain.
//!
//! Reverse mode is written out by hand: [`net_forward`] records a
//! [`ForwardTrace`] and [`net_backward`] replays it.

mod io;
mod ops;

pub use io::{load_config, load_params, save_config, save_params};
pub use ops::{fuse_local, output_map, pointwise_linear, SIGMA_SCALE};

use crate::error::{Error, Result};
use crate::forward::ConductivityField;
use crate::mesh::{CentroidSet, NeighborIndex};
use ops::{affine, fuse_with_argmax, relu_in_place, rows_times, sigmoid, transpose};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Row-major per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * width {
            return Err(Error::Shape(format!("{} values for a {rows} x {width} matrix", data.len())));
        }
        Ok(FeatureMatrix { rows, width, data })
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.width..(p + 1) * self.width]
    }

    /// Two-column matrix of (x, y) coordinates.
    pub fn from_coords(coords: &CentroidSet) -> Self {
        FeatureMatrix {
            rows: coords.len(),
            width: 2,
            data: coords.coords.iter().flat_map(|p| [p.x, p.y]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// 2 for coordinates only, 11 for coordinates plus an unfolded 3x3 patch.
    pub input_channels: usize,
    /// Output width of every linear layer; the last must be 1.
    pub widths: Vec<usize>,
    /// A fusion block follows each listed layer index.
    pub fusion_positions: Vec<usize>,
    /// Neighbor count used when the network was configured. Evaluation takes
    /// k from the supplied neighbor index, so changing it needs no new weights.
    pub k: usize,
    pub seed: u64,
}

impl NetworkConfig {
    /// Two fusion blocks: [64, 64] -> fuse -> [128, 128] -> fuse -> [256, 128, 64, 1].
    pub fn default_unsupervised(k: usize, seed: u64) -> Self {
        NetworkConfig {
            input_channels: 2,
            widths: vec![64, 64, 128, 128, 256, 128, 64, 1],
            fusion_positions: vec![1, 3],
            k,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 2 && self.input_channels != 11 {
            return Err(Error::InvalidParameter(format!(
                "input channels must be 2 or 11, got {}",
                self.input_channels
            )));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter("layer widths must be non-empty and positive".into()));
        }
        if self.widths.last() != Some(&1) {
            return Err(Error::InvalidParameter("final layer width must be 1".into()));
        }
        if self.fusion_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("fusion positions must be strictly increasing".into()));
        }
        if self.fusion_positions.last().is_some_and(|&p| p + 1 >= self.widths.len()) {
            return Err(Error::InvalidParameter("fusion cannot follow the output layer".into()));
        }
        Ok(())
    }

    fn fused_after(&self, layer: usize) -> bool {
        self.fusion_positions.binary_search(&layer).is_ok()
    }

    /// `(out, in)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut input = self.input_channels;
        self.widths
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let shape = (out, input);
                input = if self.fused_after(i) { 2 * out } else { out };
                shape
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub out_width: usize,
    pub in_width: usize,
    /// `out_width x in_width`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

impl NetworkParams {
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    out_width: l.out_width,
                    in_width: l.in_width,
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    fn check(&self, config: &NetworkConfig) -> Result<()> {
        let shapes = config.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "config has {} layers, params have {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (i, (l, &(o, n))) in self.layers.iter().zip(&shapes).enumerate() {
            if l.out_width != o || l.in_width != n || l.weight.len() != o * n || l.bias.len() != o {
                return Err(Error::Shape(format!("layer {i} does not match config shape {o} x {n}")));
            }
        }
        Ok(())
    }
}

/// Uniform(-sqrt(6 / fan_in), sqrt(6 / fan_in)) weights, zero biases.
pub fn init_params(config: &NetworkConfig) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_shapes()
        .into_iter()
        .map(|(out, inp)| {
            let bound = (6.0 / inp as f64).sqrt();
            let dist = Uniform::new(-bound, bound);
            Layer {
                out_width: out,
                in_width: inp,
                weight: (0..out * inp).map(|_| dist.sample(&mut rng)).collect(),
                bias: vec![0.0; out],
            }
        })
        .collect();
    Ok(NetworkParams { layers })
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Matrix fed to each layer.
    pub inputs: Vec<FeatureMatrix>,
    /// Pre-activation output of each layer; the last holds the raw scalars.
    pub pre_activations: Vec<FeatureMatrix>,
    /// Winning point per pooled entry, for each layer followed by fusion.
    pub argmax: Vec<Option<Vec<u32>>>,
}

impl ForwardTrace {
    pub fn raw_output(&self) -> &[f64] {
        &self.pre_activations.last().expect("trace has layers").data
    }
}

/// Evaluates the network on per-point inputs (`input_channels` wide).
pub fn net_forward(
    config: &NetworkConfig,
    params: &NetworkParams,
    input: &FeatureMatrix,
    neighbors: &NeighborIndex,
) -> Result<(ConductivityField, ForwardTrace)> {
    config.validate()?;
    params.check(config)?;
    if input.width != config.input_channels {
        return Err(Error::Shape(format!(
            "input width {} does not match configured {} channels",
            input.width, config.input_channels
        )));
    }
    if neighbors.len() != input.rows {
        return Err(Error::Shape(format!(
            "neighbor index covers {} points, input has {}",
            neighbors.len(),
            input.rows
        )));
    }

    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut argmax = Vec::with_capacity(params.layers.len());
    let mut current = input.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let wt = transpose(&layer.weight, layer.out_width, layer.in_width);
        let pre = affine(&current, &wt, &layer.bias)?;
        inputs.push(std::mem::replace(&mut current, pre.clone()));
        pre_activations.push(pre);
        if i < last {
            relu_in_place(&mut current);
        }
        if config.fused_after(i) {
            let (fused, arg) = fuse_with_argmax(&current, neighbors)?;
            current = fused;
            argmax.push(Some(arg));
        } else {
            argmax.push(None);
        }
    }
    let sigma = ConductivityField::new(output_map(&current.data))?;
    Ok((
        sigma,
        ForwardTrace {
            inputs,
            pre_activations,
            argmax,
        },
    ))
}

/// Gradients of a scalar loss with respect to every weight and bias, given
/// the loss gradient with respect to each predicted conductivity.
pub fn net_backward(params: &NetworkParams, trace: &ForwardTrace, d_loss_d_sigma: &[f64]) -> Result<NetworkParams> {
    let n_layers = params.layers.len();
    if trace.inputs.len() != n_layers || trace.pre_activations.len() != n_layers {
        return Err(Error::Shape("trace does not match parameters".into()));
    }
    let raw = trace.raw_output();
    if d_loss_d_sigma.len() != raw.len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} points",
            d_loss_d_sigma.len(),
            raw.len()
        )));
    }
    let n = raw.len();
    let mut grads = params.zeros_like();

    // d sigma / d raw = SIGMA_SCALE * sigmoid(raw)
    let mut delta: Vec<f64> = raw
        .iter()
        .zip(d_loss_d_sigma)
        .map(|(&r, &g)| g * SIGMA_SCALE * sigmoid(r))
        .collect();

    for i in (0..n_layers).rev() {
        let layer = &params.layers[i];
        let (out_w, in_w) = (layer.out_width, layer.in_width);
        let x = &trace.inputs[i];

        if i + 1 < n_layers {
            // ReLU mask of this layer's output
            let pre = &trace.pre_activations[i].data;
            for (d, &z) in delta.iter_mut().zip(pre) {
                if !(z > 0.0) {
                    *d = 0.0;
                }
            }
        }

        let g = &mut grads.layers[i];
        accumulate_weight_grad(&delta, out_w, &x.data, in_w, n, &mut g.weight);
        for o in 0..out_w {
            g.bias[o] = (0..n).map(|p| delta[p * out_w + o]).sum();
        }

        if i == 0 {
            break;
        }
        let d_input = rows_times(&delta, out_w, &layer.weight, in_w, None);

        delta = match &trace.argmax[i - 1] {
            None => d_input,
            Some(arg) => {
                // fused input = [own | pooled]; route pooled gradient to argmax
                let w = in_w / 2;
                let mut d_prev = vec![0.0; n * w];
                for p in 0..n {
                    let src = &d_input[p * in_w..(p + 1) * in_w];
                    for c in 0..w {
                        d_prev[p * w + c] += src[c];
                    }
                    for c in 0..w {
                        let q = arg[p * w + c] as usize;
                        d_prev[q * w + c] += src[w + c];
                    }
                }
                d_prev
            }
        };
    }
    Ok(grads)
}

/// `grad[o][i] = sum_p delta[p][o] * x[p][i]`, summed over points in order.
fn accumulate_weight_grad(delta: &[f64], out_w: usize, x: &[f64], in_w: usize, n: usize, grad: &mut [f64]) {
    const BLOCK: usize = 8;
    grad.par_chunks_mut(BLOCK * in_w).enumerate().for_each(|(b, block)| {
        let o0 = b * BLOCK;
        for p in 0..n {
            let xr = &x[p * in_w..(p + 1) * in_w];
            for (j, row) in block.chunks_mut(in_w).enumerate() {
                let d = delta[p * out_w + o0 + j];
                if d != 0.0 {
                    for (g, &v) in row.iter_mut().zip(xr) {
                        *g += d * v;
                    }
                }
            }
        }
    });
}
