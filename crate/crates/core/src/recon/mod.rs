//! Reconstruction drivers.
//!
//! The unsupervised mode fits the point network so that the FEM voltages of
//! its predicted field match the measurements. It runs on a coarse mesh
//! first and then continues on a fine mesh of the same domain with the same
//! parameters; only the neighbor count changes between stages.
//!
//! The classical baselines are one-step linearized Tikhonov (`l2`) and
//! iterated regularized Gauss-Newton (`gn`).

mod adam;
mod baseline;
mod io;

pub use adam::Adam;
pub use io::{load_conductivity, save_conductivity, ReconReport, StageReport, TimingReport};
pub use baseline::{
    estimate_background, reconstruct_gauss_newton, reconstruct_l2, regularized_update, relative_lambda, solve_spd,
};

use crate::error::{Error, Result};
use crate::forward::{ConductivityField, ForwardModel, StimulationProtocol, VoltageVector};
use crate::mesh::{centroids, knn, normalize_coordinates, BoundingBox, TriangleMesh};
use crate::net::{init_params, net_backward, net_forward, FeatureMatrix, NetworkConfig, NetworkParams};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Tolerance on the node bounding boxes of the two stage meshes.
pub const BBOX_TOLERANCE: f64 = 1e-9;

/// Squared residual norm `sum (pred - meas)^2`.
pub fn loss(v_pred: &VoltageVector, v_meas: &VoltageVector) -> Result<f64> {
    if v_pred.len() != v_meas.len() {
        return Err(Error::Shape(format!(
            "{} predicted voltages vs {} measured",
            v_pred.len(),
            v_meas.len()
        )));
    }
    Ok(v_pred.0.iter().zip(&v_meas.0).map(|(p, m)| (p - m) * (p - m)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub iterations: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub step: f64,
    pub seed: u64,
    /// Stop a stage once the loss falls below this value.
    pub stop_loss: Option<f64>,
    /// Layer widths and fusion positions; `k` and `seed` are taken from the
    /// stage settings.
    pub widths: Vec<usize>,
    pub fusion_positions: Vec<usize>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        let net = NetworkConfig::default_unsupervised(16, 0);
        ReconConfig {
            stage1: StageConfig { iterations: 200, k: 16 },
            stage2: StageConfig { iterations: 50, k: 48 },
            step: 1e-3,
            seed: 0,
            stop_loss: None,
            widths: net.widths,
            fusion_positions: net.fusion_positions,
        }
    }
}

impl ReconConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            input_channels: 2,
            widths: self.widths.clone(),
            fusion_positions: self.fusion_positions.clone(),
            k: self.stage1.k,
            seed: self.seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {}", self.step)));
        }
        if self.stage1.iterations == 0 {
            return Err(Error::InvalidParameter("stage 1 needs at least one iteration".into()));
        }
        self.network().validate()
    }
}

/// Neighbor count for a second mesh, scaled with the square root of the
/// element-count ratio (16 on 636 elements gives 48 on 5696).
pub fn scaled_k(k1: usize, n1: usize, n2: usize) -> usize {
    ((k1 as f64) * (n2 as f64 / n1 as f64).sqrt()).round().max(1.0) as usize
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub params: NetworkParams,
    pub sigma: ConductivityField,
    /// Loss before each parameter update.
    pub loss_history: Vec<f64>,
    pub wall_time_s: f64,
    pub k: usize,
    pub elements: usize,
}

/// Per-mesh network inputs: normalized centroids and their neighbor lists.
struct StageInputs {
    features: FeatureMatrix,
    neighbors: crate::mesh::NeighborIndex,
}

impl StageInputs {
    fn new(mesh: &TriangleMesh, bbox: &BoundingBox, k: usize) -> Result<Self> {
        let coords = normalize_coordinates(&centroids(mesh), bbox)?;
        let neighbors = knn(&coords, k)?;
        Ok(StageInputs {
            features: FeatureMatrix::from_coords(&coords),
            neighbors,
        })
    }
}

/// Loss and parameter gradient at `params`, plus the predicted field.
pub fn loss_and_gradient(
    model: &ForwardModel,
    net: &NetworkConfig,
    params: &NetworkParams,
    features: &FeatureMatrix,
    neighbors: &crate::mesh::NeighborIndex,
    v_meas: &VoltageVector,
) -> Result<(f64, NetworkParams, ConductivityField)> {
    let (sigma, trace) = net_forward(net, params, features, neighbors)?;
    let solution = model.solve_with_adjoint(&sigma)?;
    let residual: Vec<f64> = solution.voltages.0.iter().zip(&v_meas.0).map(|(p, m)| p - m).collect();
    let value = loss(&solution.voltages, v_meas)?;
    let mut d_sigma = model.jacobian_transpose_mul(&solution, &residual)?;
    for g in d_sigma.iter_mut() {
        *g *= 2.0;
    }
    let grads = net_backward(params, &trace, &d_sigma)?;
    Ok((value, grads, sigma))
}

/// Fits `params` on one mesh with Adam. `bbox` fixes the coordinate
/// normalization so successive stages see the same coordinate frame.
#[allow(clippy::too_many_arguments)]
pub fn stage_optimize(
    mesh: &TriangleMesh,
    protocol: &StimulationProtocol,
    v_meas: &VoltageVector,
    net: &NetworkConfig,
    params: NetworkParams,
    iterations: usize,
    k: usize,
    step: f64,
    bbox: &BoundingBox,
    stop_loss: Option<f64>,
) -> Result<StageResult> {
    let mut adam = Adam::new(step, params.parameter_count());
    stage_optimize_with(mesh, protocol, v_meas, net, params, iterations, k, &mut adam, bbox, stop_loss)
}

/// [`stage_optimize`] continuing from an existing optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn stage_optimize_with(
    mesh: &TriangleMesh,
    protocol: &StimulationProtocol,
    v_meas: &VoltageVector,
    net: &NetworkConfig,
    params: NetworkParams,
    iterations: usize,
    k: usize,
    adam: &mut Adam,
    bbox: &BoundingBox,
    stop_loss: Option<f64>,
) -> Result<StageResult> {
    if adam.len() != params.parameter_count() {
        return Err(Error::Shape(format!(
            "optimizer state for {} parameters, network has {}",
            adam.len(),
            params.parameter_count()
        )));
    }
    if v_meas.len() != protocol.measurement_count() {
        return Err(Error::Shape(format!(
            "{} measured voltages for a protocol with {} measurements",
            v_meas.len(),
            protocol.measurement_count()
        )));
    }
    let start = Instant::now();
    let model = ForwardModel::new(mesh, protocol)?;
    let inputs = StageInputs::new(mesh, bbox, k)?;
    let mut params = params;
    let mut history = Vec::with_capacity(iterations);
    // Adam sees the gradient of the loss relative to the measurement energy;
    // raw gradients sit far below eps for voltages in the 1e-4 V range.
    let energy: f64 = v_meas.0.iter().map(|v| v * v).sum();
    let grad_scale = if energy > 0.0 && energy.is_finite() { 1.0 / energy } else { 1.0 };

    for it in 0..iterations {
        let (value, grads, _) = loss_and_gradient(&model, net, &params, &inputs.features, &inputs.neighbors, v_meas)
            .map_err(|e| match e {
                Error::Solver(msg) => Error::Numerical { iteration: it, msg },
                other => other,
            })?;
        if !value.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                msg: format!("loss is {value}"),
            });
        }
        history.push(value);
        if stop_loss.is_some_and(|tol| value < tol) {
            break;
        }
        let mut grads = grads;
        for g in grads.flat_mut() {
            *g *= grad_scale;
        }
        adam.step(&mut params, &grads);
    }

    let (sigma, _) = net_forward(net, &params, &inputs.features, &inputs.neighbors)?;
    Ok(StageResult {
        params,
        sigma,
        loss_history: history,
        wall_time_s: start.elapsed().as_secs_f64(),
        k,
        elements: mesh.element_count(),
    })
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub stages: Vec<StageResult>,
    pub params: NetworkParams,
}

impl ReconResult {
    pub fn final_sigma(&self) -> &ConductivityField {
        &self.stages.last().expect("at least one stage").sigma
    }
}

/// Two-stage reconstruction: coarse mesh from fresh parameters, then the
/// fine mesh continuing from the coarse-stage parameters.
pub fn reconstruct_unsupervised(
    coarse: &TriangleMesh,
    fine: &TriangleMesh,
    protocol: &StimulationProtocol,
    v_meas: &VoltageVector,
    config: &ReconConfig,
) -> Result<ReconResult> {
    config.validate()?;
    let bbox = coarse.bounding_box();
    let deviation = bbox.max_deviation(&fine.bounding_box());
    if !(deviation <= BBOX_TOLERANCE) {
        return Err(Error::Validation(format!(
            "coarse and fine meshes cover different domains (bounding boxes differ by {deviation:e})"
        )));
    }
    let net = config.network();
    let params = init_params(&net)?;
    // the optimizer state carries over with the parameters
    let mut adam = Adam::new(config.step, params.parameter_count());
    let first = stage_optimize_with(
        coarse,
        protocol,
        v_meas,
        &net,
        params,
        config.stage1.iterations,
        config.stage1.k,
        &mut adam,
        &bbox,
        config.stop_loss,
    )?;
    if config.stage2.iterations == 0 {
        let params = first.params.clone();
        return Ok(ReconResult {
            stages: vec![first],
            params,
        });
    }
    let second = stage_optimize_with(
        fine,
        protocol,
        v_meas,
        &net,
        first.params.clone(),
        config.stage2.iterations,
        config.stage2.k,
        &mut adam,
        &bbox,
        config.stop_loss,
    )?;
    let params = second.params.clone();
    Ok(ReconResult {
        stages: vec![first, second],
        params,
    })
}
