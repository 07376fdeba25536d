//! Linear-triangle FEM model of the EIT forward problem.
//!
//! Electrodes are point electrodes on single boundary nodes. The stiffness
//! matrix is grounded at electrode 0's node, factored once per conductivity
//! and reused for every drive and adjoint right-hand side.
//!
//! Sensitivities come from the adjoint identity
//! `dV/dsigma_e = -area_e * grad(u_d) . grad(w_m)`, with `u_d` the field of
//! drive `d` and `w_m` the field of a unit current on measurement pair `m`.

mod io;
mod protocol;
pub(crate) mod sparse;

pub use io::{load_voltages, save_voltages, ProtocolSpec};
pub use protocol::{Drive, MeasurementPair, StimulationProtocol, DEFAULT_AMPLITUDE, DEFAULT_ELECTRODES};
pub use sparse::CsrMatrix;

use crate::error::{Error, Result};
use crate::mesh::{cross2, Point, TriangleMesh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sparse::{Cholesky, Envelope};
use std::collections::HashMap;

/// Conductivity floor in S/m applied at assembly.
pub const SIGMA_MIN: f64 = 1e-6;

/// Relative residual every field solve must reach.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// Per-element conductivity in S/m.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField(Vec<f64>);

impl ConductivityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((e, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= SIGMA_MIN) || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "element {e} conductivity {v} is below {SIGMA_MIN} S/m or not finite"
            )));
        }
        Ok(ConductivityField(values))
    }

    /// Raises every value to at least [`SIGMA_MIN`].
    pub fn clamped(mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            *v = v.max(SIGMA_MIN);
        }
        Self::new(values)
    }

    pub fn uniform(len: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Measured or simulated voltages in drive-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageVector(pub Vec<f64>);

impl VoltageVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Gradient coefficients of the three linear basis functions, scaled by
/// twice the element area: `grad N_a = (b[a], c[a]) / (2 area)`.
#[derive(Debug, Clone, Copy)]
struct ElementGeometry {
    b: [f64; 3],
    c: [f64; 3],
    area: f64,
}

impl ElementGeometry {
    fn new([pi, pj, pm]: [Point; 3]) -> Result<Self> {
        let twice = cross2(pi, pj, pm);
        if twice == 0.0 || !twice.is_finite() {
            return Err(Error::Validation("degenerate triangle".into()));
        }
        Ok(ElementGeometry {
            b: [pj.y - pm.y, pm.y - pi.y, pi.y - pj.y],
            c: [pm.x - pj.x, pi.x - pm.x, pj.x - pi.x],
            area: 0.5 * twice.abs(),
        })
    }

    /// Conductivity-free element matrix `(b b^T + c c^T) / (4 area)`.
    fn kernel(&self) -> [[f64; 3]; 3] {
        let mut k = [[0.0; 3]; 3];
        let s = 4.0 * self.area;
        for a in 0..3 {
            for c in 0..3 {
                k[a][c] = (self.b[a] * self.b[c] + self.c[a] * self.c[c]) / s;
            }
        }
        k
    }

    /// `(sum b_a f_a, sum c_a f_a)` for nodal values `f`.
    fn project(&self, f: [f64; 3]) -> (f64, f64) {
        (
            self.b[0] * f[0] + self.b[1] * f[1] + self.b[2] * f[2],
            self.c[0] * f[0] + self.c[1] * f[1] + self.c[2] * f[2],
        )
    }
}

/// Element coefficient matrix of a linear triangle with conductivity `sigma_e`.
pub fn local_stiffness(vertices: [Point; 3], sigma_e: f64) -> Result<[[f64; 3]; 3]> {
    if !(sigma_e > 0.0) {
        return Err(Error::InvalidParameter(format!("conductivity must be positive, got {sigma_e}")));
    }
    let mut k = ElementGeometry::new(vertices)?.kernel();
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v *= sigma_e;
        }
    }
    Ok(k)
}

/// Grounded stiffness system.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub ground: usize,
}

/// Sparsity pattern plus, for every stored entry, the element contributions
/// in element order. Summing per entry keeps assembly deterministic for any
/// thread count.
#[derive(Debug, Clone)]
struct Pattern {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    contrib_ptr: Vec<usize>,
    /// `(element, 3 * local_row + local_col)`
    contribs: Vec<(u32, u8)>,
}

impl Pattern {
    fn new(mesh: &TriangleMesh) -> Self {
        let n = mesh.node_count();
        let mut per_row: Vec<Vec<(usize, u32, u8)>> = vec![Vec::new(); n];
        for (e, tri) in mesh.elements().iter().enumerate() {
            for a in 0..3 {
                for c in 0..3 {
                    per_row[tri[a]].push((tri[c], e as u32, (3 * a + c) as u8));
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut contrib_ptr = vec![0];
        let mut contribs = Vec::new();
        row_ptr.push(0);
        for mut row in per_row {
            // stable sort keeps element order within each column
            row.sort_by_key(|&(col, e, _)| (col, e));
            let mut i = 0;
            while i < row.len() {
                let col = row[i].0;
                col_idx.push(col);
                while i < row.len() && row[i].0 == col {
                    contribs.push((row[i].1, row[i].2));
                    i += 1;
                }
                contrib_ptr.push(contribs.len());
            }
            row_ptr.push(col_idx.len());
        }
        Pattern {
            row_ptr,
            col_idx,
            contrib_ptr,
            contribs,
        }
    }

    fn empty_matrix(&self) -> CsrMatrix {
        CsrMatrix {
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: vec![0.0; self.col_idx.len()],
        }
    }
}

/// Precomputed geometry, sparsity and ordering for one mesh and protocol.
#[derive(Debug, Clone)]
pub struct ForwardModel<'a> {
    mesh: &'a TriangleMesh,
    protocol: &'a StimulationProtocol,
    geometry: Vec<ElementGeometry>,
    kernels: Vec<[f64; 9]>,
    pattern: Pattern,
    envelope: Envelope,
    ground: usize,
    pairs: Vec<MeasurementPair>,
    pair_index: HashMap<MeasurementPair, usize>,
}

/// Fields computed for one conductivity: drive potentials, unit-current
/// adjoint potentials per measurement pair, and the resulting voltages.
#[derive(Debug, Clone)]
pub struct Solution {
    pub voltages: VoltageVector,
    pub drive_fields: Vec<Vec<f64>>,
    pub adjoint_fields: Vec<Vec<f64>>,
}

impl<'a> ForwardModel<'a> {
    pub fn new(mesh: &'a TriangleMesh, protocol: &'a StimulationProtocol) -> Result<Self> {
        if protocol.electrode_count() > mesh.electrodes().len() {
            return Err(Error::Validation(format!(
                "protocol uses {} electrodes but mesh defines {}",
                protocol.electrode_count(),
                mesh.electrodes().len()
            )));
        }
        let geometry = (0..mesh.element_count())
            .map(|e| ElementGeometry::new(mesh.vertices(e)))
            .collect::<Result<Vec<_>>>()?;
        let kernels = geometry
            .iter()
            .map(|g| {
                let k = g.kernel();
                [k[0][0], k[0][1], k[0][2], k[1][0], k[1][1], k[1][2], k[2][0], k[2][1], k[2][2]]
            })
            .collect();
        let pattern = Pattern::new(mesh);
        let envelope = Envelope::new(&pattern.empty_matrix());
        let pairs = protocol.unique_pairs();
        let pair_index = pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Ok(ForwardModel {
            mesh,
            protocol,
            geometry,
            kernels,
            pattern,
            envelope,
            ground: mesh.electrodes().first().copied().unwrap_or(0),
            pairs,
            pair_index,
        })
    }

    pub fn mesh(&self) -> &TriangleMesh {
        self.mesh
    }

    pub fn protocol(&self) -> &StimulationProtocol {
        self.protocol
    }

    pub fn ground(&self) -> usize {
        self.ground
    }

    fn check_sigma(&self, sigma: &ConductivityField) -> Result<()> {
        if sigma.len() != self.mesh.element_count() {
            return Err(Error::Shape(format!(
                "conductivity has {} values but mesh has {} elements",
                sigma.len(),
                self.mesh.element_count()
            )));
        }
        Ok(())
    }

    /// Stiffness matrix before grounding; singular with `A 1 = 0`.
    pub fn assemble_ungrounded(&self, sigma: &ConductivityField) -> Result<CsrMatrix> {
        self.check_sigma(sigma)?;
        let s = sigma.values();
        let p = &self.pattern;
        let values = (0..p.col_idx.len())
            .into_par_iter()
            .with_min_len(256)
            .map(|slot| {
                let mut acc = 0.0;
                for &(e, local) in &p.contribs[p.contrib_ptr[slot]..p.contrib_ptr[slot + 1]] {
                    let e = e as usize;
                    acc += s[e].max(SIGMA_MIN) * self.kernels[e][local as usize];
                }
                acc
            })
            .collect();
        Ok(CsrMatrix {
            row_ptr: p.row_ptr.clone(),
            col_idx: p.col_idx.clone(),
            values,
        })
    }

    pub fn assemble(&self, sigma: &ConductivityField) -> Result<SparseSystem> {
        let mut matrix = self.assemble_ungrounded(sigma)?;
        matrix.ground(self.ground);
        Ok(SparseSystem {
            matrix,
            ground: self.ground,
        })
    }

    /// Nodal current vectors of every drive.
    pub fn drive_currents(&self) -> Vec<Vec<f64>> {
        let electrodes = self.mesh.electrodes();
        self.protocol
            .drives()
            .iter()
            .map(|d| {
                let mut b = vec![0.0; self.mesh.node_count()];
                b[electrodes[d.source]] += d.amplitude;
                b[electrodes[d.sink]] -= d.amplitude;
                b
            })
            .collect()
    }

    /// Unit-current vectors of every distinct measurement pair.
    fn adjoint_currents(&self) -> Vec<Vec<f64>> {
        let electrodes = self.mesh.electrodes();
        self.pairs
            .iter()
            .map(|m| {
                let mut b = vec![0.0; self.mesh.node_count()];
                b[electrodes[m.positive]] += 1.0;
                b[electrodes[m.negative]] -= 1.0;
                b
            })
            .collect()
    }

    pub fn solve(&self, system: &SparseSystem, currents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        solve_with(&self.envelope, system, currents)
    }

    pub fn measure(&self, potentials: &[Vec<f64>]) -> VoltageVector {
        measure(self.mesh, potentials, self.protocol)
    }

    pub fn forward(&self, sigma: &ConductivityField) -> Result<VoltageVector> {
        let system = self.assemble(sigma)?;
        let fields = self.solve(&system, &self.drive_currents())?;
        Ok(self.measure(&fields))
    }

    /// Forward solve plus the adjoint fields needed for sensitivities.
    pub fn solve_with_adjoint(&self, sigma: &ConductivityField) -> Result<Solution> {
        let system = self.assemble(sigma)?;
        let mut rhs = self.drive_currents();
        let n_drives = rhs.len();
        rhs.extend(self.adjoint_currents());
        let mut fields = self.solve(&system, &rhs)?;
        let adjoint_fields = fields.split_off(n_drives);
        let voltages = self.measure(&fields);
        Ok(Solution {
            voltages,
            drive_fields: fields,
            adjoint_fields,
        })
    }

    /// Per-element `(sum b u, sum c u)` for a nodal field.
    fn projections(&self, field: &[f64]) -> Vec<(f64, f64)> {
        self.mesh
            .elements()
            .iter()
            .zip(&self.geometry)
            .map(|(tri, g)| g.project([field[tri[0]], field[tri[1]], field[tri[2]]]))
            .collect()
    }

    /// Full sensitivity matrix `dV/dsigma`, measurements by elements.
    pub fn jacobian(&self, solution: &Solution) -> DenseMatrix {
        let n_el = self.mesh.element_count();
        let du: Vec<Vec<(f64, f64)>> = solution.drive_fields.par_iter().map(|f| self.projections(f)).collect();
        let dw: Vec<Vec<(f64, f64)>> = solution.adjoint_fields.par_iter().map(|f| self.projections(f)).collect();
        let rows: Vec<(usize, usize)> = self
            .protocol
            .iter()
            .map(|(d, m)| (d, self.pair_index[&m]))
            .collect();
        let mut data = vec![0.0; rows.len() * n_el];
        data.par_chunks_mut(n_el).zip(&rows).for_each(|(row, &(d, m))| {
            for (e, out) in row.iter_mut().enumerate() {
                let (u, w) = (du[d][e], dw[m][e]);
                *out = -(u.0 * w.0 + u.1 * w.1) / (4.0 * self.geometry[e].area);
            }
        });
        DenseMatrix {
            rows: rows.len(),
            cols: n_el,
            data,
        }
    }

    /// `J^T r` without forming `J`.
    pub fn jacobian_transpose_mul(&self, solution: &Solution, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.protocol.measurement_count() {
            return Err(Error::Shape(format!(
                "residual has {} entries, protocol has {} measurements",
                r.len(),
                self.protocol.measurement_count()
            )));
        }
        let dw: Vec<Vec<(f64, f64)>> = solution.adjoint_fields.par_iter().map(|f| self.projections(f)).collect();
        let n_el = self.mesh.element_count();
        let mut out = vec![0.0; n_el];
        let mut offset = 0;
        for (d, field) in solution.drive_fields.iter().enumerate() {
            let pairs = self.protocol.measurements(d);
            let du = self.projections(field);
            // weighted sum of adjoint gradients for this drive
            let weights: Vec<(usize, f64)> = pairs
                .iter()
                .zip(&r[offset..offset + pairs.len()])
                .map(|(m, &rv)| (self.pair_index[m], rv))
                .collect();
            offset += pairs.len();
            for e in 0..n_el {
                let (mut wb, mut wc) = (0.0, 0.0);
                for &(m, rv) in &weights {
                    wb += rv * dw[m][e].0;
                    wc += rv * dw[m][e].1;
                }
                out[e] -= (du[e].0 * wb + du[e].1 * wc) / (4.0 * self.geometry[e].area);
            }
        }
        Ok(out)
    }
}

fn solve_with(envelope: &Envelope, system: &SparseSystem, currents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = system.matrix.dim();
    if let Some(b) = currents.iter().find(|b| b.len() != n) {
        return Err(Error::Shape(format!("current vector has {} entries, system has {n}", b.len())));
    }
    let chol = Cholesky::factor(envelope, &system.matrix)?;
    currents
        .par_iter()
        .map(|b| {
            let mut rhs = b.clone();
            rhs[system.ground] = 0.0;
            let norm_b = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm_b == 0.0 {
                return Ok(vec![0.0; n]);
            }
            let x = chol.solve(&rhs);
            let ax = system.matrix.mul_vec(&x);
            let res = ax.iter().zip(&rhs).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            if !(res / norm_b < SOLVE_TOLERANCE) {
                return Err(Error::Solver(format!(
                    "relative residual {:e} exceeds {SOLVE_TOLERANCE:e}",
                    res / norm_b
                )));
            }
            Ok(x)
        })
        .collect()
}

pub fn assemble(mesh: &TriangleMesh, sigma: &ConductivityField) -> Result<SparseSystem> {
    let protocol = StimulationProtocol::new(0, vec![], vec![])?;
    ForwardModel::new(mesh, &protocol)?.assemble(sigma)
}

/// Solves `A phi = b` for every current vector.
pub fn solve_fields(system: &SparseSystem, currents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let envelope = Envelope::new(&system.matrix);
    solve_with(&envelope, system, currents)
}

pub fn measure(mesh: &TriangleMesh, potentials: &[Vec<f64>], protocol: &StimulationProtocol) -> VoltageVector {
    let electrodes = mesh.electrodes();
    VoltageVector(
        protocol
            .iter()
            .map(|(d, m)| potentials[d][electrodes[m.positive]] - potentials[d][electrodes[m.negative]])
            .collect(),
    )
}

pub fn forward(mesh: &TriangleMesh, sigma: &ConductivityField, protocol: &StimulationProtocol) -> Result<VoltageVector> {
    ForwardModel::new(mesh, protocol)?.forward(sigma)
}

pub fn jacobian(mesh: &TriangleMesh, sigma: &ConductivityField, protocol: &StimulationProtocol) -> Result<DenseMatrix> {
    let model = ForwardModel::new(mesh, protocol)?;
    let solution = model.solve_with_adjoint(sigma)?;
    Ok(model.jacobian(&solution))
}

/// Adds white Gaussian noise at the given signal-to-noise ratio.
/// `f64::INFINITY` returns the input unchanged.
pub fn add_noise(v: &VoltageVector, snr_db: f64, seed: u64) -> Result<VoltageVector> {
    if snr_db == f64::INFINITY {
        return Ok(v.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    if v.is_empty() {
        return Ok(v.clone());
    }
    let rms = (v.0.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let std = rms * 10f64.powf(-snr_db / 20.0);
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(VoltageVector(v.0.iter().map(|x| x + normal.sample(&mut rng)).collect()))
}
