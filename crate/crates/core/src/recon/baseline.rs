use crate::error::{Error, Result};
use crate::forward::{ConductivityField, DenseMatrix, ForwardModel, StimulationProtocol, VoltageVector};
use crate::mesh::TriangleMesh;
use rayon::prelude::*;

/// Solves `A x = b` for a dense symmetric positive definite `n x n` matrix
/// (row-major) by Cholesky factorization.
pub fn solve_spd(mut a: Vec<f64>, n: usize, b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::Shape(format!("{}x{n} system with {} right-hand entries", a.len() / n.max(1), b.len())));
    }
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Solver(format!("normal equations not positive definite at row {j} (pivot {d:e})")));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= a[i * n + k] * x[k];
        }
        x[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= a[k * n + i] * x[k];
        }
        x[i] = s / a[i * n + i];
    }
    Ok(x)
}

/// `(J^T J + lambda I)^-1 J^T r`. When there are fewer measurements than
/// unknowns the equivalent `J^T (J J^T + lambda I)^-1 r` is solved instead.
pub fn regularized_update(j: &DenseMatrix, r: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let (m, n) = (j.rows, j.cols);
    if r.len() != m {
        return Err(Error::Shape(format!("{} residuals for a {m}-row Jacobian", r.len())));
    }
    if n <= m {
        let mut a = vec![0.0; n * n];
        a.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
            for (q, v) in row.iter_mut().enumerate() {
                *v = (0..m).map(|i| j.get(i, p) * j.get(i, q)).sum::<f64>();
            }
            row[p] += lambda;
        });
        let rhs: Vec<f64> = (0..n).map(|p| (0..m).map(|i| j.get(i, p) * r[i]).sum()).collect();
        solve_spd(a, n, &rhs)
    } else {
        let mut a = vec![0.0; m * m];
        a.par_chunks_mut(m).enumerate().for_each(|(p, row)| {
            let jp = j.row(p);
            for (q, v) in row.iter_mut().enumerate() {
                *v = jp.iter().zip(j.row(q)).map(|(x, y)| x * y).sum();
            }
            row[p] += lambda;
        });
        let y = solve_spd(a, m, r)?;
        let mut dx = vec![0.0; n];
        for (i, yi) in y.iter().enumerate() {
            for (d, ji) in dx.iter_mut().zip(j.row(i)) {
                *d += ji * yi;
            }
        }
        Ok(dx)
    }
}

/// Best-fitting homogeneous conductivity. Voltages scale as `1/sigma`, so
/// with `u = U(1)` the least-squares value is `(u.u) / (u.v)`.
pub fn estimate_background(mesh: &TriangleMesh, protocol: &StimulationProtocol, v_meas: &VoltageVector) -> Result<f64> {
    let model = ForwardModel::new(mesh, protocol)?;
    check_len(protocol, v_meas)?;
    let u = model.forward(&ConductivityField::uniform(mesh.element_count(), 1.0)?)?;
    let uu: f64 = u.0.iter().map(|a| a * a).sum();
    let uv: f64 = u.0.iter().zip(&v_meas.0).map(|(a, b)| a * b).sum();
    let s = uu / uv;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Validation(
            "measurements are not consistent with any positive homogeneous conductivity".into(),
        ));
    }
    Ok(s)
}

fn check_len(protocol: &StimulationProtocol, v_meas: &VoltageVector) -> Result<()> {
    if v_meas.len() != protocol.measurement_count() {
        return Err(Error::Shape(format!(
            "{} measured voltages for a protocol with {} measurements",
            v_meas.len(),
            protocol.measurement_count()
        )));
    }
    Ok(())
}

fn gauss_newton_step(model: &ForwardModel, sigma: &ConductivityField, v_meas: &VoltageVector, lambda: f64) -> Result<Vec<f64>> {
    let solution = model.solve_with_adjoint(sigma)?;
    let r: Vec<f64> = v_meas.0.iter().zip(&solution.voltages.0).map(|(m, u)| m - u).collect();
    let j = model.jacobian(&solution);
    regularized_update(&j, &r, lambda)
}

/// Regularized Gauss-Newton from a uniform `background`, clamping to the
/// conductivity floor after every step.
pub fn reconstruct_gauss_newton(
    mesh: &TriangleMesh,
    protocol: &StimulationProtocol,
    v_meas: &VoltageVector,
    lambda: f64,
    iterations: usize,
    background: f64,
) -> Result<ConductivityField> {
    if iterations == 0 {
        return Err(Error::InvalidParameter("Gauss-Newton needs at least one iteration".into()));
    }
    check_len(protocol, v_meas)?;
    let model = ForwardModel::new(mesh, protocol)?;
    let mut sigma = ConductivityField::uniform(mesh.element_count(), background)?;
    for it in 0..iterations {
        let dx = gauss_newton_step(&model, &sigma, v_meas, lambda).map_err(|e| match e {
            Error::Solver(msg) => Error::Numerical { iteration: it, msg },
            other => other,
        })?;
        let next: Vec<f64> = sigma.values().iter().zip(&dx).map(|(s, d)| s + d).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                msg: "non-finite conductivity update".into(),
            });
        }
        sigma = ConductivityField::clamped(next)?;
    }
    Ok(sigma)
}

/// One-step linearized Tikhonov reconstruction around `background`.
pub fn reconstruct_l2(
    mesh: &TriangleMesh,
    protocol: &StimulationProtocol,
    v_meas: &VoltageVector,
    lambda: f64,
    background: f64,
) -> Result<ConductivityField> {
    reconstruct_gauss_newton(mesh, protocol, v_meas, lambda, 1, background)
}

/// `alpha` times the largest diagonal entry of `J^T J` at `background`, a
/// scale-aware choice for the absolute regularization weight.
pub fn relative_lambda(mesh: &TriangleMesh, protocol: &StimulationProtocol, background: f64, alpha: f64) -> Result<f64> {
    let model = ForwardModel::new(mesh, protocol)?;
    let solution = model.solve_with_adjoint(&ConductivityField::uniform(mesh.element_count(), background)?)?;
    let j = model.jacobian(&solution);
    let max_diag = (0..j.cols)
        .map(|p| (0..j.rows).map(|i| j.get(i, p).powi(2)).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(alpha * max_diag)
}
