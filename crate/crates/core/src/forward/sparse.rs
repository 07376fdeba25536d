//! Symmetric sparse storage and an envelope (skyline) Cholesky solver.
//!
//! The FEM matrix is refactored on every reconstruction iteration, so the
//! solver is a direct factorization over a reverse Cuthill-McKee ordering.
//! The ordering depends only on the sparsity pattern and is computed once
//! per mesh.

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Square matrix in compressed sparse row form, both triangles stored,
/// column indices sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub(crate) row_ptr: Vec<usize>,
    pub(crate) col_idx: Vec<usize>,
    pub(crate) values: Vec<f64>,
}

impl CsrMatrix {
    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// True when `A[i][j] == A[j][i]` bit for bit.
    pub fn is_symmetric(&self) -> bool {
        (0..self.dim()).all(|i| self.row(i).all(|(j, v)| self.get(j, i).to_bits() == v.to_bits()))
    }

    /// Replaces row and column `node` with the identity.
    pub(crate) fn ground(&mut self, node: usize) {
        for i in 0..self.dim() {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[p];
                if i == node || j == node {
                    self.values[p] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
    }
}

/// Reverse Cuthill-McKee permutation: `perm[new] = old`.
pub(crate) fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.row_ptr[i + 1] - a.row_ptr[i]).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize| -> (usize, usize) {
        // (depth, last node in the deepest level)
        let mut depth = vec![usize::MAX; n];
        let mut queue = VecDeque::from([start]);
        depth[start] = 0;
        let mut last = start;
        while let Some(u) = queue.pop_front() {
            last = u;
            for &v in &a.col_idx[a.row_ptr[u]..a.row_ptr[u + 1]] {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (depth[last], last)
    };

    while order.len() < n {
        let seed = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)).unwrap_or(0);
        // a few sweeps towards a pseudo-peripheral node
        let mut start = seed;
        let (mut depth, mut far) = bfs_levels(start);
        for _ in 0..4 {
            let (d, f) = bfs_levels(far);
            if d <= depth {
                break;
            }
            start = far;
            depth = d;
            far = f;
        }

        let component_start = order.len();
        visited[start] = true;
        order.push(start);
        let mut head = component_start;
        while head < order.len() {
            let u = order[head];
            head += 1;
            let mut next: Vec<usize> = a.col_idx[a.row_ptr[u]..a.row_ptr[u + 1]]
                .iter()
                .copied()
                .filter(|&v| !visited[v])
                .collect();
            next.sort_by_key(|&v| (degree[v], v));
            for v in next {
                visited[v] = true;
                order.push(v);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope structure of a permuted symmetric matrix.
#[derive(Debug, Clone)]
pub(crate) struct Envelope {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    /// first stored column of each permuted row
    first: Vec<usize>,
    /// start of each row in the packed lower-triangle storage
    offset: Vec<usize>,
}

impl Envelope {
    pub(crate) fn new(a: &CsrMatrix) -> Self {
        let perm = reverse_cuthill_mckee(a);
        let n = perm.len();
        let mut inv_perm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        let first: Vec<usize> = (0..n)
            .map(|i| {
                a.col_idx[a.row_ptr[perm[i]]..a.row_ptr[perm[i] + 1]]
                    .iter()
                    .map(|&j| inv_perm[j])
                    .fold(i, usize::min)
            })
            .collect();
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i - first[i] + 1));
        }
        Envelope {
            perm,
            inv_perm,
            first,
            offset,
        }
    }

    pub(crate) fn storage(&self) -> usize {
        *self.offset.last().unwrap_or(&0)
    }
}

/// Lower Cholesky factor in envelope storage.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky<'a> {
    env: &'a Envelope,
    factor: Vec<f64>,
}

impl<'a> Cholesky<'a> {
    pub(crate) fn factor(env: &'a Envelope, a: &CsrMatrix) -> Result<Self> {
        let n = env.perm.len();
        let mut l = vec![0.0; env.storage()];
        for i in 0..n {
            let old = env.perm[i];
            for (j, v) in a.row(old) {
                let jn = env.inv_perm[j];
                if jn <= i {
                    l[env.offset[i] + jn - env.first[i]] = v;
                }
            }
        }

        for i in 0..n {
            let fi = env.first[i];
            let row_i = env.offset[i];
            for j in fi..=i {
                let fj = env.first[j];
                let start = fi.max(fj);
                let row_j = env.offset[j];
                let mut s = l[row_i + j - fi];
                let (ri, rj) = (row_i + start - fi, row_j + start - fj);
                for t in 0..(j - start) {
                    s -= l[ri + t] * l[rj + t];
                }
                if j < i {
                    l[row_i + j - fi] = s / l[row_j + j - fj];
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Solver(format!(
                            "matrix is not positive definite (pivot {s:e} at node {})",
                            env.perm[i]
                        )));
                    }
                    l[row_i + i - fi] = s.sqrt();
                }
            }
        }
        Ok(Cholesky { env, factor: l })
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let env = self.env;
        let n = env.perm.len();
        let l = &self.factor;
        let mut y: Vec<f64> = env.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = env.first[i];
            let row = env.offset[i];
            let mut s = y[i];
            for (t, j) in (fi..i).enumerate() {
                s -= l[row + t] * y[j];
            }
            y[i] = s / l[row + i - fi];
        }
        for i in (0..n).rev() {
            let fi = env.first[i];
            let row = env.offset[i];
            y[i] /= l[row + i - fi];
            let yi = y[i];
            for (t, j) in (fi..i).enumerate() {
                y[j] -= l[row + t] * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in env.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}
