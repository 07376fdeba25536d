use super::{CentroidSet, Point};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::cmp::Ordering;

/// The `k` nearest elements of every element, self first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    neighbors: Vec<usize>,
}

impl NeighborIndex {
    /// Builds an index from explicit per-point lists (each of length `k`).
    pub fn from_lists(k: usize, lists: &[Vec<usize>]) -> Result<Self> {
        let mut neighbors = Vec::with_capacity(k * lists.len());
        for (p, list) in lists.iter().enumerate() {
            if list.len() != k {
                return Err(Error::Shape(format!("point {p} has {} neighbors, expected {k}", list.len())));
            }
            if let Some(&q) = list.iter().find(|&&q| q >= lists.len()) {
                return Err(Error::Shape(format!("point {p} lists neighbor {q} out of range")));
            }
            neighbors.extend_from_slice(list);
        }
        Ok(NeighborIndex { k, neighbors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.neighbors.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn of(&self, p: usize) -> &[usize] {
        &self.neighbors[p * self.k..(p + 1) * self.k]
    }
}

fn dist2(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    dx * dx + dy * dy
}

/// Ordering key of candidate `q` for a query: distance, then the
/// candidate's own coordinates. Element indices never take part, so the
/// result does not depend on element order.
fn compare(query: Point, a: Point, b: Point) -> Ordering {
    dist2(query, a)
        .total_cmp(&dist2(query, b))
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
}

pub fn knn(coords: &CentroidSet, k: usize) -> Result<NeighborIndex> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "k = {k} must be between 1 and the point count {n}"
        )));
    }
    let pts = &coords.coords;
    let neighbors: Vec<usize> = (0..n)
        .into_par_iter()
        .flat_map_iter(|e| {
            let query = pts[e];
            let mut others: Vec<usize> = (0..n).filter(|&q| q != e).collect();
            let by_key = |a: &usize, b: &usize| compare(query, pts[*a], pts[*b]).then(a.cmp(b));
            if k - 1 < others.len() {
                others.select_nth_unstable_by(k - 1, by_key);
                others.truncate(k - 1);
            }
            others.sort_unstable_by(by_key);
            std::iter::once(e).chain(others)
        })
        .collect();
    Ok(NeighborIndex { k, neighbors })
}
