//! Triangular meshes of the imaging domain and the geometry derived from them.
//!
//! A [`TriangleMesh`] is immutable once built: every constructor path runs the
//! same validation, so downstream code can rely on CCW elements, in-range
//! indices, distinct boundary electrodes and a single connected component.

mod disk;
mod io;
mod knn;

pub use disk::generate_disk_mesh;
pub use io::{load_mesh, save_mesh};
pub use knn::{knn, NeighborIndex};

use crate::error::{Error, Result};
use rayon::prelude::*;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Twice the signed area of the triangle (a, b, c); positive when CCW.
#[inline]
pub(crate) fn cross2(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    nodes: Vec<Point>,
    elements: Vec<[usize; 3]>,
    electrodes: Vec<usize>,
}

impl TriangleMesh {
    /// Builds a mesh and checks every structural invariant.
    pub fn new(nodes: Vec<Point>, elements: Vec<[usize; 3]>, electrodes: Vec<usize>) -> Result<Self> {
        let mesh = TriangleMesh {
            nodes,
            elements,
            electrodes,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::Validation("mesh has no elements".into()));
        }
        if let Some(p) = self.nodes.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Validation(format!("non-finite node coordinate {p:?}")));
        }
        let n = self.nodes.len();
        for (e, tri) in self.elements.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::Validation(format!(
                    "element {e} references node {bad} but mesh has {n} nodes"
                )));
            }
            let [a, b, c] = self.vertices(e);
            let twice_area = cross2(a, b, c);
            if !(twice_area > 0.0) {
                return Err(Error::Validation(format!(
                    "element {e} is not counter-clockwise (signed area {})",
                    0.5 * twice_area
                )));
            }
        }

        let boundary = self.boundary_flags();
        let mut seen = vec![false; n];
        for (l, &node) in self.electrodes.iter().enumerate() {
            if node >= n {
                return Err(Error::Validation(format!("electrode {l} references missing node {node}")));
            }
            if seen[node] {
                return Err(Error::Validation(format!("electrode {l} duplicates node {node}")));
            }
            seen[node] = true;
            if !boundary[node] {
                return Err(Error::Validation(format!("electrode {l} node {node} is not on the boundary")));
            }
        }

        if self.component_count() != 1 {
            return Err(Error::Validation("mesh is not connected".into()));
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    /// Electrode `l` is attached to node `electrodes()[l]`.
    pub fn electrodes(&self) -> &[usize] {
        &self.electrodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn vertices(&self, e: usize) -> [Point; 3] {
        let [i, j, k] = self.elements[e];
        [self.nodes[i], self.nodes[j], self.nodes[k]]
    }

    /// Marks nodes lying on an edge used by exactly one element.
    pub fn boundary_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.nodes.len()];
        for ((a, b), count) in self.edge_counts() {
            if count == 1 {
                flags[a] = true;
                flags[b] = true;
            }
        }
        flags
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), u32> {
        let mut counts = HashMap::with_capacity(self.elements.len() * 2);
        for tri in &self.elements {
            for s in 0..3 {
                let (a, b) = (tri[s], tri[(s + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Number of element components connected through shared edges.
    fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.elements.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for (e, tri) in self.elements.iter().enumerate() {
            for s in 0..3 {
                let (a, b) = (tri[s], tri[(s + 1) % 3]);
                match owner.entry((a.min(b), a.max(b))) {
                    std::collections::hash_map::Entry::Vacant(v) => {
                        v.insert(e);
                    }
                    std::collections::hash_map::Entry::Occupied(o) => {
                        let (ra, rb) = (find(&mut parent, *o.get()), find(&mut parent, e));
                        if ra != rb {
                            parent[ra] = rb;
                        }
                    }
                }
            }
        }
        (0..self.elements.len()).filter(|&e| find(&mut parent, e) == e).count()
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::of_points(&self.nodes)
    }
}

/// Per-element centroids, aligned with [`TriangleMesh::elements`].
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub coords: Vec<Point>,
}

impl CentroidSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn centroids(mesh: &TriangleMesh) -> CentroidSet {
    let coords = (0..mesh.element_count())
        .into_par_iter()
        .map(|e| {
            let [a, b, c] = mesh.vertices(e);
            Point::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0)
        })
        .collect();
    CentroidSet { coords }
}

/// Element areas; every entry is positive for a validated mesh.
pub fn element_areas(mesh: &TriangleMesh) -> Result<Vec<f64>> {
    (0..mesh.element_count())
        .map(|e| {
            let [a, b, c] = mesh.vertices(e);
            let area = 0.5 * cross2(a, b, c).abs();
            if area > 0.0 {
                Ok(area)
            } else {
                Err(Error::Validation(format!("element {e} has zero area")))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn of_points(points: &[Point]) -> Self {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        BoundingBox { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    /// Largest absolute coordinate difference between two boxes.
    pub fn max_deviation(&self, other: &BoundingBox) -> f64 {
        [
            self.min.x - other.min.x,
            self.min.y - other.min.y,
            self.max.x - other.max.x,
            self.max.y - other.max.y,
        ]
        .iter()
        .fold(0.0_f64, |m, d| m.max(d.abs()))
    }

    fn check_extent(&self) -> Result<()> {
        if self.width() > 0.0 && self.height() > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "bounding box has zero extent: {self:?}"
            )))
        }
    }
}

/// Maps coordinates affinely so that `bbox` becomes `[-1, 1]²`.
pub fn normalize_coordinates(coords: &CentroidSet, bbox: &BoundingBox) -> Result<CentroidSet> {
    bbox.check_extent()?;
    let (w, h) = (bbox.width(), bbox.height());
    let coords = coords
        .coords
        .iter()
        .map(|p| {
            Point::new(
                2.0 * (p.x - bbox.min.x) / w - 1.0,
                2.0 * (p.y - bbox.min.y) / h - 1.0,
            )
        })
        .collect();
    Ok(CentroidSet { coords })
}

/// Inverse of [`normalize_coordinates`].
pub fn denormalize_coordinates(coords: &CentroidSet, bbox: &BoundingBox) -> Result<CentroidSet> {
    bbox.check_extent()?;
    let coords = coords
        .coords
        .iter()
        .map(|p| {
            Point::new(
                (p.x + 1.0) * 0.5 * bbox.width() + bbox.min.x,
                (p.y + 1.0) * 0.5 * bbox.height() + bbox.min.y,
            )
        })
        .collect();
    Ok(CentroidSet { coords })
}
