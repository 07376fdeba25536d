use super::{cross2, Point, TriangleMesh};
use crate::error::{Error, Result};
use std::f64::consts::TAU;

/// Ring layout of a disk mesh: `rings` concentric rings, ring `r` holding
/// `base * r` equally spaced nodes, all rings starting at angle 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RingLayout {
    base: usize,
    rings: usize,
}

impl RingLayout {
    fn elements(&self) -> usize {
        self.base * self.rings * self.rings
    }

    fn boundary_nodes(&self) -> usize {
        self.base * self.rings
    }

    fn ring_start(&self, r: usize) -> usize {
        1 + self.base * r * (r - 1) / 2
    }

    /// Picks the layout closest to `target` elements, preferring boundary
    /// node counts divisible by the electrode count so electrodes sit at
    /// exactly equal angles on every resolution. Only even bases are used,
    /// which keeps the triangulation mirror-symmetric about both axes.
    fn choose(target: usize, electrodes: usize) -> Option<Self> {
        let lo = target as f64 * 0.8;
        let hi = target as f64 * 1.2;
        let mut best: Option<(bool, usize, RingLayout)> = None;
        for base in (4..=16).step_by(2) {
            let mut rings = 1;
            while ((base * rings * rings) as f64) <= hi {
                let layout = RingLayout { base, rings };
                let n = layout.elements() as f64;
                if n >= lo && layout.boundary_nodes() >= electrodes {
                    let misaligned = layout.boundary_nodes() % electrodes != 0;
                    let err = layout.elements().abs_diff(target);
                    let better = match &best {
                        None => true,
                        Some((m, e, _)) => (misaligned, err) < (*m, *e),
                    };
                    if better {
                        best = Some((misaligned, err, layout));
                    }
                }
                rings += 1;
            }
        }
        best.map(|(_, _, layout)| layout)
    }
}

/// Structured concentric-ring triangulation of a disk centred at the origin.
///
/// Per-ring node counts grow linearly with radius, so element sizes are
/// roughly uniform. Electrodes are placed on equally spaced boundary nodes
/// starting at angle 0 and proceeding counter-clockwise.
pub fn generate_disk_mesh(radius: f64, target_elements: usize, n_electrodes: usize) -> Result<TriangleMesh> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!("radius must be positive, got {radius}")));
    }
    if target_elements < 8 {
        return Err(Error::InvalidParameter(format!(
            "target element count must be at least 8, got {target_elements}"
        )));
    }
    if n_electrodes < 4 {
        return Err(Error::InvalidParameter(format!(
            "at least 4 electrodes are required, got {n_electrodes}"
        )));
    }
    let layout = RingLayout::choose(target_elements, n_electrodes).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "no ring layout with {target_elements} elements (±20%) has {n_electrodes} boundary nodes"
        ))
    })?;

    let RingLayout { base, rings } = layout;
    let mut nodes = Vec::with_capacity(layout.ring_start(rings + 1));
    nodes.push(Point::new(0.0, 0.0));
    for r in 1..=rings {
        let n = base * r;
        let rho = radius * r as f64 / rings as f64;
        for k in 0..n {
            let theta = TAU * k as f64 / n as f64;
            nodes.push(Point::new(rho * theta.cos(), rho * theta.sin()));
        }
    }

    let mut elements = Vec::with_capacity(layout.elements());
    let mut push = |tri: [usize; 3]| {
        let [a, b, c] = tri;
        if cross2(nodes[a], nodes[b], nodes[c]) > 0.0 {
            elements.push([a, b, c]);
        } else {
            elements.push([a, c, b]);
        }
    };

    for k in 0..base {
        let s = layout.ring_start(1);
        push([0, s + k, s + (k + 1) % base]);
    }
    for r in 2..=rings {
        let (inner, outer) = (layout.ring_start(r - 1), layout.ring_start(r));
        let (n_in, n_out) = (base * (r - 1), base * r);
        let (mut i, mut j) = (0, 0);
        // Merge walk over both rings by angle; exact integer comparison of
        // i/n_in against j/n_out, ties advance the inner ring.
        while i < n_in || j < n_out {
            let advance_inner = if i == n_in {
                false
            } else if j == n_out {
                true
            } else {
                (i + 1) * n_out <= (j + 1) * n_in
            };
            if advance_inner {
                push([inner + i % n_in, inner + (i + 1) % n_in, outer + j % n_out]);
                i += 1;
            } else {
                push([inner + i % n_in, outer + (j + 1) % n_out, outer + j % n_out]);
                j += 1;
            }
        }
    }

    let boundary_start = layout.ring_start(rings);
    let n_b = layout.boundary_nodes();
    let electrodes = (0..n_electrodes)
        .map(|l| boundary_start + ((l * n_b) as f64 / n_electrodes as f64).round() as usize % n_b)
        .collect();

    TriangleMesh::new(nodes, elements, electrodes)
}
