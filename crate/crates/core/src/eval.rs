//! Phantoms, element-to-pixel rendering and image metrics.

use crate::error::{Error, Result};
use crate::forward::{ConductivityField, SIGMA_MIN};
use crate::mesh::{centroids, cross2, Point, TriangleMesh};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub conductivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub background: f64,
    #[serde(default)]
    pub inclusions: Vec<Inclusion>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.background >= SIGMA_MIN) || !self.background.is_finite() {
            return Err(Error::Validation(format!("background conductivity {} is invalid", self.background)));
        }
        for (i, inc) in self.inclusions.iter().enumerate() {
            if !(inc.radius > 0.0) || !(inc.conductivity >= SIGMA_MIN) || !inc.x.is_finite() || !inc.y.is_finite() {
                return Err(Error::Validation(format!("inclusion {i} is invalid: {inc:?}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PhantomSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Conductivity at a point: the last listed inclusion containing it,
    /// else the background.
    pub fn value_at(&self, p: Point) -> f64 {
        self.inclusions
            .iter()
            .rev()
            .find(|inc| (p.x - inc.x).hypot(p.y - inc.y) <= inc.radius)
            .map_or(self.background, |inc| inc.conductivity)
    }
}

/// Samples the phantom at element centroids.
pub fn generate_phantom(spec: &PhantomSpec, mesh: &TriangleMesh) -> Result<ConductivityField> {
    spec.validate()?;
    ConductivityField::new(centroids(mesh).coords.iter().map(|&p| spec.value_at(p)).collect())
}

/// Row-major image; row 0 is the top (largest y).
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!("{} pixels for a {height}x{width} image", pixels.len())));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("image contains non-finite pixels".into()));
        }
        Ok(RasterImage { height, width, pixels })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    fn same_shape(&self, other: &RasterImage) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "images differ in size: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Binary PGM (P5, maxval 255), min-max normalized; a flat image maps to 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = min_max(&self.pixels);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| {
            if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }

    /// Exact `row,col,value` dump with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for r in 0..self.height {
            for c in 0..self.width {
                let _ = writeln!(out, "{r},{c},{:.16e}", self.at(r, c));
            }
        }
        out
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Renders an element field on a `resolution x resolution` grid spanning
/// the node bounding box. Each pixel centre takes the value of the lowest
/// indexed element containing it (edges inclusive); pixels outside the
/// mesh take the median element value.
pub fn rasterize(mesh: &TriangleMesh, sigma: &ConductivityField, resolution: usize) -> Result<RasterImage> {
    if resolution < 16 {
        return Err(Error::InvalidParameter(format!("resolution must be at least 16, got {resolution}")));
    }
    if sigma.len() != mesh.element_count() {
        return Err(Error::Shape(format!(
            "conductivity has {} values but mesh has {} elements",
            sigma.len(),
            mesh.element_count()
        )));
    }
    let bbox = mesh.bounding_box();
    let (dx, dy) = (bbox.width() / resolution as f64, bbox.height() / resolution as f64);
    let col_of = |x: f64| (x - bbox.min.x) / dx - 0.5;
    let row_of = |y: f64| (bbox.max.y - y) / dy - 0.5;

    let mut owner = vec![usize::MAX; resolution * resolution];
    for e in 0..mesh.element_count() {
        let [a, b, c] = mesh.vertices(e);
        let (xs, ys) = ([a.x, b.x, c.x], [a.y, b.y, c.y]);
        let (x_lo, x_hi) = min_max(&xs);
        let (y_lo, y_hi) = min_max(&ys);
        let c0 = col_of(x_lo).ceil().max(0.0) as usize;
        let c1 = (col_of(x_hi).floor().min(resolution as f64 - 1.0)).max(-1.0);
        let r0 = row_of(y_hi).ceil().max(0.0) as usize;
        let r1 = (row_of(y_lo).floor().min(resolution as f64 - 1.0)).max(-1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for r in r0..=r1 as usize {
            let py = bbox.max.y - (r as f64 + 0.5) * dy;
            for col in c0..=c1 as usize {
                let slot = &mut owner[r * resolution + col];
                if *slot != usize::MAX {
                    continue;
                }
                let p = Point::new(bbox.min.x + (col as f64 + 0.5) * dx, py);
                if cross2(a, b, p) >= 0.0 && cross2(b, c, p) >= 0.0 && cross2(c, a, p) >= 0.0 {
                    *slot = e;
                }
            }
        }
    }
    let outside = median(sigma.values());
    let pixels = owner
        .iter()
        .map(|&e| if e == usize::MAX { outside } else { sigma.values()[e] })
        .collect();
    RasterImage::new(resolution, resolution, pixels)
}

/// Relative image error `||i_hat - i||^2 / ||i||^2`.
pub fn rie(i_hat: &RasterImage, i: &RasterImage) -> Result<f64> {
    i_hat.same_shape(i)?;
    let reference: f64 = i.pixels.iter().map(|v| v * v).sum();
    if reference == 0.0 {
        return Err(Error::InvalidParameter("reference image has zero norm".into()));
    }
    let diff: f64 = i_hat.pixels.iter().zip(&i.pixels).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(diff / reference)
}

/// Global (single-window) structural similarity.
///
/// Statistics are population moments over the whole image. The dynamic
/// range `L` spans both images (1 when both are flat and equal), which keeps
/// the index symmetric in its arguments; `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
pub fn ssim(i: &RasterImage, i_hat: &RasterImage) -> Result<f64> {
    i.same_shape(i_hat)?;
    let n = i.pixels.len() as f64;
    let (lo_a, hi_a) = min_max(&i.pixels);
    let (lo_b, hi_b) = min_max(&i_hat.pixels);
    let range = hi_a.max(hi_b) - lo_a.min(lo_b);
    let l = if range > 0.0 { range } else { 1.0 };
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);

    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mu_a, mu_b) = (mean(&i.pixels), mean(&i_hat.pixels));
    let moment = |a: &[f64], ma: f64, b: &[f64], mb: f64| a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let var_a = moment(&i.pixels, mu_a, &i.pixels, mu_a);
    let var_b = moment(&i_hat.pixels, mu_b, &i_hat.pixels, mu_b);
    let cov = moment(&i.pixels, mu_a, &i_hat.pixels, mu_b);

    Ok(((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
}
