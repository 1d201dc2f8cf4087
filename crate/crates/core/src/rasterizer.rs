//! Soft and hard polygon rasterization.
//!
//! The soft value at a pixel centre `p = (x + 0.5, y + 0.5)` is
//! `logistic(d(p) / sigma)` where `d` is the signed distance to the polygon
//! (positive inside). Coordinates are in pixels.

use std::path::Path;

use crate::data_io::save_image;
use crate::error::Result;
use crate::geometry::{dot, lerp, segment_param, signed_area, sub};
use crate::grid::{BinaryMask, Grid, Image, Point};

pub const DEFAULT_SIGMA: f64 = 1.0;

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn pixel_center(x: usize, y: usize) -> Point {
    [x as f64 + 0.5, y as f64 + 0.5]
}

/// Nearest segment of a closed polygon to a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    /// Segment `k` runs from vertex `k` to vertex `k + 1`.
    pub segment: usize,
    pub t: f64,
    pub distance: f64,
    pub inside: bool,
}

impl Nearest {
    pub fn signed(&self) -> f64 {
        if self.inside {
            self.distance
        } else {
            -self.distance
        }
    }
}

fn is_degenerate(poly: &[Point]) -> bool {
    poly.len() < 3 || signed_area(poly).abs() < 1e-12
}

/// Crossing-number parity for a ray towards `+x`.
pub fn crossing_parity(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for k in 0..n {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Nearest segment with ties resolved to the first segment in order.
pub fn nearest_segment(p: Point, poly: &[Point]) -> Nearest {
    let n = poly.len();
    let mut best = (f64::INFINITY, 0, 0.0);
    for k in 0..n {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        let t = segment_param(p, a, b);
        let d = sub(p, lerp(a, b, t));
        let d2 = dot(d, d);
        if d2 < best.0 {
            best = (d2, k, t);
        }
    }
    Nearest {
        segment: best.1,
        t: best.2,
        distance: best.0.sqrt(),
        inside: !is_degenerate(poly) && crossing_parity(p, poly),
    }
}

/// Signed distance to the polygon boundary, positive inside. Degenerate
/// (zero-area) polygons are everywhere outside.
pub fn signed_distance(p: Point, poly: &[Point]) -> f64 {
    nearest_segment(p, poly).signed()
}

/// Whether the two nearest segments to `p` are within `tol` of each other
/// while touching the boundary at different points.
pub fn is_near_tie(p: Point, poly: &[Point], tol: f64) -> bool {
    let n = poly.len();
    let mut hits: Vec<(f64, Point)> = (0..n)
        .map(|k| {
            let (a, b) = (poly[k], poly[(k + 1) % n]);
            let q = lerp(a, b, segment_param(p, a, b));
            (dot(sub(p, q), sub(p, q)).sqrt(), q)
        })
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));
    let closest = hits[0];
    hits[1..]
        .iter()
        .take_while(|h| h.0 - closest.0 <= tol)
        .any(|h| dot(sub(h.1, closest.1), sub(h.1, closest.1)).sqrt() > 1e-9)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub values: Image,
    pub sigma: f64,
}

impl SoftMask {
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    /// Writes `values * 255` as an 8-bit PGM.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        save_image(&self.values, path)
    }

    pub fn threshold(&self, level: f64) -> BinaryMask {
        self.values.map(|&v| v >= level)
    }
}

/// Forward pass result that keeps per-pixel nearest segments for backward.
#[derive(Debug, Clone)]
pub struct SoftRaster {
    pub mask: SoftMask,
    nearest: Vec<Nearest>,
}

pub fn soft_rasterize(poly: &[Point], width: usize, height: usize, sigma: f64) -> SoftRaster {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut nearest = Vec::with_capacity(width * height);
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let nr = nearest_segment(pixel_center(x, y), poly);
            values.push(logistic(nr.signed() / sigma));
            nearest.push(nr);
        }
    }
    SoftRaster {
        mask: SoftMask {
            values: Grid::from_vec(width, height, values),
            sigma,
        },
        nearest,
    }
}

impl SoftRaster {
    /// Gradient of `sum(upstream * mask)` with respect to the vertices.
    pub fn backward(&self, poly: &[Point], upstream: &Image) -> Vec<Point> {
        let (w, sigma) = (self.mask.width(), self.mask.sigma);
        assert!(upstream.same_shape(&self.mask.values));
        let n = poly.len();
        let mut grad = vec![[0.0; 2]; n];
        for (i, (nr, (&v, &g))) in self
            .nearest
            .iter()
            .zip(self.mask.values.data().iter().zip(upstream.data()))
            .enumerate()
        {
            let dv = g * v * (1.0 - v) / sigma;
            if dv == 0.0 || nr.distance == 0.0 {
                continue;
            }
            let p = pixel_center(i % w, i / w);
            let (k, t) = (nr.segment, nr.t);
            let (a, b) = (poly[k], poly[(k + 1) % n]);
            let q = lerp(a, b, t);
            let sign = if nr.inside { 1.0 } else { -1.0 };
            // d dist / d q = -(p - q) / dist, spread over a and b by (1 - t, t)
            let s = -sign * dv / nr.distance;
            let dq = [s * (p[0] - q[0]), s * (p[1] - q[1])];
            let kb = (k + 1) % n;
            grad[k][0] += (1.0 - t) * dq[0];
            grad[k][1] += (1.0 - t) * dq[1];
            grad[kb][0] += t * dq[0];
            grad[kb][1] += t * dq[1];
        }
        grad
    }
}

/// Pixels whose centre is inside or on the polygon.
pub fn hard_rasterize(poly: &[Point], width: usize, height: usize) -> BinaryMask {
    if is_degenerate(poly) {
        return Grid::new(width, height);
    }
    Grid::from_fn(width, height, |x, y| {
        let nr = nearest_segment(pixel_center(x, y), poly);
        nr.inside || nr.distance < 1e-12
    })
}
