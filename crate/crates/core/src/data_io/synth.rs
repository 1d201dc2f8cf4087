//! Synthetic populations of radial Fourier shapes.
//!
//! Every shape comes with a [`ShapeOracle`]: the exact boundary curve
//! parameterized by normalized arc length, which gives a ground-truth
//! correspondence that real datasets lack.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::geometry::{dist, lerp, segment_param};
use crate::grid::{Grid, Image, LabelMask, Point};

/// Dense samples per oracle curve.
const ORACLE_SAMPLES: usize = 2048;

/// Additive Gaussian noise level of synthetic images.
pub const NOISE_SIGMA: f64 = 0.1;

/// Closed boundary curve parameterized by normalized arc length `t ∈ [0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeOracle {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl ShapeOracle {
    /// `points` is a closed polyline (last vertex connects to the first).
    pub fn from_closed_polyline(points: Vec<Point>) -> Self {
        let n = points.len();
        let mut cumulative = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for i in 0..n {
            acc += dist(points[i], points[(i + 1) % n]);
            cumulative.push(acc);
        }
        Self { points, cumulative }
    }

    pub fn polyline(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn point_at(&self, t: f64) -> Point {
        let n = self.points.len();
        let target = t.rem_euclid(1.0) * self.length();
        let seg = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&target).unwrap())
        {
            Ok(i) => i.min(n - 1),
            Err(i) => (i - 1).min(n - 1),
        };
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let a = if len > 0.0 {
            (target - self.cumulative[seg]) / len
        } else {
            0.0
        };
        lerp(self.points[seg], self.points[(seg + 1) % n], a)
    }

    /// Parameter of the closest curve point. Equidistant arcs resolve to the
    /// lowest segment index.
    pub fn project(&self, p: Point) -> f64 {
        let n = self.points.len();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[(i + 1) % n]);
            let s = segment_param(p, a, b);
            let d = dist(p, lerp(a, b, s));
            if d < best.0 {
                let arc = self.cumulative[i] + s * (self.cumulative[i + 1] - self.cumulative[i]);
                best = (d, arc);
            }
        }
        (best.1 / self.length()).rem_euclid(1.0)
    }
}

/// Parameters of one synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeParams {
    /// Per organ, `(amplitude, phase)` of radial harmonic `k = index + 1`,
    /// amplitudes relative to `base_radius`.
    pub fourier_coeffs: Vec<Vec<(f64, f64)>>,
    pub center: Point,
    pub base_radius: f64,
    pub rotation: f64,
}

impl SyntheticShapeParams {
    pub fn radius(&self, organ: usize, theta: f64) -> f64 {
        let phi = theta - self.rotation;
        let wobble: f64 = self.fourier_coeffs[organ]
            .iter()
            .enumerate()
            .map(|(i, &(amp, phase))| amp * ((i + 1) as f64 * phi - phase).cos())
            .sum();
        self.base_radius * (1.0 + wobble)
    }

    fn boundary(&self, organ: usize, theta: f64) -> Point {
        let r = self.radius(organ, theta);
        [
            self.center[0] + r * theta.cos(),
            self.center[1] + r * theta.sin(),
        ]
    }

    /// Rejects curves whose radius comes within one pixel of zero.
    pub fn validate(&self) -> Result<()> {
        for o in 0..self.fourier_coeffs.len() {
            for k in 0..ORACLE_SAMPLES {
                let theta = TAU * k as f64 / ORACLE_SAMPLES as f64;
                if !(self.radius(o, theta) >= 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "synthetic organ {o} is not a simple star-shaped curve (radius {} at angle {theta})",
                        self.radius(o, theta)
                    )));
                }
            }
        }
        Ok(())
    }

    fn half_plane_normal(&self) -> Point {
        [self.rotation.cos(), self.rotation.sin()]
    }

    /// Label at continuous position `q`, for one organ or two organs split
    /// by the line through the center perpendicular to the rotation axis.
    pub fn label_at(&self, q: Point, touching: bool) -> u8 {
        let v = [q[0] - self.center[0], q[1] - self.center[1]];
        let rho = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let theta = v[1].atan2(v[0]);
        if !touching {
            return u8::from(rho <= self.radius(0, theta));
        }
        let n = self.half_plane_normal();
        if n[0] * v[0] + n[1] * v[1] <= 0.0 {
            u8::from(rho <= self.radius(0, theta))
        } else if rho <= self.radius(1, theta) {
            2
        } else {
            0
        }
    }

    /// Renders pixel centers `(x + 0.5, y + 0.5)`.
    pub fn render(&self, size: usize, touching: bool) -> LabelMask {
        Grid::from_fn(size, size, |x, y| {
            self.label_at([x as f64 + 0.5, y as f64 + 0.5], touching)
        })
    }

    /// Boundary oracles, one per rendered organ. Curves run clockwise on
    /// screen, matching traced contours.
    pub fn oracles(&self, touching: bool) -> Vec<ShapeOracle> {
        let m = ORACLE_SAMPLES;
        if !touching {
            let pts = (0..m)
                .map(|k| self.boundary(0, self.rotation + TAU * k as f64 / m as f64))
                .collect();
            return vec![ShapeOracle::from_closed_polyline(pts)];
        }
        // organ 0 spans theta in [rot + pi/2, rot + 3pi/2], organ 1 the other half;
        // each is closed by the straight interface through the center
        [(0usize, self.rotation + FRAC_PI_2), (1, self.rotation - FRAC_PI_2)]
            .into_iter()
            .map(|(organ, start)| {
                let arc = m * 3 / 4;
                let mut pts: Vec<Point> = (0..=arc)
                    .map(|k| self.boundary(organ, start + PI * k as f64 / arc as f64))
                    .collect();
                let end = *pts.last().unwrap();
                let first = pts[0];
                let line = m - arc;
                let half = line / 2;
                for k in 1..half {
                    pts.push(lerp(end, self.center, k as f64 / half as f64));
                }
                for k in 0..(line - half) {
                    pts.push(lerp(self.center, first, k as f64 / (line - half) as f64));
                }
                ShapeOracle::from_closed_polyline(pts)
            })
            .collect()
    }
}

/// Distribution over [`SyntheticShapeParams`]. Lengths are fractions of the
/// image side so the same spec works at any resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub radius_min: f64,
    pub radius_max: f64,
    pub center_jitter: f64,
    /// Rotation drawn uniformly from `[-max_rotation, max_rotation]` radians.
    pub max_rotation: f64,
    /// Highest harmonic, at most 5. Harmonic 1 (a translation) is never used.
    pub max_harmonic: usize,
    /// Amplitude bound of harmonic 2; harmonic `k` is bounded by `amp / (k - 1)`.
    pub harmonic_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            radius_min: 0.22,
            radius_max: 0.30,
            center_jitter: 0.06,
            max_rotation: 0.35,
            max_harmonic: 4,
            harmonic_amplitude: 0.12,
            noise_sigma: NOISE_SIGMA,
        }
    }
}

impl SyntheticSpec {
    pub fn sample_params<R: Rng + ?Sized>(
        &self,
        size: usize,
        organs: usize,
        rng: &mut R,
    ) -> SyntheticShapeParams {
        let s = size as f64;
        let uniform = |rng: &mut R, lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let base_radius = uniform(rng, self.radius_min, self.radius_max) * s;
        let j = self.center_jitter * s;
        let center = [
            s / 2.0 + uniform(rng, -j, j),
            s / 2.0 + uniform(rng, -j, j),
        ];
        let rotation = uniform(rng, -self.max_rotation, self.max_rotation);
        let fourier_coeffs = (0..organs)
            .map(|_| {
                (1..=self.max_harmonic.min(5))
                    .map(|k| {
                        if k == 1 {
                            (0.0, 0.0)
                        } else {
                            let amp = uniform(rng, 0.0, self.harmonic_amplitude / (k - 1) as f64);
                            (amp, uniform(rng, 0.0, TAU))
                        }
                    })
                    .collect()
            })
            .collect();
        SyntheticShapeParams {
            fourier_coeffs,
            center,
            base_radius,
            rotation,
        }
    }
}

/// A rendered synthetic sample with its generating parameters and exact
/// boundary oracles (index `o` belongs to label `o + 1`).
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub params: SyntheticShapeParams,
    pub oracles: Vec<ShapeOracle>,
}

fn organ_intensity(label: u8, organs: usize) -> f64 {
    if organs == 1 {
        1.0
    } else {
        0.5 + 0.5 * (label as f64 - 1.0) / (organs as f64 - 1.0)
    }
}

/// Renders `params` and adds clipped Gaussian noise to the intensity image.
pub fn synthesize<R: Rng + ?Sized>(
    params: &SyntheticShapeParams,
    size: usize,
    touching: bool,
    noise_sigma: f64,
    subject_id: String,
    rng: &mut R,
) -> Result<SyntheticSample> {
    params.validate()?;
    let organs = if touching { 2 } else { 1 };
    let mask = params.render(size, touching);
    if touching && !has_interface(&mask, 1, 2) {
        return Err(Error::InvalidInput(
            "touching organs rendered without a shared interface".into(),
        ));
    }
    if mask.labels().len() != organs {
        return Err(Error::InvalidInput(format!(
            "rendered {} organs, expected {organs}",
            mask.labels().len()
        )));
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let image: Image = mask.map(|&l| {
        let base = if l == 0 { 0.0 } else { organ_intensity(l, organs) };
        let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        (base + n).clamp(0.0, 1.0)
    });
    Ok(SyntheticSample {
        sample: Sample::new(image, mask, subject_id),
        oracles: params.oracles(touching),
        params: params.clone(),
    })
}

/// `n` independent samples. One organ (label 1), or two organs (labels 1
/// and 2) sharing a straight interface when `touching`.
pub fn gen_synthetic_population<R: Rng + ?Sized>(
    n: usize,
    spec: &SyntheticSpec,
    size: usize,
    touching: bool,
    rng: &mut R,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::InvalidInput("population size must be >= 1".into()));
    }
    let organs = if touching { 2 } else { 1 };
    (0..n)
        .map(|i| {
            let params = spec.sample_params(size, organs, rng);
            synthesize(&params, size, touching, spec.noise_sigma, format!("synth_{i:04}"), rng)
        })
        .collect()
}

fn has_interface(mask: &LabelMask, a: u8, b: u8) -> bool {
    let (w, h) = (mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            let v = *mask.get(x, y);
            let right = (x + 1 < w).then(|| *mask.get(x + 1, y));
            let down = (y + 1 < h).then(|| *mask.get(x, y + 1));
            for u in [right, down].into_iter().flatten() {
                if (v == a && u == b) || (v == b && u == a) {
                    return true;
                }
            }
        }
    }
    false
}
