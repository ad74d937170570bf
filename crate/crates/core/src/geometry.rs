//! Point-source models and their distance statistics.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// K weighted Dirac sources in the plane.
///
/// Coordinates live in the square `[-1, 1]^2`; `radius_bound` (R) must exceed
/// every radial and pairwise distance so that projections fit in `2M + 1`
/// detector bins of width `2R / (2M + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSourceModel {
    points: Vec<[f64; 2]>,
    weights: Vec<f64>,
    radius_bound: f64,
}

/// Diameter bound of the square `[-h, h]^2`.
pub fn default_radius_bound(domain_half_width: f64) -> f64 {
    2.0 * std::f64::consts::SQRT_2 * domain_half_width
}

impl PointSourceModel {
    pub fn new(points: Vec<[f64; 2]>, weights: Vec<f64>, radius_bound: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("a model needs at least one point"));
        }
        if weights.len() != points.len() {
            return Err(Error::invalid(format!(
                "{} weights given for {} points",
                weights.len(),
                points.len()
            )));
        }
        if !(radius_bound.is_finite() && radius_bound > 0.0) {
            return Err(Error::invalid(format!("radius bound {radius_bound} must be positive")));
        }
        for p in &points {
            if !(p[0].is_finite() && p[1].is_finite()) || p[0].abs().max(p[1].abs()) > 1.0 {
                return Err(Error::invalid(format!(
                    "point ({}, {}) lies outside [-1, 1]^2",
                    p[0], p[1]
                )));
            }
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid(format!("weight {w} must be positive")));
        }
        let model = PointSourceModel {
            points,
            weights,
            radius_bound,
        };
        let worst = model
            .radial_distances()
            .into_iter()
            .chain(model.unordered_pair_distances())
            .fold(0.0_f64, f64::max);
        if worst >= radius_bound {
            return Err(Error::invalid(format!(
                "distance {worst} is not below the radius bound {radius_bound}"
            )));
        }
        Ok(model)
    }

    /// Unit-weight model with the default radius bound for the unit square.
    pub fn with_unit_weights(points: Vec<[f64; 2]>) -> Result<Self> {
        let k = points.len();
        Self::new(points, vec![1.0; k], default_radius_bound(1.0))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn radius_bound(&self) -> f64 {
        self.radius_bound
    }

    pub fn with_radius_bound(&self, radius_bound: f64) -> Result<Self> {
        Self::new(self.points.clone(), self.weights.clone(), radius_bound)
    }

    pub fn radial_distances(&self) -> Vec<f64> {
        self.points.iter().map(|p| p[0].hypot(p[1])).collect()
    }

    /// Full symmetric K x K distance matrix with zero diagonal.
    pub fn pairwise_distances(&self) -> Vec<Vec<f64>> {
        let k = self.points.len();
        let mut d = vec![vec![0.0; k]; k];
        for m in 0..k {
            for n in (m + 1)..k {
                let [xm, ym] = self.points[m];
                let [xn, yn] = self.points[n];
                let v = (xn - xm).hypot(yn - ym);
                d[m][n] = v;
                d[n][m] = v;
            }
        }
        d
    }

    /// The K(K-1)/2 distances d_{m,n} with m < n, row-major.
    pub fn unordered_pair_distances(&self) -> Vec<f64> {
        let k = self.points.len();
        let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
        for m in 0..k {
            for n in (m + 1)..k {
                let [xm, ym] = self.points[m];
                let [xn, yn] = self.points[n];
                out.push((xn - xm).hypot(yn - ym));
            }
        }
        out
    }

    /// Products alpha_m * alpha_n matching [`Self::unordered_pair_distances`].
    pub fn unordered_pair_weights(&self) -> Vec<f64> {
        let k = self.points.len();
        let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
        for m in 0..k {
            for n in (m + 1)..k {
                out.push(self.weights[m] * self.weights[n]);
            }
        }
        out
    }

    pub fn centroid(&self) -> [f64; 2] {
        let total: f64 = self.weights.iter().sum();
        let (sx, sy) = self
            .points
            .iter()
            .zip(&self.weights)
            .fold((0.0, 0.0), |(sx, sy), (p, w)| (sx + w * p[0], sy + w * p[1]));
        [sx / total, sy / total]
    }

    /// Translates the weighted centroid to the origin.
    ///
    /// Fails if a shifted point leaves the unit square.
    pub fn recentered(&self) -> Result<Self> {
        let [cx, cy] = self.centroid();
        let points = self.points.iter().map(|p| [p[0] - cx, p[1] - cy]).collect();
        Self::new(points, self.weights.clone(), self.radius_bound)
    }

    /// Rotation about the origin by `phi` radians (counter-clockwise).
    pub fn rotated(&self, phi: f64) -> Result<Self> {
        let (s, c) = phi.sin_cos();
        let points = self
            .points
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect();
        Self::new(points, self.weights.clone(), self.radius_bound)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let points = self.points.iter().map(|p| [factor * p[0], factor * p[1]]).collect();
        Self::new(points, self.weights.clone(), self.radius_bound)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            points: Vec<[f64; 2]>,
            weights: Option<Vec<f64>>,
            radius_bound: f64,
        }
        let raw: Raw = serde_json::from_str(text)?;
        let weights = raw.weights.unwrap_or_else(|| vec![1.0; raw.points.len()]);
        Self::new(raw.points, weights, raw.radius_bound)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// K points i.i.d. uniform on `[-h, h]^2`, unit weights, R = 2*sqrt(2)*h.
///
/// The model is not re-centered; see [`PointSourceModel::recentered`].
pub fn generate_model(k: usize, seed: u64, domain_half_width: f64) -> Result<PointSourceModel> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if !(domain_half_width > 0.0 && domain_half_width <= 1.0) {
        return Err(Error::invalid(format!(
            "domain half width {domain_half_width} must lie in (0, 1]"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let h = domain_half_width;
    let points = (0..k)
        .map(|_| {
            let x = rng.random_range(-h..=h);
            let y = rng.random_range(-h..=h);
            [x, y]
        })
        .collect();
    PointSourceModel::new(points, vec![1.0; k], default_radius_bound(h))
}

/// Equally spaced bin centers `start + j * width`, `j = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceAxis {
    pub start: f64,
    pub width: f64,
    pub len: usize,
}

impl DistanceAxis {
    pub fn new(start: f64, width: f64, len: usize) -> Result<Self> {
        if len == 0 || !(width > 0.0 && width.is_finite()) || !start.is_finite() {
            return Err(Error::invalid(format!(
                "axis needs len > 0 and positive width (got len {len}, width {width})"
            )));
        }
        Ok(DistanceAxis { start, width, len })
    }

    /// `len` centers from 0 to `max` inclusive.
    pub fn spanning(max: f64, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::invalid("a spanning axis needs at least two points"));
        }
        Self::new(0.0, max / (len - 1) as f64, len)
    }

    pub fn center(&self, j: usize) -> f64 {
        self.start + j as f64 * self.width
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.len).map(|j| self.center(j)).collect()
    }

    /// Lower edge of the first bin and upper edge of the last.
    pub fn range(&self) -> (f64, f64) {
        (
            self.start - 0.5 * self.width,
            self.start + (self.len as f64 - 0.5) * self.width,
        )
    }

    /// Nearest bin, with bins half-open `[c - w/2, c + w/2)`.
    pub fn bin_of(&self, value: f64) -> Option<usize> {
        let idx = ((value - self.start) / self.width + 0.5).floor();
        if idx >= 0.0 && idx < self.len as f64 {
            Some(idx as usize)
        } else {
            None
        }
    }

    pub fn same_as(&self, other: &DistanceAxis) -> bool {
        let tol = 1e-12 * self.width.abs().max(1.0);
        self.len == other.len
            && (self.start - other.start).abs() <= tol
            && (self.width - other.width).abs() <= tol
    }
}

/// Probability mass over a [`DistanceAxis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceDistribution {
    axis: DistanceAxis,
    mass: Vec<f64>,
}

impl DistanceDistribution {
    /// Normalizes nonnegative `weights` into a distribution.
    pub fn from_weights(axis: DistanceAxis, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != axis.len {
            return Err(Error::invalid(format!(
                "{} weights for an axis of {} bins",
                weights.len(),
                axis.len
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::invalid(format!("weight {w} is not a nonnegative number")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("distribution has zero total mass".into()));
        }
        let mass = weights.into_iter().map(|w| w / total).collect();
        Ok(DistanceDistribution { axis, mass })
    }

    pub fn axis(&self) -> &DistanceAxis {
        &self.axis
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        self.axis.centers()
    }

    pub fn bin_width(&self) -> f64 {
        self.axis.width
    }

    pub fn argmax(&self) -> usize {
        self.mass
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }

    /// Linear, mass-conserving transfer onto another axis.
    ///
    /// Each source bin splits its mass between the two target centers that
    /// bracket it; mass beyond either end lands on the end bin.
    pub fn rebinned(&self, target: DistanceAxis) -> DistanceDistribution {
        let mut out = vec![0.0; target.len];
        for (j, &m) in self.mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let pos = (self.axis.center(j) - target.start) / target.width;
            if pos <= 0.0 {
                out[0] += m;
            } else if pos >= (target.len - 1) as f64 {
                out[target.len - 1] += m;
            } else {
                let lo = pos.floor() as usize;
                let frac = pos - lo as f64;
                out[lo] += m * (1.0 - frac);
                out[lo + 1] += m * frac;
            }
        }
        DistanceDistribution { axis: target, mass: out }
    }
}

/// Normalized histogram of `values` on the nearest bins of `axis`.
pub fn true_distance_distribution(values: &[f64], axis: DistanceAxis) -> Result<DistanceDistribution> {
    if values.is_empty() {
        return Err(Error::invalid("no values to histogram"));
    }
    let mut counts = vec![0.0; axis.len];
    for &v in values {
        match axis.bin_of(v) {
            Some(j) => counts[j] += 1.0,
            None => {
                let (lo, hi) = axis.range();
                return Err(Error::OutOfRange { value: v, lo, hi });
            }
        }
    }
    DistanceDistribution::from_weights(axis, counts)
}
