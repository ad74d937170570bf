//! Distance distribution estimation by a truncated Hankel transform.
//!
//! The features are sampled at Gauss–Legendre nodes `t_i` on `[0, c]`
//! (frequency units of the projection transform) and mapped onto an axis of
//! distances `d_j` by
//!
//! ```text
//! f(d_j) = sum_i w_i t_i F(t_i) J0(pi d_j t_i / R)
//! ```
//!
//! Bessel orthogonality concentrates `f` around the distances present in
//! `F`. The distributions are `p(d_j) = |f(d_j)|^2 / sum_j |f(d_j)|^2`.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{estimate_features, EstimateOptions, InvariantFeatures};
use crate::geometry::{DistanceAxis, DistanceDistribution};
use crate::projector::LineSource;
use crate::specfun::{gauss_legendre, j0, QuadratureRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct HankelConfig {
    /// Frequency cutoff c, in the units of the projection transform.
    pub cutoff: f64,
    pub quad_points: usize,
    pub axis_points: usize,
    /// Largest distance on the axis; at most R.
    pub axis_max: f64,
    /// Multiply `f(u)` by `u`, as in `delta(u - v) = u int t J0(ut) J0(vt) dt`,
    /// so every distance gets a peak of the same height.
    pub orthogonality_weight: bool,
}

impl HankelConfig {
    /// `c = min(M, 100)`, 256 nodes, 256 axis points up to R.
    pub fn for_half_bins(half_bins: usize, radius_bound: f64) -> Self {
        HankelConfig {
            cutoff: half_bins.min(100) as f64,
            quad_points: 256,
            axis_points: 256,
            axis_max: radius_bound,
            orthogonality_weight: true,
        }
    }

    pub fn validate(&self, radius_bound: f64) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::invalid(format!("cutoff {} must be positive", self.cutoff)));
        }
        if self.quad_points < 8 {
            return Err(Error::invalid("at least 8 quadrature points are required"));
        }
        if self.axis_points < 16 {
            return Err(Error::invalid("at least 16 axis points are required"));
        }
        if !(self.axis_max > 0.0 && self.axis_max <= radius_bound * (1.0 + 1e-12)) {
            return Err(Error::invalid(format!(
                "axis maximum {} must lie in (0, R = {radius_bound}]",
                self.axis_max
            )));
        }
        Ok(())
    }

    pub fn axis(&self) -> DistanceAxis {
        DistanceAxis::spanning(self.axis_max, self.axis_points).expect("validated axis")
    }
}

/// `f(u_j) = sum_i w_i t_i F(t_i) J0(u_j t_i)`.
pub fn hankel_transform(feature_at_nodes: &[f64], rule: &QuadratureRule, axis: &[f64]) -> Result<Vec<f64>> {
    if feature_at_nodes.len() != rule.len() {
        return Err(Error::invalid(format!(
            "{} feature values for {} quadrature nodes",
            feature_at_nodes.len(),
            rule.len()
        )));
    }
    Ok(axis
        .iter()
        .map(|&u| {
            rule.nodes()
                .iter()
                .zip(rule.weights())
                .zip(feature_at_nodes)
                .map(|((&t, &w), &f)| w * t * f * j0(u * t))
                .sum()
        })
        .collect())
}

/// Quadrature rule, distance axis and the precomputed transform kernel.
#[derive(Debug, Clone)]
pub struct HankelPlan {
    config: HankelConfig,
    radius_bound: f64,
    rule: QuadratureRule,
    axis: DistanceAxis,
    /// Row-major `l x n`: `w_i t_i J0(u_j t_i)`, times `u_j` when weighted,
    /// with `u_j = pi d_j / R`.
    kernel: Vec<f64>,
}

impl HankelPlan {
    pub fn new(config: HankelConfig, radius_bound: f64) -> Result<Self> {
        config.validate(radius_bound)?;
        let rule = gauss_legendre(config.quad_points, config.cutoff)?;
        let axis = config.axis();
        let scale = PI / radius_bound;
        let mut kernel = Vec::with_capacity(axis.len * rule.len());
        for d in axis.centers() {
            let u = if config.orthogonality_weight { scale * d } else { 1.0 };
            for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
                kernel.push(u * w * t * j0(scale * d * t));
            }
        }
        Ok(HankelPlan {
            config,
            radius_bound,
            rule,
            axis,
            kernel,
        })
    }

    pub fn config(&self) -> &HankelConfig {
        &self.config
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn axis(&self) -> DistanceAxis {
        self.axis
    }

    pub fn radius_bound(&self) -> f64 {
        self.radius_bound
    }

    /// Transform of feature values given at the rule's nodes.
    pub fn transform(&self, feature_at_nodes: &[f64]) -> Result<Vec<f64>> {
        let n = self.rule.len();
        if feature_at_nodes.len() != n {
            return Err(Error::invalid(format!(
                "{} feature values for {n} quadrature nodes",
                feature_at_nodes.len()
            )));
        }
        Ok(self
            .kernel
            .chunks(n)
            .map(|row| row.iter().zip(feature_at_nodes).map(|(k, f)| k * f).sum())
            .collect())
    }

    /// `|f|^2` normalized over the axis.
    pub fn distribution(&self, feature_at_nodes: &[f64]) -> Result<DistanceDistribution> {
        let f = self.transform(feature_at_nodes)?;
        let power: Vec<f64> = f.iter().map(|v| v * v).collect();
        DistanceDistribution::from_weights(self.axis, power).map_err(|e| match e {
            Error::Degenerate(_) => Error::Degenerate("Hankel transform vanished; distribution cannot be normalized".into()),
            other => other,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DistanceDistributions {
    pub radial: DistanceDistribution,
    /// `None` for a single point, which has no pairs.
    pub pairwise: Option<DistanceDistribution>,
    pub features: InvariantFeatures,
}

/// Radial and pairwise distributions from features sampled at the plan's
/// nodes (the real part of `mu` is used).
pub fn distributions_from_features(features: &InvariantFeatures, plan: &HankelPlan) -> Result<DistanceDistributions> {
    let nodes = plan.rule().nodes();
    if features.freq.len() != nodes.len() || features.freq.iter().zip(nodes).any(|(a, b)| a != b) {
        return Err(Error::invalid("features were not evaluated at the plan's quadrature nodes"));
    }
    Ok(DistanceDistributions {
        radial: plan.distribution(&features.mu_real())?,
        pairwise: if features.k_assumed >= 2 {
            Some(plan.distribution(&features.c2)?)
        } else {
            None
        },
        features: features.clone(),
    })
}

/// Estimates features at the quadrature nodes and transforms them.
pub fn estimate_distributions<S: LineSource + ?Sized>(
    source: &S,
    k: usize,
    plan: &HankelPlan,
    opts: EstimateOptions,
) -> Result<DistanceDistributions> {
    if (source.radius_bound() - plan.radius_bound()).abs() > 1e-12 * plan.radius_bound() {
        return Err(Error::invalid("plan and data disagree on the radius bound"));
    }
    let features = estimate_features(source, k, plan.rule().nodes(), opts)?;
    distributions_from_features(&features, plan)
}

/// Distribution dump: `u, p_mu, p_c[, true_radial, true_pairwise]`. Missing
/// pairwise columns are written as zeros.
pub fn write_distributions_csv(
    w: &mut impl std::io::Write,
    est: &DistanceDistributions,
    truth: Option<(&DistanceDistribution, Option<&DistanceDistribution>)>,
) -> std::io::Result<()> {
    if truth.is_some() {
        writeln!(w, "u,p_mu,p_c,true_radial,true_pairwise")?;
    } else {
        writeln!(w, "u,p_mu,p_c")?;
    }
    let axis = est.radial.axis();
    for j in 0..axis.len {
        let pc = est.pairwise.as_ref().map_or(0.0, |p| p.mass()[j]);
        write!(w, "{},{},{}", axis.center(j), est.radial.mass()[j], pc)?;
        if let Some((r, p)) = truth {
            write!(w, ",{},{}", r.mass()[j], p.map_or(0.0, |p| p.mass()[j]))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads the first three columns of a distribution dump back; an all-zero
/// pairwise column yields `None`.
pub fn read_distributions_csv(text: &str) -> Result<(DistanceDistribution, Option<DistanceDistribution>)> {
    let mut u = Vec::new();
    let mut pm = Vec::new();
    let mut pc = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 3 {
            return Err(Error::Format(format!("line {}: expected at least 3 columns", i + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad number {s:?}", i + 1)))
        };
        u.push(parse(cols[0])?);
        pm.push(parse(cols[1])?);
        pc.push(parse(cols[2])?);
    }
    if u.len() < 2 {
        return Err(Error::Format("distribution file has fewer than two rows".into()));
    }
    let width = (u[u.len() - 1] - u[0]) / (u.len() - 1) as f64;
    let axis = DistanceAxis::new(u[0], width, u.len())?;
    for (j, &v) in u.iter().enumerate() {
        if (v - axis.center(j)).abs() > 1e-9 * width.max(1.0) {
            return Err(Error::Format("distribution axis is not equally spaced".into()));
        }
    }
    let pairwise = if pc.iter().all(|&v| v == 0.0) {
        None
    } else {
        Some(DistanceDistribution::from_weights(axis, pc)?)
    };
    Ok((DistanceDistribution::from_weights(axis, pm)?, pairwise))
}
