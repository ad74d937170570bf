//! Prony-based distance estimation.
//!
//! For large nu, `J0(a nu) ~ sqrt(2 / (pi a nu)) cos(a nu - pi/4)`, so
//! `sqrt(nu) mu[nu]` is close to a sum of K undamped real sinusoids with
//! frequencies `a_k = pi r_k / R`. An annihilating filter of length `2K + 1`
//! fitted to that sequence has roots `exp(+-i a_k)`; their arguments give
//! the radial distances. The same holds for `C` and the pairwise distances.
//!
//! By default the rescaled sequence is first denoised (Cadzow), and the
//! requested number of distances is shared among the filter's roots by
//! fitted amplitude, so two nearly equal distances that collapse onto one
//! root are both reported.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::features::InvariantFeatures;

/// Roots whose modulus differs from 1 by more than this are ignored.
pub const MODULUS_TOLERANCE: f64 = 0.2;

pub const DEFAULT_DENOISE_ITERATIONS: usize = 20;

/// Frequencies recovered by an annihilating filter.
#[derive(Debug, Clone, Serialize)]
pub struct PronyFit {
    /// Ascending, in radians per sample, each in `[0, pi]`.
    pub frequencies: Vec<f64>,
    /// Every root frequency within the modulus tolerance, ascending.
    pub candidates: Vec<f64>,
    #[serde(skip)]
    pub roots: Vec<Complex64>,
    /// `||H h||` for the unit-norm filter `h` and the max-normalized signal.
    pub residual: f64,
    /// A root sat on the positive real axis (zero frequency).
    pub degenerate: bool,
    /// The annihilation system had more than one (near) null direction.
    pub rank_deficient: bool,
}

/// Total-least-squares Prony fit of `order` real sinusoids.
///
/// The filter is the right singular vector of the smallest singular value
/// of the Hankel matrix `H[i][j] = signal[i + j]`, `j = 0..=2 order`. Roots
/// with `|arg| <= dc_guard` are reported as frequency 0 and flag the fit as
/// degenerate.
pub fn prony_frequencies(signal: &[f64], order: usize, dc_guard: f64) -> Result<PronyFit> {
    if order == 0 {
        return Err(Error::invalid("Prony order must be at least 1"));
    }
    let taps = 2 * order + 1;
    if signal.len() < taps {
        return Err(Error::invalid(format!(
            "{} samples cannot determine a filter of {} taps",
            signal.len(),
            taps
        )));
    }
    let scale = signal.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Degenerate("signal is zero or not finite".into()));
    }
    let rows = signal.len() - taps + 1;
    // zero rows leave the null space unchanged and keep the SVD square or tall
    let padded = rows.max(taps);
    let hankel = DMatrix::from_fn(padded, taps, |i, j| {
        if i < rows {
            signal[i + j] / scale
        } else {
            0.0
        }
    });
    let svd = hankel.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sv = &svd.singular_values;
    let (min_idx, _) = sv
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    let filter: Vec<f64> = v_t.row(min_idx).iter().copied().collect();
    let residual = (&hankel * nalgebra::DVector::from_column_slice(&filter)).norm();
    let sv_max = sv.max();
    let near_null = sv.iter().filter(|&&v| v <= 1e-10 * sv_max).count();

    let roots = polynomial_roots(&filter);
    let mut candidates: Vec<(f64, f64)> = Vec::new(); // (|1 - |z||, frequency)
    let mut degenerate = false;
    for z in &roots {
        let dist = (z.norm() - 1.0).abs();
        if dist >= MODULUS_TOLERANCE {
            continue;
        }
        let arg = z.arg();
        if arg.abs() <= dc_guard {
            degenerate = true;
            candidates.push((dist, 0.0));
        } else if arg > 0.0 || arg == PI || arg == -PI {
            candidates.push((dist, arg.abs()));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut all: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    all.sort_by(f64::total_cmp);
    let mut frequencies: Vec<f64> = candidates.into_iter().take(order).map(|c| c.1).collect();
    frequencies.sort_by(f64::total_cmp);
    Ok(PronyFit {
        frequencies,
        candidates: all,
        roots,
        residual,
        degenerate,
        rank_deficient: near_null > 1,
    })
}

/// Cadzow denoising: alternately truncates the near-square Hankel matrix of
/// `signal` to `rank` and restores Hankel structure by anti-diagonal
/// averaging.
pub fn cadzow_denoise(signal: &[f64], rank: usize, iterations: usize) -> Vec<f64> {
    let n = signal.len();
    let rows = n / 2 + 1;
    let cols = n + 1 - rows;
    if rank == 0 || rank >= rows.min(cols) {
        return signal.to_vec();
    }
    let mut x = signal.to_vec();
    for _ in 0..iterations {
        let h = DMatrix::from_fn(rows, cols, |i, j| x[i + j]);
        let mut svd = h.svd(true, true);
        for s in svd.singular_values.iter_mut().skip(rank) {
            *s = 0.0;
        }
        let low = svd.recompose().expect("both factors requested");
        let mut sum = vec![0.0; n];
        let mut count = vec![0usize; n];
        for i in 0..rows {
            for j in 0..cols {
                sum[i + j] += low[(i, j)];
                count[i + j] += 1;
            }
        }
        x = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    }
    x
}

/// Roots of `sum_k c[k] z^k` from the companion matrix.
fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let big = coeffs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut degree = coeffs.len() - 1;
    while degree > 0 && coeffs[degree].abs() <= 1e-14 * big {
        degree -= 1;
    }
    if degree == 0 {
        return Vec::new();
    }
    let lead = coeffs[degree];
    let companion = DMatrix::from_fn(degree, degree, |i, j| {
        if i == 0 {
            -coeffs[degree - 1 - j] / lead
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    companion.complex_eigenvalues().iter().copied().collect()
}

/// Window of integer frequencies used for the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PbdeOptions {
    pub nu_min: usize,
    pub nu_max: usize,
    /// Cadzow iterations applied before the fit; 0 disables denoising.
    pub denoise_iterations: usize,
    /// Assign the requested count among candidate roots by fitted
    /// amplitude instead of keeping the roots nearest the unit circle.
    pub amplitude_allocation: bool,
}

impl PbdeOptions {
    /// `nu_min = 10`, `nu_max = min(M, 120)`.
    pub fn for_half_bins(half_bins: usize) -> Self {
        PbdeOptions {
            nu_min: 10,
            nu_max: half_bins.min(120),
            denoise_iterations: DEFAULT_DENOISE_ITERATIONS,
            amplitude_allocation: true,
        }
    }

    /// Bare total-least-squares fit over `[nu_min, nu_max]`.
    pub fn plain(nu_min: usize, nu_max: usize) -> Self {
        PbdeOptions {
            nu_min,
            nu_max,
            denoise_iterations: 0,
            amplitude_allocation: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PronyEstimate {
    /// Ascending, each in `(0, R)`.
    pub distances: Vec<f64>,
    #[serde(skip)]
    pub filter_roots: Vec<Complex64>,
    pub residual: f64,
    pub nu_range: (usize, usize),
    /// Requested count minus recovered count.
    pub missing: usize,
    pub degenerate: bool,
}

fn window(features: &InvariantFeatures, opts: PbdeOptions, values: &[f64]) -> Result<Vec<f64>> {
    if opts.nu_min == 0 || opts.nu_max <= opts.nu_min {
        return Err(Error::invalid(format!(
            "frequency window [{}, {}] must be nonempty and start above 0",
            opts.nu_min, opts.nu_max
        )));
    }
    (opts.nu_min..=opts.nu_max)
        .map(|nu| {
            features
                .position(nu as f64)
                .map(|j| (nu as f64).sqrt() * values[j])
                .ok_or_else(|| Error::invalid(format!("features lack frequency {nu}")))
        })
        .collect()
}

fn estimate(scaled: &[f64], count: usize, radius_bound: f64, opts: PbdeOptions) -> Result<PronyEstimate> {
    let guard = PI / (4.0 * opts.nu_max as f64);
    let denoised;
    let scaled = if opts.denoise_iterations > 0 {
        denoised = cadzow_denoise(scaled, 2 * count, opts.denoise_iterations);
        &denoised[..]
    } else {
        scaled
    };
    let fit = prony_frequencies(scaled, count, guard)?;
    let frequencies = if opts.amplitude_allocation {
        allocate_by_amplitude(scaled, opts.nu_min, &fit.candidates, count).unwrap_or_else(|| fit.frequencies.clone())
    } else {
        fit.frequencies.clone()
    };
    let distances: Vec<f64> = frequencies
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|a| a * radius_bound / PI)
        .filter(|&d| d < radius_bound)
        .collect();
    Ok(PronyEstimate {
        missing: count - distances.len(),
        distances,
        filter_roots: fit.roots,
        residual: fit.residual,
        nu_range: (opts.nu_min, opts.nu_max),
        degenerate: fit.degenerate,
    })
}

/// Distributes `count` unit components over the candidate frequencies.
///
/// A component `J0(a nu)` contributes `sqrt(2 / (pi a)) cos(a nu - pi/4)` to
/// the rescaled signal, so the least-squares amplitude at `a` divided by
/// `sqrt(2 / (pi a))` estimates how many components share that frequency.
/// Units are handed out greedily to the largest remaining share. Returns
/// `None` when no fit is possible.
fn allocate_by_amplitude(signal: &[f64], nu_min: usize, candidates: &[f64], count: usize) -> Option<Vec<f64>> {
    let freqs: Vec<f64> = candidates.iter().copied().filter(|&a| a > 0.0).collect();
    let n = signal.len();
    if freqs.is_empty() || 2 * freqs.len() > n {
        return None;
    }
    let design = DMatrix::from_fn(n, 2 * freqs.len(), |i, j| {
        let phase = freqs[j / 2] * (nu_min + i) as f64;
        if j % 2 == 0 {
            phase.cos()
        } else {
            phase.sin()
        }
    });
    let rhs = nalgebra::DVector::from_column_slice(signal);
    let coef = design.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let mut share: Vec<f64> = freqs
        .iter()
        .enumerate()
        .map(|(j, &a)| coef[2 * j].hypot(coef[2 * j + 1]) / (2.0 / (PI * a)).sqrt())
        .collect();
    let total: f64 = share.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    for v in &mut share {
        *v *= count as f64 / total;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (j, _) = share
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
        out.push(freqs[j]);
        share[j] -= 1.0;
    }
    out.sort_by(f64::total_cmp);
    Some(out)
}

/// K radial distances from `sqrt(nu) Re mu[nu]` over the window.
pub fn estimate_radial_distances(
    features: &InvariantFeatures,
    k: usize,
    radius_bound: f64,
    opts: PbdeOptions,
) -> Result<PronyEstimate> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if opts.nu_max < opts.nu_min + 4 * k {
        return Err(Error::invalid(format!(
            "window [{}, {}] is too short for K = {k} (needs width >= 4K)",
            opts.nu_min, opts.nu_max
        )));
    }
    let scaled = window(features, opts, &features.mu_real())?;
    estimate(&scaled, k, radius_bound, opts)
}

/// K(K-1)/2 pairwise distances from `sqrt(nu) C[nu]` over the window.
pub fn estimate_pairwise_distances(
    features: &InvariantFeatures,
    k: usize,
    radius_bound: f64,
    opts: PbdeOptions,
) -> Result<PronyEstimate> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let pairs = k * (k - 1) / 2;
    if pairs == 0 {
        return Ok(PronyEstimate {
            distances: Vec::new(),
            filter_roots: Vec::new(),
            residual: 0.0,
            nu_range: (opts.nu_min, opts.nu_max),
            missing: 0,
            degenerate: false,
        });
    }
    let scaled = window(features, opts, &features.c2)?;
    estimate(&scaled, pairs, radius_bound, opts)
}

/// Largest error under the optimal one-to-one matching of two distance
/// sets, or `None` when their sizes differ.
///
/// On the line, pairing sorted values is optimal for any convex cost and for
/// the bottleneck cost, so this equals the assignment-problem optimum.
pub fn max_matched_error(estimate: &[f64], truth: &[f64]) -> Option<f64> {
    if estimate.len() != truth.len() {
        return None;
    }
    let mut a = estimate.to_vec();
    let mut b = truth.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Some(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}
