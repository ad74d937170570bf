//! Rotation-invariant features of projection data.
//!
//! For a projection line `s[u]`, `u = -M..=M`, the transform at a (possibly
//! non-integer) frequency nu is `sum_u s[u] exp(i 2 pi nu u / (2M + 1))`.
//! Averaging it over lines gives the first-order feature `mu`; averaging its
//! squared modulus, removing the noise floor `(2M + 1) sigma^2` and the K
//! self-terms, and halving gives the pairwise feature `C`.
//!
//! Transforms are evaluated by direct summation, organized as a matrix
//! product of a block of lines against a cosine/sine basis.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::PointSourceModel;
use crate::projector::LineSource;
use crate::specfun::j0;

/// Lines per block of the batched transform. Partial sums are reduced in
/// block order, so results do not depend on the thread count.
const BLOCK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantFeatures {
    pub freq: Vec<f64>,
    pub mu: Vec<Complex64>,
    pub c2: Vec<f64>,
    pub k_assumed: usize,
    pub noise_variance_used: f64,
    pub line_count: usize,
    /// Frequencies with `|nu| > M`, where the transform aliases.
    pub aliased: usize,
}

impl InvariantFeatures {
    /// Index of `nu` on the frequency axis (exact match).
    pub fn position(&self, nu: f64) -> Option<usize> {
        self.freq.iter().position(|&f| f == nu)
    }

    pub fn mu_real(&self) -> Vec<f64> {
        self.mu.iter().map(|z| z.re).collect()
    }
}

/// `sum_u line[u] exp(+i 2 pi nu u / (2M + 1))` with `line[0]` at `u = -M`.
pub fn line_dft(line: &[f64], nu: f64) -> Complex64 {
    let n = line.len();
    let half = (n / 2) as f64;
    let step = TAU * nu / n as f64;
    line.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, &v)| Complex64::from_polar(v, step * (i as f64 - half)))
        .sum()
}

/// Integer frequencies `lo..=hi`.
pub fn integer_axis(lo: usize, hi: usize) -> Vec<f64> {
    (lo..=hi).map(|v| v as f64).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EstimateOptions {
    /// Noise variance to debias with, instead of the one the data carries.
    pub sigma2_override: Option<f64>,
}

/// Cosine and sine of `2 pi nu u / N` for every bin and frequency.
struct Basis {
    n_freq: usize,
    /// Row-major `N x 2n`: cosines in the first `n` columns, sines after.
    table: Vec<f64>,
}

impl Basis {
    fn new(half_bins: usize, freq: &[f64]) -> Self {
        let bins = 2 * half_bins + 1;
        let n = freq.len();
        let mut table = vec![0.0; bins * 2 * n];
        for (row, u) in table.chunks_mut(2 * n).zip(-(half_bins as i64)..) {
            for (j, &nu) in freq.iter().enumerate() {
                let (s, c) = (TAU * nu * u as f64 / bins as f64).sin_cos();
                row[j] = c;
                row[n + j] = s;
            }
        }
        Basis { n_freq: n, table }
    }

    fn row(&self, bin: usize) -> &[f64] {
        &self.table[bin * 2 * self.n_freq..(bin + 1) * 2 * self.n_freq]
    }
}

#[derive(Clone)]
struct Partial {
    sum: Vec<Complex64>,
    power: Vec<f64>,
}

fn block_partial<S: LineSource + ?Sized>(source: &S, basis: &Basis, lines: std::ops::Range<usize>) -> Partial {
    let n = basis.n_freq;
    let bins = source.bins();
    let half = source.half_bins() as i64;
    let rows = lines.len();
    let mut dense = vec![0.0; rows * bins];
    let mut has_dense = vec![false; rows];
    let mut sparse: Vec<Vec<(i64, f64)>> = vec![Vec::new(); rows];
    for (r, l) in lines.clone().enumerate() {
        has_dense[r] = source.line_parts(l, &mut sparse[r], &mut dense[r * bins..(r + 1) * bins]);
    }
    let mut product = vec![0.0; rows * 2 * n];
    if has_dense.iter().any(|&d| d) {
        for (r, d) in has_dense.iter().enumerate() {
            if !d {
                dense[r * bins..(r + 1) * bins].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        // SAFETY: slices are sized rows x bins, bins x 2n and rows x 2n with
        // the row-major strides passed here.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                bins,
                2 * n,
                1.0,
                dense.as_ptr(),
                bins as isize,
                1,
                basis.table.as_ptr(),
                (2 * n) as isize,
                1,
                0.0,
                product.as_mut_ptr(),
                (2 * n) as isize,
                1,
            );
        }
    }
    let mut partial = Partial {
        sum: vec![Complex64::new(0.0, 0.0); n],
        power: vec![0.0; n],
    };
    for r in 0..rows {
        let out = &mut product[r * 2 * n..(r + 1) * 2 * n];
        for &(u, w) in &sparse[r] {
            let b = basis.row((u + half) as usize);
            for (o, &v) in out.iter_mut().zip(b) {
                *o += w * v;
            }
        }
        for j in 0..n {
            let z = Complex64::new(out[j], out[n + j]);
            partial.sum[j] += z;
            partial.power[j] += z.norm_sqr();
        }
    }
    partial
}

/// Empirical `mu` and debiased `C` at the frequencies `freq`.
///
/// Frequencies beyond `M` alias; they are evaluated anyway and counted in
/// [`InvariantFeatures::aliased`].
pub fn estimate_features<S: LineSource + ?Sized>(
    source: &S,
    k: usize,
    freq: &[f64],
    opts: EstimateOptions,
) -> Result<InvariantFeatures> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if freq.is_empty() {
        return Err(Error::invalid("empty frequency axis"));
    }
    if let Some(nu) = freq.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("frequency {nu} is not finite")));
    }
    let sigma2 = opts.sigma2_override.unwrap_or(source.noise_variance());
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid(format!("noise variance {sigma2} must be nonnegative")));
    }
    let half = source.half_bins();
    let lines = source.line_count();
    let basis = Basis::new(half, freq);
    let blocks: Vec<std::ops::Range<usize>> = (0..lines)
        .step_by(BLOCK)
        .map(|s| s..(s + BLOCK).min(lines))
        .collect();

    #[cfg(feature = "parallel")]
    let partials: Vec<Partial> = {
        use rayon::prelude::*;
        blocks.into_par_iter().map(|b| block_partial(source, &basis, b)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<Partial> = blocks.into_iter().map(|b| block_partial(source, &basis, b)).collect();

    let n = freq.len();
    let mut total = Partial {
        sum: vec![Complex64::new(0.0, 0.0); n],
        power: vec![0.0; n],
    };
    for p in &partials {
        for j in 0..n {
            total.sum[j] += p.sum[j];
            total.power[j] += p.power[j];
        }
    }
    let inv = 1.0 / lines as f64;
    let floor = source.bins() as f64 * sigma2 + k as f64;
    Ok(InvariantFeatures {
        freq: freq.to_vec(),
        mu: total.sum.iter().map(|z| z * inv).collect(),
        c2: total.power.iter().map(|p| 0.5 * (p * inv - floor)).collect(),
        k_assumed: k,
        noise_variance_used: sigma2,
        line_count: lines,
        aliased: freq.iter().filter(|nu| nu.abs() > half as f64).count(),
    })
}

/// Exact angle-averaged features of a model, without bin rounding:
/// `mu[nu] = sum_k a_k J0(pi r_k nu / R)` and
/// `C[nu] = sum_{m<n} a_m a_n J0(pi d_mn nu / R)`.
pub fn analytic_features(model: &PointSourceModel, freq: &[f64]) -> InvariantFeatures {
    let scale = PI / model.radius_bound();
    let radial = model.radial_distances();
    let pairs = model.unordered_pair_distances();
    let pair_w = model.unordered_pair_weights();
    let mu = freq
        .iter()
        .map(|&nu| {
            let v: f64 = radial
                .iter()
                .zip(model.weights())
                .map(|(r, w)| w * j0(scale * r * nu))
                .sum();
            Complex64::new(v, 0.0)
        })
        .collect();
    let c2 = freq
        .iter()
        .map(|&nu| pairs.iter().zip(&pair_w).map(|(d, w)| w * j0(scale * d * nu)).sum())
        .collect();
    InvariantFeatures {
        freq: freq.to_vec(),
        mu,
        c2,
        k_assumed: model.len(),
        noise_variance_used: 0.0,
        line_count: 0,
        aliased: 0,
    }
}

/// Feature dump: `nu, Re mu, Im mu, C[, analytic mu, analytic C]`.
pub fn write_features_csv(
    w: &mut impl std::io::Write,
    est: &InvariantFeatures,
    truth: Option<&InvariantFeatures>,
) -> std::io::Result<()> {
    if truth.is_some() {
        writeln!(w, "nu,mu_re,mu_im,c,mu_analytic,c_analytic")?;
    } else {
        writeln!(w, "nu,mu_re,mu_im,c")?;
    }
    for j in 0..est.freq.len() {
        write!(w, "{},{},{},{}", est.freq[j], est.mu[j].re, est.mu[j].im, est.c2[j])?;
        if let Some(t) = truth {
            write!(w, ",{},{}", t.mu[j].re, t.c2[j])?;
        }
        writeln!(w)?;
    }
    Ok(())
}
