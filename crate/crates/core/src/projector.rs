//! Forward model: random-angle projections of a point-source model, binned
//! into `2M + 1` detector cells and corrupted by white Gaussian noise.
//!
//! The projection coordinate of a point at angle theta is
//! `y cos(theta) - x sin(theta)`, and bin `u` collects coordinates in
//! `[(u - 1/2) D, (u + 1/2) D)` with `D = 2R / (2M + 1)`.

use std::f64::consts::TAU;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::PointSourceModel;
use crate::rng::{derive_seed, stream_rng};

const ANGLE_TAG: u64 = 0x616e_676c;
const NOISE_TAG: u64 = 0x6e6f_6973;

/// 8-byte magic of the binary projection format ("BTPJ1" zero-padded).
pub const PROJECTION_MAGIC: [u8; 8] = *b"BTPJ1\0\0\0";

pub fn bin_width(radius_bound: f64, half_bins: usize) -> f64 {
    2.0 * radius_bound / (2 * half_bins + 1) as f64
}

/// Signed bin index of a projection coordinate, clamped to `[-M, M]`.
/// The flag reports whether clamping was needed.
pub fn bin_index(coord: f64, width: f64, half_bins: usize) -> (i64, bool) {
    let m = half_bins as i64;
    let u = (coord / width + 0.5).floor() as i64;
    if u > m {
        (m, true)
    } else if u < -m {
        (-m, true)
    } else {
        (u, false)
    }
}

fn projection_coordinate(p: &[f64; 2], theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    p[1] * c - p[0] * s
}

/// Clean binned projection `g_theta[u]`, stored at index `u + M`.
pub fn project_line(model: &PointSourceModel, theta: f64, half_bins: usize) -> Result<Vec<f64>> {
    if half_bins == 0 {
        return Err(Error::invalid("M must be at least 1"));
    }
    let width = bin_width(model.radius_bound(), half_bins);
    let mut line = vec![0.0; 2 * half_bins + 1];
    for (p, &w) in model.points().iter().zip(model.weights()) {
        let (u, _) = bin_index(projection_coordinate(p, theta), width, half_bins);
        line[(u + half_bins as i64) as usize] += w;
    }
    Ok(line)
}

/// Anything the feature estimator can read projection lines from.
///
/// A line is the sum of a sparse part (a few weighted bins) and an optional
/// dense part. Noiseless simulations are purely sparse; stored data is
/// purely dense.
pub trait LineSource: Sync {
    fn line_count(&self) -> usize;
    fn half_bins(&self) -> usize;
    fn noise_variance(&self) -> f64;
    fn radius_bound(&self) -> f64;

    /// Fills the sparse entries `(u, value)` with `u` in `[-M, M]`, and
    /// `dense` (length `2M + 1`) when the line has a dense part. Returns
    /// whether `dense` was written.
    fn line_parts(&self, index: usize, sparse: &mut Vec<(i64, f64)>, dense: &mut [f64]) -> bool;

    fn bins(&self) -> usize {
        2 * self.half_bins() + 1
    }

    /// The full line, materialized.
    fn line(&self, index: usize) -> Vec<f64> {
        let m = self.half_bins() as i64;
        let mut sparse = Vec::new();
        let mut dense = vec![0.0; self.bins()];
        if !self.line_parts(index, &mut sparse, &mut dense) {
            dense.iter_mut().for_each(|v| *v = 0.0);
        }
        for (u, v) in sparse {
            dense[(u + m) as usize] += v;
        }
        dense
    }
}

/// Lazily generated projections: clean bins are kept in sparse form and
/// the noise of line `l` is regenerated from its own random stream.
#[derive(Debug, Clone)]
pub struct SimulatedLines {
    half_bins: usize,
    radius_bound: f64,
    angles: Vec<f64>,
    /// Merged `(u, weight)` bins per line, flattened; `offsets[l]..offsets[l+1]`.
    clean: Vec<(i64, f64)>,
    offsets: Vec<usize>,
    noise_variance: f64,
    noise_seed: u64,
    clamped: usize,
}

impl SimulatedLines {
    /// Angles from `seed`; noise from a seed derived from `seed`.
    pub fn new(model: &PointSourceModel, lines: usize, half_bins: usize, snr: f64, seed: u64) -> Result<Self> {
        Self::with_noise_seed(model, lines, half_bins, snr, seed, derive_seed(&[seed, NOISE_TAG]))
    }

    /// Separate angle and noise seeds, so that noise can be replicated over
    /// a fixed set of views.
    pub fn with_noise_seed(
        model: &PointSourceModel,
        lines: usize,
        half_bins: usize,
        snr: f64,
        angle_seed: u64,
        noise_seed: u64,
    ) -> Result<Self> {
        if lines == 0 {
            return Err(Error::invalid("L must be at least 1"));
        }
        if half_bins == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        if !(snr > 0.0) {
            return Err(Error::invalid(format!("SNR must be positive or infinite, got {snr}")));
        }
        let width = bin_width(model.radius_bound(), half_bins);
        let angle_root = derive_seed(&[angle_seed, ANGLE_TAG]);
        let mut angles = Vec::with_capacity(lines);
        let mut clean = Vec::with_capacity(lines * model.len());
        let mut offsets = Vec::with_capacity(lines + 1);
        let mut clamped = 0;
        let mut power = 0.0;
        offsets.push(0);
        for l in 0..lines {
            let theta = TAU * stream_rng(angle_root, l as u64).random::<f64>();
            angles.push(theta);
            let start = clean.len();
            for (p, &w) in model.points().iter().zip(model.weights()) {
                let (u, hit) = bin_index(projection_coordinate(p, theta), width, half_bins);
                clamped += hit as usize;
                match clean[start..].iter_mut().find(|(b, _)| *b == u) {
                    Some(entry) => entry.1 += w,
                    None => clean.push((u, w)),
                }
            }
            clean[start..].sort_by_key(|e| e.0);
            power += clean[start..].iter().map(|e| e.1 * e.1).sum::<f64>();
            offsets.push(clean.len());
        }
        let noise_variance = if snr.is_infinite() {
            0.0
        } else {
            power / (lines * (2 * half_bins + 1)) as f64 / snr
        };
        Ok(SimulatedLines {
            half_bins,
            radius_bound: model.radius_bound(),
            angles,
            clean,
            offsets,
            noise_variance,
            noise_seed,
            clamped,
        })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Points that fell outside `[-M, M]` and were clamped.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn clean_entries(&self, index: usize) -> &[(i64, f64)] {
        &self.clean[self.offsets[index]..self.offsets[index + 1]]
    }

    /// Mean of `g^2` over all clean bins.
    pub fn clean_power(&self) -> f64 {
        let total: f64 = self.clean.iter().map(|e| e.1 * e.1).sum();
        total / (self.angles.len() * self.bins()) as f64
    }

    fn fill_noise(&self, index: usize, out: &mut [f64]) {
        let sigma = self.noise_variance.sqrt();
        let mut rng = stream_rng(self.noise_seed, index as u64);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sigma * z;
        }
    }

    pub fn materialize(&self) -> ProjectionSet {
        let n = self.bins();
        let mut lines = vec![0.0; self.angles.len() * n];
        for (l, row) in lines.chunks_mut(n).enumerate() {
            if self.noise_variance > 0.0 {
                self.fill_noise(l, row);
            }
            for &(u, w) in self.clean_entries(l) {
                row[(u + self.half_bins as i64) as usize] += w;
            }
        }
        ProjectionSet {
            lines,
            line_count: self.angles.len(),
            half_bins: self.half_bins,
            radius_bound: self.radius_bound,
            noise_variance: self.noise_variance,
            angles: Some(self.angles.clone()),
            clamped: self.clamped,
        }
    }
}

impl LineSource for SimulatedLines {
    fn line_count(&self) -> usize {
        self.angles.len()
    }

    fn half_bins(&self) -> usize {
        self.half_bins
    }

    fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    fn radius_bound(&self) -> f64 {
        self.radius_bound
    }

    fn line_parts(&self, index: usize, sparse: &mut Vec<(i64, f64)>, dense: &mut [f64]) -> bool {
        sparse.clear();
        sparse.extend_from_slice(self.clean_entries(index));
        if self.noise_variance > 0.0 {
            self.fill_noise(index, dense);
            true
        } else {
            false
        }
    }
}

/// Dense `L x (2M + 1)` projection data with its noise metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    lines: Vec<f64>,
    line_count: usize,
    half_bins: usize,
    radius_bound: f64,
    noise_variance: f64,
    /// Diagnostics only; estimators never read it.
    angles: Option<Vec<f64>>,
    clamped: usize,
}

/// `L` noisy projections at i.i.d. uniform angles in `[0, 2 pi)`.
///
/// `sigma^2` is the mean squared value of all clean bins divided by `snr`;
/// pass `f64::INFINITY` for noiseless data.
pub fn simulate(model: &PointSourceModel, lines: usize, half_bins: usize, snr: f64, seed: u64) -> Result<ProjectionSet> {
    Ok(SimulatedLines::new(model, lines, half_bins, snr, seed)?.materialize())
}

impl ProjectionSet {
    pub fn from_rows(lines: Vec<f64>, line_count: usize, half_bins: usize, radius_bound: f64, noise_variance: f64) -> Result<Self> {
        if line_count == 0 || half_bins == 0 {
            return Err(Error::invalid("projection data needs L >= 1 and M >= 1"));
        }
        if lines.len() != line_count * (2 * half_bins + 1) {
            return Err(Error::invalid(format!(
                "{} values cannot form {} lines of {} bins",
                lines.len(),
                line_count,
                2 * half_bins + 1
            )));
        }
        if !(radius_bound > 0.0) || !(noise_variance >= 0.0) {
            return Err(Error::invalid("radius bound must be positive and noise variance nonnegative"));
        }
        Ok(ProjectionSet {
            lines,
            line_count,
            half_bins,
            radius_bound,
            noise_variance,
            angles: None,
            clamped: 0,
        })
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let n = self.bins();
        &self.lines[index * n..(index + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.lines.chunks(self.bins())
    }

    pub fn bin_width(&self) -> f64 {
        bin_width(self.radius_bound, self.half_bins)
    }

    pub fn angles(&self) -> Option<&[f64]> {
        self.angles.as_deref()
    }

    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Replaces the recorded noise variance (for externally supplied data).
    pub fn with_noise_variance(mut self, sigma2: f64) -> Self {
        self.noise_variance = sigma2;
        self
    }

    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&PROJECTION_MAGIC)?;
        w.write_all(&(self.line_count as u64).to_le_bytes())?;
        w.write_all(&(self.half_bins as u64).to_le_bytes())?;
        w.write_all(&self.radius_bound.to_le_bytes())?;
        w.write_all(&self.noise_variance.to_le_bytes())?;
        for v in &self.lines {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 8]> {
            r.read_exact(&mut word)
                .map_err(|e| Error::Format(format!("truncated projection file: {e}")))?;
            Ok(word)
        };
        if next(r)? != PROJECTION_MAGIC {
            return Err(Error::Format("bad magic, not a projection file".into()));
        }
        let line_count = u64::from_le_bytes(next(r)?) as usize;
        let half_bins = u64::from_le_bytes(next(r)?) as usize;
        let radius_bound = f64::from_le_bytes(next(r)?);
        let noise_variance = f64::from_le_bytes(next(r)?);
        let count = line_count
            .checked_mul(2 * half_bins + 1)
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)
            .map_err(|e| Error::Format(format!("reading projection rows: {e}")))?;
        if raw.len() != count * 8 {
            return Err(Error::Format(format!(
                "expected {} bytes of rows, found {}",
                count * 8,
                raw.len()
            )));
        }
        let lines = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_rows(lines, line_count, half_bins, radius_bound, noise_variance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(&mut BufReader::new(file))
    }

    /// CSV export: a `#`-prefixed header with L, M, R and sigma^2, then one
    /// row of `2M + 1` values per line.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "# lines={} half_bins={} radius_bound={} noise_variance={}",
            self.line_count, self.half_bins, self.radius_bound, self.noise_variance
        )?;
        for row in self.rows() {
            let mut first = true;
            for v in row {
                if !first {
                    w.write_all(b",")?;
                }
                first = false;
                write!(w, "{v}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut header: Option<(usize, usize, f64, f64)> = None;
        let mut values = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if let Some(rest) = line.strip_prefix('#') {
                let mut fields = std::collections::HashMap::new();
                for kv in rest.split_whitespace() {
                    if let Some((k, v)) = kv.split_once('=') {
                        fields.insert(k.to_string(), v.to_string());
                    }
                }
                let get = |k: &str| {
                    fields
                        .get(k)
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("CSV header lacks {k}")))
                };
                let num = |k: &str| -> Result<f64> {
                    get(k)?.parse().map_err(|_| Error::Format(format!("bad {k} in CSV header")))
                };
                header = Some((num("lines")? as usize, num("half_bins")? as usize, num("radius_bound")?, num("noise_variance")?));
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            for tok in line.split(',') {
                values.push(
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad number {tok:?}")))?,
                );
            }
        }
        let (l, m, r, s2) = header.ok_or_else(|| Error::Format("CSV header missing".into()))?;
        Self::from_rows(values, l, m, r, s2)
    }
}

impl LineSource for ProjectionSet {
    fn line_count(&self) -> usize {
        self.line_count
    }

    fn half_bins(&self) -> usize {
        self.half_bins
    }

    fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    fn radius_bound(&self) -> f64 {
        self.radius_bound
    }

    fn line_parts(&self, index: usize, sparse: &mut Vec<(i64, f64)>, dense: &mut [f64]) -> bool {
        sparse.clear();
        dense.copy_from_slice(self.row(index));
        true
    }
}
