//! Point recovery from distance distributions on a grid.
//!
//! The plane is divided into `m` cells and a configuration is an indicator
//! `z` over cells. With `A_d(i, j) = 1` when cells `i` and `j` are `d`
//! apart (nearest distance bin), the pair histogram is
//! `Q(d) = z^T A_d z / m^2`, self-pairs included in bin 0. Recovery relaxes
//! `z` to `[0, 1]^m` with `sum z = K` and minimizes the cross entropy
//! `-sum_d t(d) log(Q(d) + eps)` plus a quadratic radial penalty by
//! projected gradient descent, then keeps the K largest entries.
//!
//! `A_d` depends only on the offset between cells, so it is stored as the
//! bin of every offset. `z^T A_d z` sums the autocorrelation of `z` over
//! the offsets of bin `d`, and `A_d z` is a correlation with an offset
//! kernel; both are evaluated with 2D FFTs.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DistanceAxis, DistanceDistribution};
use crate::rng::stream_rng;

/// Rectangular grid of cells with equally spaced centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cols: usize,
    pub rows: usize,
    pub cell_size: f64,
    /// Center of cell 0 (lowest x and y).
    pub origin: [f64; 2],
    /// Bins for pair and radial distances.
    pub bins: DistanceAxis,
}

impl GridSpec {
    /// Distance bins default to width `cell_size` starting at 0.
    pub fn new(cols: usize, rows: usize, cell_size: f64, origin: [f64; 2]) -> Result<Self> {
        if cols == 0 || rows == 0 || cols * rows < 2 {
            return Err(Error::invalid(format!("a {cols} x {rows} grid has fewer than two cells")));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!("cell size {cell_size} must be positive")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        let mut grid = GridSpec {
            cols,
            rows,
            cell_size,
            origin,
            bins: DistanceAxis::new(0.0, cell_size, 1)?,
        };
        let span = grid.diameter().max(grid.max_radius());
        grid.bins = DistanceAxis::new(0.0, cell_size, (span / cell_size).ceil() as usize + 1)?;
        Ok(grid)
    }

    /// `side x side` centers spanning `[-half_width, half_width]^2`.
    pub fn square(side: usize, half_width: f64) -> Result<Self> {
        if side < 2 {
            return Err(Error::invalid(format!("grid side {side} must be at least 2")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::invalid(format!("half width {half_width} must be positive")));
        }
        let cell = 2.0 * half_width / (side - 1) as f64;
        GridSpec::new(side, side, cell, [-half_width, -half_width])
    }

    /// Replaces the distance bins; they must reach every pair and radius.
    pub fn with_bins(mut self, bins: DistanceAxis) -> Result<Self> {
        let need = self.diameter().max(self.max_radius());
        if bins.start > 0.5 * bins.width || bins.bin_of(need).is_none() || bins.bin_of(0.0).is_none() {
            return Err(Error::invalid(format!("distance bins {bins:?} do not cover [0, {need}]")));
        }
        self.bins = bins;
        Ok(self)
    }

    pub fn cells(&self) -> usize {
        self.cols * self.rows
    }

    pub fn center(&self, i: usize) -> [f64; 2] {
        let (row, col) = (i / self.cols, i % self.cols);
        [
            self.origin[0] + col as f64 * self.cell_size,
            self.origin[1] + row as f64 * self.cell_size,
        ]
    }

    pub fn diameter(&self) -> f64 {
        self.cell_size * (((self.cols - 1).pow(2) + (self.rows - 1).pow(2)) as f64).sqrt()
    }

    fn max_radius(&self) -> f64 {
        (0..4)
            .map(|c| {
                let i = if c & 1 == 0 { 0 } else { self.cols - 1 };
                let j = if c & 2 == 0 { 0 } else { self.rows - 1 };
                let p = self.center(j * self.cols + i);
                p[0].hypot(p[1])
            })
            .fold(0.0, f64::max)
    }

    /// Cell whose center is nearest to `p`, if `p` lies on the grid.
    pub fn nearest_cell(&self, p: [f64; 2]) -> Option<usize> {
        let col = ((p[0] - self.origin[0]) / self.cell_size).round();
        let row = ((p[1] - self.origin[1]) / self.cell_size).round();
        if col < 0.0 || row < 0.0 || col >= self.cols as f64 || row >= self.rows as f64 {
            return None;
        }
        Some(row as usize * self.cols + col as usize)
    }
}

impl Default for GridSpec {
    /// 33 x 33 centers over `[-1, 1]^2`, cell size 1/16.
    fn default() -> Self {
        GridSpec::square(33, 1.0).expect("valid default grid")
    }
}

/// Structural distance operators of a grid.
#[derive(Debug, Clone)]
pub struct DistanceOperators {
    grid: GridSpec,
    /// Bin of offset `(dx, dy)` at `(dy + rows - 1) * (2 cols - 1) + dx + cols - 1`.
    offset_bin: Vec<usize>,
    radial_bin: Vec<usize>,
}

impl DistanceOperators {
    pub fn new(grid: GridSpec) -> Self {
        let (w, h) = (2 * grid.cols - 1, 2 * grid.rows - 1);
        let mut offset_bin = Vec::with_capacity(w * h);
        for oy in 0..h {
            for ox in 0..w {
                let dx = ox as f64 - (grid.cols - 1) as f64;
                let dy = oy as f64 - (grid.rows - 1) as f64;
                let d = grid.cell_size * dx.hypot(dy);
                offset_bin.push(grid.bins.bin_of(d).expect("bins cover the grid"));
            }
        }
        let radial_bin = (0..grid.cells())
            .map(|i| {
                let c = grid.center(i);
                grid.bins.bin_of(c[0].hypot(c[1])).expect("bins cover the grid")
            })
            .collect();
        DistanceOperators {
            grid,
            offset_bin,
            radial_bin,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn bins(&self) -> usize {
        self.grid.bins.len
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    fn offset_index(&self, dx: isize, dy: isize) -> usize {
        let g = &self.grid;
        (dy + g.rows as isize - 1) as usize * (2 * g.cols - 1) + (dx + g.cols as isize - 1) as usize
    }

    /// Bin of the pair `(i, j)`.
    pub fn pair_bin(&self, i: usize, j: usize) -> usize {
        let c = self.grid.cols as isize;
        let (ri, ci) = (i as isize / c, i as isize % c);
        let (rj, cj) = (j as isize / c, j as isize % c);
        self.offset_bin[self.offset_index(cj - ci, rj - ri)]
    }

    /// Radial bin of cell `i`.
    pub fn radial_bin(&self, i: usize) -> usize {
        self.radial_bin[i]
    }

    /// Ordered cell pairs with `A_d(i, j) = 1`.
    pub fn bin_pairs(&self, d: usize) -> Vec<(usize, usize)> {
        let m = self.cells();
        let mut out = Vec::new();
        for i in 0..m {
            for j in 0..m {
                if self.pair_bin(i, j) == d {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// `A_d z`.
    pub fn apply(&self, d: usize, z: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.bins()];
        w[d] = 1.0;
        self.correlate(&w, z)
    }

    /// `sum_d w[d] (A_d z)_i` by direct summation over offsets.
    fn correlate(&self, w: &[f64], z: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let (cols, rows) = (g.cols as isize, g.rows as isize);
        let mut out = vec![0.0; self.cells()];
        for (j, &zj) in z.iter().enumerate() {
            if zj == 0.0 {
                continue;
            }
            let (rj, cj) = (j as isize / cols, j as isize % cols);
            for ri in 0..rows {
                for ci in 0..cols {
                    let wd = w[self.offset_bin[self.offset_index(cj - ci, rj - ri)]];
                    out[(ri * cols + ci) as usize] += wd * zj;
                }
            }
        }
        out
    }

    /// `Q(d) = z^T A_d z / m^2` by direct summation.
    pub fn q_of_d(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.cells(), "indicator length must equal the cell count");
        let g = &self.grid;
        let cols = g.cols as isize;
        let m2 = (self.cells() * self.cells()) as f64;
        let mut q = vec![0.0; self.bins()];
        let nz: Vec<(isize, isize, f64)> = z
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as isize / cols, i as isize % cols, v))
            .collect();
        for &(ri, ci, zi) in &nz {
            for &(rj, cj, zj) in &nz {
                q[self.offset_bin[self.offset_index(cj - ci, rj - ri)]] += zi * zj;
            }
        }
        for v in &mut q {
            *v /= m2;
        }
        q
    }

    /// `R z`: indicator mass per radial bin.
    pub fn radial(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bins()];
        for (&b, &v) in self.radial_bin.iter().zip(z) {
            out[b] += v;
        }
        out
    }
}

/// 2D complex FFT on a `width x height` torus (row-major).
struct Fft2 {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    column: Vec<Complex64>,
}

impl Fft2 {
    fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            column: vec![Complex64::new(0.0, 0.0); height],
        }
    }

    fn run(&mut self, data: &mut [Complex64], inverse: bool) {
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(data);
        for x in 0..self.width {
            for y in 0..self.height {
                self.column[y] = data[y * self.width + x];
            }
            col.process(&mut self.column);
            for y in 0..self.height {
                data[y * self.width + x] = self.column[y];
            }
        }
        if inverse {
            let scale = 1.0 / (self.width * self.height) as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// How the cross-entropy term and its gradient are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Direct,
    Fft,
}

/// Known projection line with its angle, enforced as a penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineConstraint {
    pub angle: f64,
    /// `2M + 1` bin values.
    pub values: Vec<f64>,
    pub radius_bound: f64,
    pub weight: f64,
}

/// Targets and weights of the relaxed problem.
#[derive(Debug, Clone)]
pub struct UdgpProblem {
    ops: Arc<DistanceOperators>,
    k: usize,
    /// Target over grid bins, self-pair mass included; sums to 1.
    pair_target: Vec<f64>,
    radial_target: Vec<f64>,
    radial_weight: f64,
    epsilon: f64,
    line: Option<(Vec<Option<usize>>, Vec<f64>, f64)>,
    /// Spread of each pair bin over its neighbours, `(target, weight)`.
    blur: Option<Vec<Vec<(usize, f64)>>>,
}

impl UdgpProblem {
    /// Targets already on the grid bins. `pair_target` must account for
    /// self-pairs in bin 0.
    pub fn from_grid_targets(
        ops: Arc<DistanceOperators>,
        k: usize,
        pair_target: Vec<f64>,
        radial_target: Vec<f64>,
    ) -> Result<Self> {
        let m = ops.cells();
        if k == 0 || k > m {
            return Err(Error::Infeasible(format!("cannot place K = {k} points on {m} cells")));
        }
        for (name, v) in [("pair", &pair_target), ("radial", &radial_target)] {
            if v.len() != ops.bins() {
                return Err(Error::invalid(format!(
                    "{name} target has {} bins, the grid has {}",
                    v.len(),
                    ops.bins()
                )));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::invalid(format!("{name} target must be finite and nonnegative")));
            }
        }
        Ok(UdgpProblem {
            ops,
            k,
            pair_target,
            radial_target,
            radial_weight: 1.0,
            epsilon: 1e-12,
            line: None,
            blur: None,
        })
    }

    /// Rebins `p_c` (distinct pairs) and `p_mu` onto the grid bins and adds
    /// the self-pair share `1/K` to bin 0 of the pair target.
    pub fn new(ops: Arc<DistanceOperators>, k: usize, p_c: &DistanceDistribution, p_mu: &DistanceDistribution) -> Result<Self> {
        let bins = ops.grid().bins;
        let self_share = 1.0 / k.max(1) as f64;
        let mut pair: Vec<f64> = p_c.rebinned(bins).mass().iter().map(|v| v * (1.0 - self_share)).collect();
        pair[0] += self_share;
        let radial = p_mu.rebinned(bins).mass().to_vec();
        UdgpProblem::from_grid_targets(ops, k, pair, radial)
    }

    pub fn with_radial_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("radial weight {weight} must be nonnegative")));
        }
        self.radial_weight = weight;
        Ok(self)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon {epsilon} must be positive")));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    /// Compares the target with `Q` smoothed by a Gaussian of `sigma` bins,
    /// so that distances snapped to the grid may land in a neighbouring bin.
    /// Zero turns smoothing off.
    pub fn with_bin_blur(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("blur width {sigma} must be finite and nonnegative")));
        }
        if sigma == 0.0 {
            self.blur = None;
            return Ok(self);
        }
        let n = self.ops.bins();
        let reach = (3.0 * sigma).ceil() as usize;
        let columns = (0..n)
            .map(|b| {
                let lo = b.saturating_sub(reach);
                let hi = (b + reach).min(n - 1);
                let w: Vec<(usize, f64)> = (lo..=hi)
                    .map(|t| {
                        let x = (t as f64 - b as f64) / sigma;
                        (t, (-0.5 * x * x).exp())
                    })
                    .collect();
                let total: f64 = w.iter().map(|(_, v)| v).sum();
                w.into_iter().map(|(t, v)| (t, v / total)).collect()
            })
            .collect();
        self.blur = Some(columns);
        Ok(self)
    }

    /// Adds `weight * ||P z - s||^2` for one line of known angle.
    pub fn with_line(mut self, line: &LineConstraint) -> Result<Self> {
        if line.values.len() % 2 == 0 || !(line.radius_bound > 0.0) || !(line.weight >= 0.0) {
            return Err(Error::invalid("line constraint needs 2M + 1 values, R > 0 and a nonnegative weight"));
        }
        let half = (line.values.len() / 2) as i64;
        let delta = crate::projector::bin_width(line.radius_bound, half as usize);
        let (s, c) = line.angle.sin_cos();
        let grid = self.ops.grid();
        let bins = (0..grid.cells())
            .map(|i| {
                let p = grid.center(i);
                let u = ((p[1] * c - p[0] * s) / delta + 0.5).floor() as i64;
                (u.abs() <= half).then(|| (u + half) as usize)
            })
            .collect();
        self.line = Some((bins, line.values.clone(), line.weight));
        Ok(self)
    }

    pub fn operators(&self) -> &DistanceOperators {
        &self.ops
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pair_target(&self) -> &[f64] {
        &self.pair_target
    }

    fn penalties(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let mut value = 0.0;
        if self.radial_weight > 0.0 {
            let kf = self.k as f64;
            let rz = self.ops.radial(z);
            let resid: Vec<f64> = rz.iter().zip(&self.radial_target).map(|(a, r)| a / kf - r).collect();
            value += self.radial_weight * resid.iter().map(|v| v * v).sum::<f64>();
            for (i, g) in grid_iter(grad) {
                *g += 2.0 * self.radial_weight * resid[self.ops.radial_bin(i)] / kf;
            }
        }
        if let Some((bins, values, weight)) = &self.line {
            let mut pz = vec![0.0; values.len()];
            for (b, &v) in bins.iter().zip(z) {
                if let Some(b) = b {
                    pz[*b] += v;
                }
            }
            let resid: Vec<f64> = pz.iter().zip(values).map(|(a, s)| a - s).collect();
            value += weight * resid.iter().map(|v| v * v).sum::<f64>();
            for (b, g) in bins.iter().zip(grad.iter_mut()) {
                if let Some(b) = b {
                    *g += 2.0 * weight * resid[*b];
                }
            }
        }
        value
    }

    fn smoothed(&self, q: &[f64]) -> Vec<f64> {
        match &self.blur {
            None => q.to_vec(),
            Some(cols) => {
                let mut out = vec![0.0; q.len()];
                for (col, &v) in cols.iter().zip(q) {
                    for &(t, w) in col {
                        out[t] += w * v;
                    }
                }
                out
            }
        }
    }

    fn cross_entropy(&self, q: &[f64]) -> f64 {
        -self
            .pair_target
            .iter()
            .zip(self.smoothed(q))
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, qd)| t * (qd + self.epsilon).ln())
            .sum::<f64>()
    }

    /// Cross-entropy and its derivative with respect to each bin of
    /// `z^T A_d z`.
    fn pair_term(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let m2 = (self.ops.cells() * self.ops.cells()) as f64;
        let qs = self.smoothed(q);
        let ws: Vec<f64> = self
            .pair_target
            .iter()
            .zip(&qs)
            .map(|(t, qd)| if *t > 0.0 { -2.0 * t / (m2 * (qd + self.epsilon)) } else { 0.0 })
            .collect();
        let w = match &self.blur {
            None => ws,
            Some(cols) => cols.iter().map(|col| col.iter().map(|&(t, g)| g * ws[t]).sum()).collect(),
        };
        (self.cross_entropy(q), w)
    }

    /// Penalized objective and gradient by direct summation.
    pub fn objective_and_gradient(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let q = self.ops.q_of_d(z);
        let (ce, w) = self.pair_term(&q);
        let mut grad = self.ops.correlate(&w, z);
        let value = ce + self.penalties(z, &mut grad);
        (value, grad)
    }

    /// Penalized objective alone.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let mut scratch = vec![0.0; z.len()];
        self.cross_entropy(&self.ops.q_of_d(z)) + self.penalties(z, &mut scratch)
    }
}

fn grid_iter(grad: &mut [f64]) -> impl Iterator<Item = (usize, &mut f64)> {
    grad.iter_mut().enumerate()
}

/// FFT evaluator of a problem's objective and gradient.
pub struct FftEvaluator<'a> {
    problem: &'a UdgpProblem,
    fft: Fft2,
    /// Bin of each torus position, or `usize::MAX` outside the offset range.
    torus_bin: Vec<usize>,
    zhat: Vec<Complex64>,
    work: Vec<Complex64>,
}

impl<'a> FftEvaluator<'a> {
    pub fn new(problem: &'a UdgpProblem) -> Self {
        let grid = problem.ops.grid();
        let (cols, rows) = (grid.cols, grid.rows);
        let (width, height) = (2 * cols, 2 * rows);
        let mut torus_bin = vec![usize::MAX; width * height];
        for dy in -(rows as isize - 1)..rows as isize {
            for dx in -(cols as isize - 1)..cols as isize {
                let x = dx.rem_euclid(width as isize) as usize;
                let y = dy.rem_euclid(height as isize) as usize;
                torus_bin[y * width + x] = problem.ops.offset_bin[problem.ops.offset_index(dx, dy)];
            }
        }
        FftEvaluator {
            problem,
            fft: Fft2::new(width, height),
            torus_bin,
            zhat: vec![Complex64::new(0.0, 0.0); width * height],
            work: vec![Complex64::new(0.0, 0.0); width * height],
        }
    }

    pub fn objective_and_gradient(&mut self, z: &[f64]) -> (f64, Vec<f64>) {
        let p = self.problem;
        let grid = p.ops.grid();
        let (cols, rows) = (grid.cols, grid.rows);
        let width = self.fft.width;
        let zero = Complex64::new(0.0, 0.0);
        self.zhat.fill(zero);
        for r in 0..rows {
            for c in 0..cols {
                self.zhat[r * width + c] = Complex64::new(z[r * cols + c], 0.0);
            }
        }
        self.fft.run(&mut self.zhat, false);
        for (w, zh) in self.work.iter_mut().zip(&self.zhat) {
            *w = Complex64::new(zh.norm_sqr(), 0.0);
        }
        self.fft.run(&mut self.work, true);
        let m2 = (p.ops.cells() * p.ops.cells()) as f64;
        let mut q = vec![0.0; p.ops.bins()];
        for (&b, ac) in self.torus_bin.iter().zip(&self.work) {
            if b != usize::MAX {
                q[b] += ac.re;
            }
        }
        for v in &mut q {
            *v /= m2;
        }
        let (ce, w) = p.pair_term(&q);
        for (slot, &b) in self.work.iter_mut().zip(&self.torus_bin) {
            *slot = if b == usize::MAX { zero } else { Complex64::new(w[b], 0.0) };
        }
        self.fft.run(&mut self.work, false);
        for (slot, zh) in self.work.iter_mut().zip(&self.zhat) {
            *slot = zh * slot.conj();
        }
        self.fft.run(&mut self.work, true);
        let mut grad = vec![0.0; p.ops.cells()];
        for r in 0..rows {
            for c in 0..cols {
                grad[r * cols + c] = self.work[r * width + c].re;
            }
        }
        let value = ce + p.penalties(z, &mut grad);
        (value, grad)
    }
}

/// Euclidean projection onto `{z : sum z = k, 0 <= z_i <= 1}`.
///
/// `z_i = clip(v_i - tau, 0, 1)`; `tau` is bracketed by bisection and then
/// solved exactly on the resulting active set.
pub fn project_constraints(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let m = v.len();
    if k > m {
        return Err(Error::Infeasible(format!("sum {k} exceeds the {m} available cells")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("projection input must be finite"));
    }
    let kf = k as f64;
    let total = |tau: f64| v.iter().map(|x| (x - tau).clamp(0.0, 1.0)).sum::<f64>();
    let lo_v = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_v = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (lo_v - 1.0, hi_v);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > kf {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..8 {
        let (mut free_sum, mut free, mut ones) = (0.0, 0usize, 0usize);
        for &x in v {
            let y = x - tau;
            if y >= 1.0 {
                ones += 1;
            } else if y > 0.0 {
                free += 1;
                free_sum += x;
            }
        }
        if free == 0 {
            break;
        }
        let next = (free_sum + ones as f64 - kf) / free as f64;
        if next == tau {
            break;
        }
        tau = next;
    }
    let z: Vec<f64> = v.iter().map(|x| (x - tau).clamp(0.0, 1.0)).collect();
    let s: f64 = z.iter().sum();
    if (s - kf).abs() > 1e-9 {
        return Err(Error::Domain(format!("projection missed the sum constraint by {}", s - kf)));
    }
    Ok(z)
}

/// Indices of the K largest entries; ties go to the lowest index.
pub fn top_k(z: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoverOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub initial_step: f64,
    /// Stop when no entry of `z` moves by more than this.
    pub tolerance: f64,
    /// Also stop once the top-K cells have not changed for this many
    /// iterations; 0 disables the rule.
    pub patience: usize,
    pub seed: u64,
    pub backend: Backend,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        RecoverOptions {
            restarts: 10,
            max_iters: 2000,
            initial_step: 1.0,
            tolerance: 1e-7,
            patience: 0,
            seed: 0,
            backend: Backend::Fft,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub iterations: usize,
    pub final_objective: f64,
    pub binarized_objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recovery {
    /// Binary indicator with exactly K ones.
    pub z: Vec<f64>,
    pub relaxed: Vec<f64>,
    pub cells: Vec<usize>,
    pub locations: Vec<[f64; 2]>,
    /// Objective after every iteration of the selected restart.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub restarts: Vec<RestartSummary>,
}

struct RunOutcome {
    z: Vec<f64>,
    trace: Vec<f64>,
    converged: bool,
}

fn run_pgd(problem: &UdgpProblem, opts: &RecoverOptions, restart: usize) -> Result<RunOutcome> {
    let m = problem.ops.cells();
    let k = problem.k;
    let mut rng = stream_rng(opts.seed, restart as u64);
    let start: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    let mut z = project_constraints(&start, k)?;
    let mut fft = (opts.backend == Backend::Fft).then(|| FftEvaluator::new(problem));
    let mut eval = |z: &[f64]| match fft.as_mut() {
        Some(f) => f.objective_and_gradient(z),
        None => problem.objective_and_gradient(z),
    };
    let (mut f, mut g) = eval(&z);
    if !f.is_finite() {
        return Err(Error::Domain("objective is not finite at the starting point".into()));
    }
    let mut trace = vec![f];
    let mut step = opts.initial_step;
    let mut converged = false;
    let mut support = top_k(&z, k);
    let mut unchanged = 0usize;
    for _ in 0..opts.max_iters {
        let mut s = (2.0 * step).min(opts.initial_step);
        let mut accepted = None;
        for _ in 0..80 {
            let trial: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - s * b).collect();
            let zn = project_constraints(&trial, k)?;
            let (lin, sq) = zn.iter().zip(&z).zip(&g).fold((0.0, 0.0), |(l, q), ((a, b), gi)| {
                let d = a - b;
                (l + gi * d, q + d * d)
            });
            let (fnew, gnew) = eval(&zn);
            if fnew.is_finite() && fnew <= f + lin + sq / (2.0 * s) && fnew <= f {
                accepted = Some((zn, fnew, gnew, sq));
                break;
            }
            s *= 0.5;
        }
        let Some((zn, fnew, gnew, _)) = accepted else {
            converged = true;
            break;
        };
        step = s;
        let moved = zn.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(fnew <= f + 1e-12 * f.abs().max(1.0), "objective increased from {f} to {fnew}");
        let sum: f64 = zn.iter().sum();
        assert!(
            (sum - k as f64).abs() <= 1e-9 && zn.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "iterate left the feasible set"
        );
        z = zn;
        f = fnew;
        g = gnew;
        trace.push(f);
        if moved <= opts.tolerance {
            converged = true;
            break;
        }
        if opts.patience > 0 {
            let now = top_k(&z, k);
            if now == support {
                unchanged += 1;
                if unchanged >= opts.patience {
                    converged = true;
                    break;
                }
            } else {
                support = now;
                unchanged = 0;
            }
        }
    }
    Ok(RunOutcome { z, trace, converged })
}

/// Multi-restart projected gradient descent. The restart whose top-K
/// binarization scores the lowest objective is returned.
pub fn recover(problem: &UdgpProblem, opts: &RecoverOptions) -> Result<Recovery> {
    if opts.restarts == 0 {
        return Err(Error::invalid("at least one restart is required"));
    }
    if !(opts.initial_step > 0.0 && opts.initial_step.is_finite()) {
        return Err(Error::invalid("initial step must be positive"));
    }
    let runs: Vec<Result<RunOutcome>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..opts.restarts).into_par_iter().map(|r| run_pgd(problem, opts, r)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..opts.restarts).map(|r| run_pgd(problem, opts, r)).collect()
        }
    };
    let k = problem.k;
    let m = problem.ops.cells();
    let mut best: Option<(f64, usize)> = None;
    let mut summaries = Vec::with_capacity(opts.restarts);
    let mut outcomes = Vec::with_capacity(opts.restarts);
    for (r, run) in runs.into_iter().enumerate() {
        let run = run?;
        let cells = top_k(&run.z, k);
        let mut binary = vec![0.0; m];
        for &c in &cells {
            binary[c] = 1.0;
        }
        let score = problem.objective(&binary);
        summaries.push(RestartSummary {
            restart: r,
            iterations: run.trace.len() - 1,
            final_objective: *run.trace.last().expect("trace starts with the initial value"),
            binarized_objective: score,
            converged: run.converged,
        });
        if best.map_or(true, |(b, _)| score < b) {
            best = Some((score, r));
        }
        outcomes.push((run, cells, binary));
    }
    let (_, r) = best.expect("at least one restart");
    let (run, cells, binary) = outcomes.swap_remove(r);
    let grid = problem.ops.grid();
    Ok(Recovery {
        z: binary,
        relaxed: run.z,
        locations: cells.iter().map(|&c| grid.center(c)).collect(),
        cells,
        objective_trace: run.trace,
        converged: run.converged,
        restarts: summaries,
    })
}

/// Recovery report as written to `recovery.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub z: Vec<f64>,
    pub locations: Vec<[f64; 2]>,
    pub objective_trace: Vec<f64>,
    pub emd_pairwise: Option<f64>,
    pub emd_radial: Option<f64>,
    pub converged: bool,
    pub restarts: Vec<RestartSummary>,
}

impl Recovery {
    pub fn report(&self, emd_pairwise: Option<f64>, emd_radial: Option<f64>) -> RecoveryReport {
        RecoveryReport {
            z: self.z.clone(),
            locations: self.locations.clone(),
            objective_trace: self.objective_trace.clone(),
            emd_pairwise,
            emd_radial,
            converged: self.converged,
            restarts: self.restarts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ops(cols: usize, rows: usize) -> Arc<DistanceOperators> {
        Arc::new(DistanceOperators::new(GridSpec::new(cols, rows, 1.0, [0.0, 0.0]).unwrap()))
    }

    fn random_z(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 9);
        (0..m).map(|_| rng.random::<f64>()).collect()
    }

    /// Cross-entropy target matching a binary configuration exactly.
    fn exact_problem(ops: Arc<DistanceOperators>, cells: &[usize]) -> UdgpProblem {
        let m = ops.cells();
        let mut z = vec![0.0; m];
        for &c in cells {
            z[c] = 1.0;
        }
        let q = ops.q_of_d(&z);
        let s: f64 = q.iter().sum();
        let radial: Vec<f64> = ops.radial(&z).iter().map(|v| v / cells.len() as f64).collect();
        UdgpProblem::from_grid_targets(ops, cells.len(), q.iter().map(|v| v / s).collect(), radial).unwrap()
    }

    #[test]
    fn one_by_three_operators() {
        let o = ops(3, 1);
        assert_eq!(o.bin_pairs(1), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert_eq!(o.bin_pairs(2), vec![(0, 2), (2, 0)]);
        assert_eq!(o.bin_pairs(0), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn bins_partition_pairs() {
        let o = ops(8, 8);
        let mut seen = vec![0usize; 64 * 64];
        for d in 0..o.bins() {
            for (i, j) in o.bin_pairs(d) {
                seen[i * 64 + j] += 1;
                assert_eq!(o.pair_bin(j, i), d, "asymmetric bin");
                if d != 0 {
                    assert_ne!(i, j);
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn row_sums_match_double_loop() {
        let grid = GridSpec::square(16, 1.0).unwrap();
        let o = DistanceOperators::new(grid.clone());
        let ones = vec![1.0; o.cells()];
        for d in [0, 1, 3, 10, 20] {
            let sums = o.apply(d, &ones);
            for i in (0..o.cells()).step_by(7) {
                let a = grid.center(i);
                let brute = (0..o.cells())
                    .filter(|&j| {
                        let b = grid.center(j);
                        grid.bins.bin_of((a[0] - b[0]).hypot(a[1] - b[1])) == Some(d)
                    })
                    .count();
                assert_eq!(sums[i], brute as f64);
            }
        }
    }

    #[test]
    fn q_of_two_points() {
        let o = ops(4, 4);
        let mut z = vec![0.0; 16];
        z[5] = 1.0;
        z[6] = 1.0;
        let q = o.q_of_d(&z);
        assert_eq!(q[1], 2.0 / 256.0);
        assert_eq!(q[0], 2.0 / 256.0);
        assert_eq!(q.iter().sum::<f64>(), 4.0 / 256.0);
        assert!(o.q_of_d(&vec![0.0; 16]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q_matches_brute_force_histogram() {
        let grid = GridSpec::square(8, 1.0).unwrap();
        let o = DistanceOperators::new(grid.clone());
        let mut rng = stream_rng(2, 2);
        for _ in 0..20 {
            let z: Vec<f64> = (0..64).map(|_| if rng.random::<f64>() < 0.2 { 1.0 } else { 0.0 }).collect();
            let mut hist = vec![0.0; o.bins()];
            for i in 0..64 {
                for j in 0..64 {
                    if z[i] == 1.0 && z[j] == 1.0 {
                        let (a, b) = (grid.center(i), grid.center(j));
                        hist[grid.bins.bin_of((a[0] - b[0]).hypot(a[1] - b[1])).unwrap()] += 1.0;
                    }
                }
            }
            let q = o.q_of_d(&z);
            for (a, b) in q.iter().zip(&hist) {
                assert_eq!(*a, b / 4096.0);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let o = ops(8, 8);
        let p = exact_problem(o, &[3, 20, 41]);
        let mut rng = stream_rng(8, 1);
        for trial in 0..5 {
            let z = project_constraints(&random_z(64, trial), 3).unwrap();
            let (_, g) = p.objective_and_gradient(&z);
            for _ in 0..10 {
                let i = rng.random_range(0..64);
                let h = 1e-6;
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += h;
                zm[i] -= h;
                let fd = (p.objective(&zp) - p.objective(&zm)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "i = {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn blurred_objective_gradient_and_backends() {
        let o = ops(8, 8);
        let p = exact_problem(o, &[3, 20, 41]).with_bin_blur(1.2).unwrap();
        let mut fft = FftEvaluator::new(&p);
        let mut rng = stream_rng(4, 1);
        for trial in 0..3 {
            let z: Vec<f64> = project_constraints(&random_z(64, 50 + trial), 3)
                .unwrap()
                .iter()
                .map(|v| 0.5 * v + 0.02)
                .collect();
            let (f, g) = p.objective_and_gradient(&z);
            let (ff, gf) = fft.objective_and_gradient(&z);
            assert!((f - ff).abs() < 1e-9 * f.abs().max(1.0));
            for _ in 0..10 {
                let i = rng.random_range(0..64);
                let h = 1e-6;
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += h;
                zm[i] -= h;
                let fd = (p.objective(&zp) - p.objective(&zm)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0));
                assert!((gf[i] - g[i]).abs() <= 1e-9 * g[i].abs().max(1.0));
            }
        }
        // blurring conserves mass and zero width is the identity
        let q = vec![0.0, 1.0, 0.0, 0.0, 2.0];
        let sum: f64 = p.smoothed(&[q.clone(), vec![0.0; p.ops.bins() - 5]].concat()).iter().sum();
        assert!((sum - 3.0).abs() < 1e-12);
        let plain = p.clone().with_bin_blur(0.0).unwrap();
        assert_eq!(plain.smoothed(&q), q);
        assert!(plain.with_bin_blur(-1.0).is_err());
    }

    #[test]
    fn fft_backend_matches_direct() {
        for (cols, rows) in [(8, 8), (5, 9), (33, 33)] {
            let o = ops(cols, rows);
            let m = o.cells();
            let p = exact_problem(o, &[0, m / 2, m - 1]).with_radial_weight(0.5).unwrap();
            // strictly positive, so no pair bin is empty
            let z: Vec<f64> = project_constraints(&random_z(m, 3), 3)
                .unwrap()
                .iter()
                .map(|v| 0.5 * v + 1.5 / m as f64)
                .collect();
            let (fd, gd) = p.objective_and_gradient(&z);
            let (ff, gf) = FftEvaluator::new(&p).objective_and_gradient(&z);
            assert!((fd - ff).abs() < 1e-10 * fd.abs().max(1.0), "{cols}x{rows}: {fd} vs {ff}");
            for (a, b) in gd.iter().zip(&gf) {
                assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn exact_match_gives_entropy() {
        let o = ops(6, 6);
        let p = exact_problem(o.clone(), &[1, 14, 30]).with_radial_weight(0.0).unwrap();
        let mut z = vec![0.0; 36];
        for c in [1, 14, 30] {
            z[c] = 1.0;
        }
        let m2 = 36.0f64 * 36.0;
        let s = 9.0 / m2;
        // Q = s * t, so the cross entropy is H(t) - log s
        let h: f64 = -p.pair_target().iter().filter(|&&t| t > 0.0).map(|t| t * t.ln()).sum::<f64>();
        let p0 = p.with_epsilon(1e-300).unwrap();
        assert!((p0.objective(&z) - (h - s.ln())).abs() < 1e-9);
    }

    #[test]
    fn larger_epsilon_never_increases_objective() {
        let o = ops(6, 6);
        let p = exact_problem(o, &[0, 7, 35]);
        let z = project_constraints(&random_z(36, 4), 3).unwrap();
        let mut eps = 1e-12;
        let mut last = p.clone().with_epsilon(eps).unwrap().objective(&z);
        for _ in 0..20 {
            eps *= 2.0;
            let v = p.clone().with_epsilon(eps).unwrap().objective(&z);
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_constraints(&[2.0, 0.0, 0.0], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(project_constraints(&[0.5; 4], 2).unwrap(), vec![0.5; 4]);
        assert!(matches!(project_constraints(&[0.5; 4], 5), Err(Error::Infeasible(_))));
        assert_eq!(project_constraints(&[0.3, 0.9], 2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(project_constraints(&[0.3, 0.9], 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn projection_matches_dual_grid_search() {
        let v: Vec<f64> = random_z(100, 6).iter().map(|x| 3.0 * x - 1.0).collect();
        let z = project_constraints(&v, 3).unwrap();
        let at = |tau: f64| -> Vec<f64> { v.iter().map(|x| (x - tau).clamp(0.0, 1.0)).collect() };
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=400_000 {
            let tau = -2.0 + 4.0 * i as f64 / 400_000.0;
            let gap = (at(tau).iter().sum::<f64>() - 3.0).abs();
            if gap < best.0 {
                best = (gap, tau);
            }
        }
        for (a, b) in z.iter().zip(at(best.1)) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.5, 0.9, 0.5, 0.5, 0.1], 3), vec![0, 1, 2]);
    }

    #[test]
    fn two_points_recovered_exactly() {
        let grid = GridSpec::square(9, 1.0).unwrap();
        let o = Arc::new(DistanceOperators::new(grid.clone()));
        let cells = [grid.nearest_cell([-0.5, 0.0]).unwrap(), grid.nearest_cell([0.5, 0.0]).unwrap()];
        let p = exact_problem(o, &cells);
        let rec = recover(&p, &RecoverOptions { restarts: 4, ..RecoverOptions::default() }).unwrap();
        let d = |ls: &[[f64; 2]]| (ls[0][0] - ls[1][0]).hypot(ls[0][1] - ls[1][1]);
        assert!((d(&rec.locations) - 1.0).abs() < 0.01);
        assert_eq!(rec.z.iter().filter(|&&v| v == 1.0).count(), 2);
        for w in rec.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn restarts_are_deterministic() {
        let o = ops(7, 7);
        let p = exact_problem(o, &[2, 17, 33, 40]);
        let opts = RecoverOptions { restarts: 3, seed: 11, ..RecoverOptions::default() };
        let a = recover(&p, &opts).unwrap();
        let b = recover(&p, &opts).unwrap();
        assert_eq!(a.relaxed, b.relaxed);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn pgd_nearly_reaches_brute_force_optimum() {
        let o = ops(4, 4);
        let mut hits = 0;
        let trials = 20;
        for t in 0..trials {
            let mut rng = stream_rng(100 + t, 0);
            let k = 2 + (t % 2) as usize;
            let mut cells: Vec<usize> = Vec::new();
            while cells.len() < k {
                let c = rng.random_range(0..16);
                if !cells.contains(&c) {
                    cells.push(c);
                }
            }
            let p = exact_problem(o.clone(), &cells);
            let mut optimum = f64::INFINITY;
            let mut pick = vec![0usize; k];
            fn enumerate(p: &UdgpProblem, start: usize, depth: usize, pick: &mut Vec<usize>, best: &mut f64) {
                if depth == pick.len() {
                    let mut z = vec![0.0; 16];
                    for &c in pick.iter() {
                        z[c] = 1.0;
                    }
                    *best = best.min(p.objective(&z));
                    return;
                }
                for c in start..16 {
                    pick[depth] = c;
                    enumerate(p, c + 1, depth + 1, pick, best);
                }
            }
            enumerate(&p, 0, 0, &mut pick, &mut optimum);
            let rec = recover(&p, &RecoverOptions { seed: t, ..RecoverOptions::default() }).unwrap();
            let got = p.objective(&rec.z);
            if got <= optimum + 0.05 * optimum.abs() {
                hits += 1;
            }
        }
        assert!(hits * 10 >= trials * 8, "{hits}/{trials}");
    }

    #[test]
    fn line_constraint_penalizes_mismatch() {
        let grid = GridSpec::square(9, 1.0).unwrap();
        let o = Arc::new(DistanceOperators::new(grid.clone()));
        let cells = [grid.nearest_cell([-0.5, 0.25]).unwrap(), grid.nearest_cell([0.5, 0.0]).unwrap()];
        let model = crate::geometry::PointSourceModel::with_unit_weights(cells.iter().map(|&c| grid.center(c)).collect()).unwrap();
        let angle = 0.3;
        let line = LineConstraint {
            angle,
            values: crate::projector::project_line(&model, angle, 20).unwrap(),
            radius_bound: model.radius_bound(),
            weight: 1.0,
        };
        let p = exact_problem(o, &cells).with_radial_weight(0.0).unwrap().with_line(&line).unwrap();
        let mut z = vec![0.0; 81];
        for c in cells {
            z[c] = 1.0;
        }
        let base = exact_problem(p.ops.clone(), &cells).with_radial_weight(0.0).unwrap();
        assert!((p.objective(&z) - base.objective(&z)).abs() < 1e-12);
        let mut shifted = vec![0.0; 81];
        shifted[cells[0] + 1] = 1.0;
        shifted[cells[1] + 1] = 1.0;
        assert!(p.objective(&shifted) > base.objective(&shifted));
    }

    #[test]
    fn grid_defaults() {
        let g = GridSpec::default();
        assert_eq!(g.cells(), 33 * 33);
        assert!((g.cell_size - 1.0 / 16.0).abs() < 1e-15);
        assert_eq!(g.center(0), [-1.0, -1.0]);
        assert_eq!(g.center(33 * 33 - 1), [1.0, 1.0]);
        assert!(g.bins.bin_of(g.diameter()).is_some());
        assert!(GridSpec::square(1, 1.0).is_err());
        assert!(GridSpec::new(1, 1, 1.0, [0.0, 0.0]).is_err());
        assert!(g.clone().with_bins(DistanceAxis::new(0.0, 0.01, 10).unwrap()).is_err());
        assert_eq!(g.nearest_cell([0.01, -0.02]), Some(16 * 33 + 16));
        assert_eq!(g.nearest_cell([1.2, 0.0]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn projection_is_feasible_and_idempotent(v in prop::collection::vec(-3.0..3.0f64, 1..80), k in 0usize..80) {
            let k = k.min(v.len());
            let z = project_constraints(&v, k).unwrap();
            prop_assert!((z.iter().sum::<f64>() - k as f64).abs() <= 1e-9);
            prop_assert!(z.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let again = project_constraints(&z, k).unwrap();
            for (a, b) in z.iter().zip(&again) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
