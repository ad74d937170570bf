//! Seeded trial batches, resumable result tables and single-run bundles.
//!
//! Every trial derives its seeds from `(base seed, K, M, SNR, trial)`, so a
//! cell's results do not depend on which other cells run, on their order,
//! or on the number of worker threads.
//!
//! Layout of a table run:
//!
//! ```text
//! <root>/<run-id>/config.json
//! <root>/<run-id>/cells/k5_m100_snrinf.csv   one row per trial, "# complete" last
//! <root>/<run-id>/summary.csv
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dde::{estimate_distributions, write_distributions_csv, HankelConfig, HankelPlan};
use crate::error::{Error, Result};
use crate::features::{analytic_features, estimate_features, integer_axis, write_features_csv, EstimateOptions};
use crate::geometry::{generate_model, true_distance_distribution, DistanceAxis, DistanceDistribution, PointSourceModel};
use crate::metrics::{emd_1d, success_rate};
use crate::pbde::{estimate_pairwise_distances, estimate_radial_distances, max_matched_error, PbdeOptions};
use crate::projector::{LineSource, SimulatedLines};
use crate::rng::derive_seed;
use crate::udgp::{recover, DistanceOperators, GridSpec, RecoverOptions, Recovery, RecoveryReport, UdgpProblem};

const COMPLETE_MARKER: &str = "# complete";

/// Signal-to-noise ratio; infinite means noiseless. Written as `inf` in
/// files and on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr(pub f64);

impl Snr {
    pub const NOISELESS: Snr = Snr(f64::INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let v = if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            f64::INFINITY
        } else {
            t.parse::<f64>().map_err(|_| Error::invalid(format!("snr: cannot parse {s:?}")))?
        };
        if !(v > 0.0) {
            return Err(Error::invalid(format!("snr: {s} must be positive or inf")));
        }
        Ok(Snr(v))
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 => Ok(Snr(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("snr {v} must be positive"))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Pipeline settings shared by tables and single runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Knobs {
    pub lines: usize,
    pub nu_min: usize,
    pub grid_side: usize,
    /// Move each model's centroid to the origin before projecting.
    pub recenter: bool,
    pub denoise_iterations: usize,
    pub amplitude_allocation: bool,
    pub orthogonality_weight: bool,
    pub radial_weight: f64,
    pub epsilon: f64,
    /// Gaussian smoothing of the model pair histogram, in grid bins.
    pub pair_blur: f64,
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop a restart once its top-K support is stable this long; 0 disables.
    pub patience: usize,
    /// Noise variance used for debiasing instead of the simulated one.
    pub sigma2: Option<f64>,
}

impl Default for Knobs {
    fn default() -> Self {
        let rec = RecoverOptions::default();
        Knobs {
            lines: 10_000,
            nu_min: 10,
            grid_side: 33,
            recenter: false,
            denoise_iterations: crate::pbde::DEFAULT_DENOISE_ITERATIONS,
            amplitude_allocation: true,
            orthogonality_weight: true,
            radial_weight: 1.0,
            epsilon: 1e-12,
            pair_blur: 0.7,
            restarts: rec.restarts,
            max_iters: rec.max_iters,
            patience: rec.patience,
            sigma2: None,
        }
    }
}

impl Knobs {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        if self.lines == 0 {
            return bad("lines", "must be at least 1");
        }
        if self.nu_min == 0 {
            return bad("nu_min", "must be at least 1");
        }
        if self.grid_side < 2 {
            return bad("grid_side", "must be at least 2");
        }
        if !(self.radial_weight >= 0.0 && self.radial_weight.is_finite()) {
            return bad("radial_weight", "must be finite and nonnegative");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be positive");
        }
        if !(self.pair_blur >= 0.0 && self.pair_blur.is_finite()) {
            return bad("pair_blur", "must be finite and nonnegative");
        }
        if self.restarts == 0 {
            return bad("restarts", "must be at least 1");
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be at least 1");
        }
        if let Some(s) = self.sigma2 {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("sigma2", "must be finite and nonnegative");
            }
        }
        Ok(())
    }

    pub fn pbde_options(&self, half_bins: usize) -> PbdeOptions {
        PbdeOptions {
            nu_min: self.nu_min,
            denoise_iterations: self.denoise_iterations,
            amplitude_allocation: self.amplitude_allocation,
            ..PbdeOptions::for_half_bins(half_bins)
        }
    }

    pub fn hankel_config(&self, half_bins: usize, radius_bound: f64) -> HankelConfig {
        HankelConfig {
            orthogonality_weight: self.orthogonality_weight,
            ..HankelConfig::for_half_bins(half_bins, radius_bound)
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::square(self.grid_side, 1.0)
    }

    pub fn recover_options(&self, seed: u64) -> RecoverOptions {
        RecoverOptions {
            restarts: self.restarts,
            max_iters: self.max_iters,
            patience: self.patience,
            seed,
            ..RecoverOptions::default()
        }
    }

    pub fn estimate_options(&self) -> EstimateOptions {
        EstimateOptions {
            sigma2_override: self.sigma2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableKind {
    /// Radial distances by the annihilating filter.
    Pbde,
    /// Distance distributions followed by grid recovery.
    Recovery,
}

/// A grid of (K, M, SNR) cells with a fixed number of trials each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub kind: TableKind,
    pub ks: Vec<usize>,
    pub half_bins: Vec<usize>,
    pub snrs: Vec<Snr>,
    pub trials: usize,
    pub seed: u64,
    /// Pbde: largest matched error as a fraction of R. Recovery: EMD.
    pub threshold: f64,
    #[serde(default)]
    pub knobs: Knobs,
}

impl TableConfig {
    pub fn pbde() -> Self {
        TableConfig {
            kind: TableKind::Pbde,
            ks: vec![5, 10],
            half_bins: vec![100, 500, 1000, 1500],
            snrs: vec![Snr::NOISELESS, Snr(100.0), Snr(10.0), Snr(1.0)],
            trials: 100,
            seed: 0,
            threshold: 0.05,
            knobs: Knobs::default(),
        }
    }

    pub fn recovery() -> Self {
        TableConfig {
            kind: TableKind::Recovery,
            snrs: vec![Snr::NOISELESS, Snr(100.0), Snr(10.0), Snr(1.0), Snr(0.5)],
            threshold: 0.1,
            ..TableConfig::pbde()
        }
    }

    pub fn for_kind(kind: TableKind) -> Self {
        match kind {
            TableKind::Pbde => TableConfig::pbde(),
            TableKind::Recovery => TableConfig::recovery(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::invalid(format!("{field}: {why}")));
        if self.trials == 0 {
            return bad("trials", "must be at least 1".into());
        }
        if self.ks.is_empty() || self.half_bins.is_empty() || self.snrs.is_empty() {
            return bad("ks/half_bins/snrs", "every axis needs at least one value".into());
        }
        if let Some(k) = self.ks.iter().find(|&&k| k < 2) {
            return bad("ks", format!("K = {k} has no pairs; use K >= 2"));
        }
        if let Some(m) = self.half_bins.iter().find(|&&m| m == 0) {
            return bad("half_bins", format!("M = {m} must be at least 1"));
        }
        if let Some(s) = self.snrs.iter().find(|s| !(s.0 > 0.0)) {
            return bad("snrs", format!("{s} must be positive or inf"));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return bad("threshold", format!("{} must be positive", self.threshold));
        }
        self.knobs.validate()?;
        if self.kind == TableKind::Pbde {
            for &k in &self.ks {
                for &m in &self.half_bins {
                    let o = self.knobs.pbde_options(m);
                    if o.nu_max < o.nu_min + 4 * k {
                        return bad(
                            "half_bins",
                            format!("M = {m} leaves the window [{}, {}] too short for K = {k}", o.nu_min, o.nu_max),
                        );
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &k in &self.ks {
            for &m in &self.half_bins {
                for &snr in &self.snrs {
                    out.push(Cell { k, half_bins: m, snr });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub k: usize,
    pub half_bins: usize,
    pub snr: Snr,
}

impl Cell {
    pub fn file_name(&self) -> String {
        format!("k{}_m{}_snr{}.csv", self.k, self.half_bins, self.snr)
    }
}

/// Seeds of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeeds {
    pub trial: u64,
    pub model: u64,
    pub data: u64,
    pub solver: u64,
}

pub fn trial_seeds(base: u64, cell: &Cell, trial: usize) -> TrialSeeds {
    let root = derive_seed(&[base, cell.k as u64, cell.half_bins as u64, cell.snr.0.to_bits(), trial as u64]);
    TrialSeeds {
        trial: root,
        model: derive_seed(&[root, 1]),
        data: derive_seed(&[root, 2]),
        solver: derive_seed(&[root, 3]),
    }
}

/// Random unit-weight model on `[-1, 1]^2`. With `recenter`, draws are
/// repeated until the centered model still fits the square.
pub fn trial_model(k: usize, seed: u64, recenter: bool) -> Result<PointSourceModel> {
    if !recenter {
        return generate_model(k, seed, 1.0);
    }
    for attempt in 0..1000u64 {
        let model = generate_model(k, derive_seed(&[seed, attempt]), 1.0)?;
        if let Ok(centered) = model.recentered() {
            return Ok(centered);
        }
    }
    Err(Error::Domain(format!("no centered model with K = {k} fits the unit square")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PbdeTrial {
    pub trial: usize,
    pub seed: u64,
    /// Largest matched radial error over R; infinite when too few were found.
    pub radial_error: f64,
    pub pairwise_error: f64,
}

impl PbdeTrial {
    pub fn succeeded(&self, threshold: f64) -> bool {
        self.radial_error < threshold
    }
}

/// Largest matched error of radial and pairwise distances, relative to R.
pub fn pbde_errors<S: LineSource + ?Sized>(model: &PointSourceModel, data: &S, knobs: &Knobs) -> Result<(f64, f64)> {
    let k = model.len();
    let r = model.radius_bound();
    let opts = knobs.pbde_options(data.half_bins());
    let features = estimate_features(data, k, &integer_axis(opts.nu_min, opts.nu_max), knobs.estimate_options())?;
    let radial = estimate_radial_distances(&features, k, r, opts)?;
    let pairwise = estimate_pairwise_distances(&features, k, r, opts)?;
    let rel = |est: &[f64], truth: &[f64]| max_matched_error(est, truth).map_or(f64::INFINITY, |e| e / r);
    Ok((
        rel(&radial.distances, &model.radial_distances()),
        rel(&pairwise.distances, &model.unordered_pair_distances()),
    ))
}

pub fn run_pbde_trial(cell: &Cell, base_seed: u64, trial: usize, knobs: &Knobs) -> Result<PbdeTrial> {
    let seeds = trial_seeds(base_seed, cell, trial);
    let model = trial_model(cell.k, seeds.model, knobs.recenter)?;
    let data = SimulatedLines::new(&model, knobs.lines, cell.half_bins, cell.snr.0, seeds.data)?;
    let (radial_error, pairwise_error) = pbde_errors(&model, &data, knobs)?;
    Ok(PbdeTrial {
        trial,
        seed: seeds.trial,
        radial_error,
        pairwise_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryTrial {
    pub trial: usize,
    pub seed: u64,
    /// EMD between the recovered and the true pair-distance histograms.
    pub emd_pairwise: f64,
    pub emd_radial: f64,
    /// EMD between the estimated pairwise distribution and the truth.
    pub emd_estimate: f64,
    pub converged: bool,
}

impl RecoveryTrial {
    pub fn succeeded(&self, threshold: f64) -> bool {
        self.emd_pairwise <= threshold
    }
}

/// Histograms of `points`' pair and radial distances on `axis`.
pub fn distance_histograms(points: &[[f64; 2]], axis: DistanceAxis) -> Result<(Option<DistanceDistribution>, DistanceDistribution)> {
    let radial: Vec<f64> = points.iter().map(|p| p[0].hypot(p[1])).collect();
    let mut pairs = Vec::new();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            pairs.push((points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]));
        }
    }
    let pairwise = if pairs.is_empty() {
        None
    } else {
        Some(true_distance_distribution(&pairs, axis)?)
    };
    Ok((pairwise, true_distance_distribution(&radial, axis)?))
}

/// Grid recovery from estimated distributions.
pub fn recover_points(
    radial: &DistanceDistribution,
    pairwise: Option<&DistanceDistribution>,
    ops: Arc<DistanceOperators>,
    k: usize,
    knobs: &Knobs,
    seed: u64,
) -> Result<Recovery> {
    let problem = match pairwise {
        Some(pc) => UdgpProblem::new(ops, k, pc, radial)?,
        None => {
            let bins = ops.grid().bins;
            let mut pair = vec![0.0; bins.len];
            pair[0] = 1.0;
            let radial = radial.rebinned(bins).mass().to_vec();
            UdgpProblem::from_grid_targets(ops, k, pair, radial)?
        }
    }
    .with_radial_weight(knobs.radial_weight)?
    .with_epsilon(knobs.epsilon)?
    .with_bin_blur(knobs.pair_blur)?;
    recover(&problem, &knobs.recover_options(seed))
}

/// EMDs of a recovery against the true model, on `axis`.
pub fn recovery_emds(recovery: &Recovery, model: &PointSourceModel, axis: DistanceAxis) -> Result<(f64, f64)> {
    let (got_pairs, got_radial) = distance_histograms(&recovery.locations, axis)?;
    let (true_pairs, true_radial) = distance_histograms(model.points(), axis)?;
    let pairwise = match (got_pairs, true_pairs) {
        (Some(a), Some(b)) => emd_1d(&a, &b)?,
        _ => 0.0,
    };
    Ok((pairwise, emd_1d(&got_radial, &true_radial)?))
}

pub fn run_recovery_trial(
    cell: &Cell,
    base_seed: u64,
    trial: usize,
    knobs: &Knobs,
    ops: Arc<DistanceOperators>,
) -> Result<RecoveryTrial> {
    let seeds = trial_seeds(base_seed, cell, trial);
    let model = trial_model(cell.k, seeds.model, knobs.recenter)?;
    let r = model.radius_bound();
    let data = SimulatedLines::new(&model, knobs.lines, cell.half_bins, cell.snr.0, seeds.data)?;
    let plan = HankelPlan::new(knobs.hankel_config(cell.half_bins, r), r)?;
    let dists = estimate_distributions(&data, cell.k, &plan, knobs.estimate_options())?;
    let (true_pairs, _) = distance_histograms(model.points(), plan.axis())?;
    let emd_estimate = match (&dists.pairwise, &true_pairs) {
        (Some(a), Some(b)) => emd_1d(a, b)?,
        _ => 0.0,
    };
    let rec = recover_points(&dists.radial, dists.pairwise.as_ref(), ops, cell.k, knobs, seeds.solver)?;
    let (emd_pairwise, emd_radial) = recovery_emds(&rec, &model, plan.axis())?;
    Ok(RecoveryTrial {
        trial,
        seed: seeds.trial,
        emd_pairwise,
        emd_radial,
        emd_estimate,
        converged: rec.converged,
    })
}

/// Runs `f(0..n)` on `jobs` threads and returns results in index order.
pub fn run_indexed<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if jobs == 0 {
        return Err(Error::invalid("jobs: must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("jobs: cannot start {jobs} threads: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Per-cell outcome of a table run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: Cell,
    pub trials: usize,
    pub success_rate: f64,
    /// Pbde: success rate at thresholds 0.03..=0.07. Recovery: mean EMD.
    pub extra: Vec<(String, f64)>,
    /// Whether the cell was read back from a completed file.
    pub resumed: bool,
}

#[derive(Debug, Clone)]
pub struct TableSummary {
    pub dir: PathBuf,
    pub cells: Vec<CellSummary>,
}

impl TableSummary {
    pub fn cell(&self, k: usize, half_bins: usize, snr: Snr) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.cell.k == k && c.cell.half_bins == half_bins && c.cell.snr == snr)
    }
}

/// Thresholds of the PBDE success sweep, as fractions of R.
pub const PBDE_SWEEP: [f64; 5] = [0.03, 0.04, 0.05, 0.06, 0.07];

fn pbde_rows(trials: &[PbdeTrial]) -> String {
    let mut s = String::from("trial,seed,radial_error,pairwise_error\n");
    for t in trials {
        s.push_str(&format!("{},{},{},{}\n", t.trial, t.seed, t.radial_error, t.pairwise_error));
    }
    s
}

fn recovery_rows(trials: &[RecoveryTrial]) -> String {
    let mut s = String::from("trial,seed,emd_pairwise,emd_radial,emd_estimate,converged\n");
    for t in trials {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.trial, t.seed, t.emd_pairwise, t.emd_radial, t.emd_estimate, t.converged
        ));
    }
    s
}

/// Completed cell file rows as columns of numbers, or `None` when the file
/// is missing, incomplete or from another trial count.
fn read_completed(path: &Path, trials: usize) -> Option<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).ok()?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.last().map(|l| l.trim()) != Some(COMPLETE_MARKER) || lines.len() != trials + 2 {
        return None;
    }
    lines[1..lines.len() - 1]
        .iter()
        .map(|l| {
            l.split(',')
                .map(|v| match v {
                    "true" => Some(1.0),
                    "false" => Some(0.0),
                    other => other.parse::<f64>().ok(),
                })
                .collect()
        })
        .collect()
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn summarize(cfg: &TableConfig, cell: Cell, rows: &[Vec<f64>], resumed: bool) -> Result<CellSummary> {
    let (success, extra) = match cfg.kind {
        TableKind::Pbde => {
            let errors: Vec<f64> = rows.iter().map(|r| r[2]).collect();
            let rate = |th: f64| errors.iter().filter(|&&e| e < th).count() as f64 / errors.len() as f64;
            (
                rate(cfg.threshold),
                PBDE_SWEEP.iter().map(|&th| (format!("rate_at_{th}"), rate(th))).collect(),
            )
        }
        TableKind::Recovery => {
            let emds: Vec<f64> = rows.iter().map(|r| r[2]).collect();
            let mean = emds.iter().sum::<f64>() / emds.len() as f64;
            (success_rate(&emds, cfg.threshold)?, vec![("mean_emd".to_string(), mean)])
        }
    };
    Ok(CellSummary {
        cell,
        trials: rows.len(),
        success_rate: success,
        extra,
        resumed,
    })
}

/// Runs (or resumes) a table under `root/run_id`.
pub fn run_table(cfg: &TableConfig, root: &Path, run_id: &str, jobs: usize) -> Result<TableSummary> {
    cfg.validate()?;
    if run_id.is_empty() || run_id.contains(['/', '\\']) {
        return Err(Error::invalid(format!("run id {run_id:?} must be a plain name")));
    }
    let dir = root.join(run_id);
    let cells_dir = dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let config_path = dir.join("config.json");
    let config_text = serde_json::to_string_pretty(cfg)? + "\n";
    match fs::read_to_string(&config_path) {
        Ok(existing) if existing != config_text => {
            return Err(Error::invalid(format!(
                "{} holds a different configuration; choose another run id",
                config_path.display()
            )))
        }
        Ok(_) => {}
        Err(_) => write_atomic(&config_path, &config_text)?,
    }
    let ops = match cfg.kind {
        TableKind::Recovery => Some(Arc::new(DistanceOperators::new(cfg.knobs.grid()?))),
        TableKind::Pbde => None,
    };
    let mut summaries = Vec::new();
    for cell in cfg.cells() {
        let path = cells_dir.join(cell.file_name());
        if let Some(rows) = read_completed(&path, cfg.trials) {
            summaries.push(summarize(cfg, cell, &rows, true)?);
            continue;
        }
        let body = match cfg.kind {
            TableKind::Pbde => {
                let trials = run_indexed(jobs, cfg.trials, |t| run_pbde_trial(&cell, cfg.seed, t, &cfg.knobs))?;
                pbde_rows(&trials)
            }
            TableKind::Recovery => {
                let ops = ops.clone().expect("operators built for recovery tables");
                let trials = run_indexed(jobs, cfg.trials, |t| {
                    run_recovery_trial(&cell, cfg.seed, t, &cfg.knobs, ops.clone())
                })?;
                recovery_rows(&trials)
            }
        };
        write_atomic(&path, &format!("{body}{COMPLETE_MARKER}\n"))?;
        let rows = read_completed(&path, cfg.trials)
            .ok_or_else(|| Error::Format(format!("{} could not be read back", path.display())))?;
        summaries.push(summarize(cfg, cell, &rows, false)?);
    }
    let mut summary = String::from("k,half_bins,snr,trials,success_rate");
    if let Some(first) = summaries.first() {
        for (name, _) in &first.extra {
            summary.push(',');
            summary.push_str(name);
        }
    }
    summary.push('\n');
    for s in &summaries {
        summary.push_str(&format!(
            "{},{},{},{},{}",
            s.cell.k, s.cell.half_bins, s.cell.snr, s.trials, s.success_rate
        ));
        for (_, v) in &s.extra {
            summary.push_str(&format!(",{v}"));
        }
        summary.push('\n');
    }
    write_atomic(&dir.join("summary.csv"), &summary)?;
    Ok(TableSummary { dir, cells: summaries })
}

/// One end-to-end run that writes every intermediate product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleConfig {
    pub k: usize,
    pub half_bins: usize,
    pub snr: Snr,
    pub seed: u64,
    pub knobs: Knobs,
}

impl Default for SingleConfig {
    fn default() -> Self {
        SingleConfig {
            k: 5,
            half_bins: 500,
            snr: Snr(1.0),
            seed: 0,
            knobs: Knobs::default(),
        }
    }
}

/// Files written by [`run_single`].
pub const SINGLE_FILES: [&str; 5] = [
    "model.json",
    "projections.bin",
    "features.csv",
    "distributions.csv",
    "recovery.json",
];

#[derive(Debug, Clone)]
pub struct SingleOutcome {
    pub model: PointSourceModel,
    pub report: RecoveryReport,
    pub emd_estimate: Option<f64>,
}

pub fn run_single(cfg: &SingleConfig, out: &Path) -> Result<SingleOutcome> {
    if cfg.k == 0 {
        return Err(Error::invalid("k: must be at least 1"));
    }
    if cfg.half_bins == 0 {
        return Err(Error::invalid("half_bins: must be at least 1"));
    }
    cfg.knobs.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cell = Cell {
        k: cfg.k,
        half_bins: cfg.half_bins,
        snr: cfg.snr,
    };
    let seeds = trial_seeds(cfg.seed, &cell, 0);
    let model = trial_model(cfg.k, seeds.model, cfg.knobs.recenter)?;
    model.save(&out.join(SINGLE_FILES[0]))?;

    let data = SimulatedLines::new(&model, cfg.knobs.lines, cfg.half_bins, cfg.snr.0, seeds.data)?.materialize();
    data.save(&out.join(SINGLE_FILES[1]))?;

    let opts = cfg.knobs.pbde_options(cfg.half_bins);
    let freq = integer_axis(0, opts.nu_max);
    let features = estimate_features(&data, cfg.k, &freq, cfg.knobs.estimate_options())?;
    let truth = analytic_features(&model, &freq);
    let mut buf = Vec::new();
    write_features_csv(&mut buf, &features, Some(&truth)).expect("writing to memory");
    let path = out.join(SINGLE_FILES[2]);
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;

    let r = model.radius_bound();
    let plan = HankelPlan::new(cfg.knobs.hankel_config(cfg.half_bins, r), r)?;
    let dists = estimate_distributions(&data, cfg.k, &plan, cfg.knobs.estimate_options())?;
    let (true_pairs, true_radial) = distance_histograms(model.points(), plan.axis())?;
    let mut buf = Vec::new();
    write_distributions_csv(&mut buf, &dists, Some((&true_radial, true_pairs.as_ref()))).expect("writing to memory");
    let path = out.join(SINGLE_FILES[3]);
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let emd_estimate = match (&dists.pairwise, &true_pairs) {
        (Some(a), Some(b)) => Some(emd_1d(a, b)?),
        _ => None,
    };

    let ops = Arc::new(DistanceOperators::new(cfg.knobs.grid()?));
    let rec = recover_points(&dists.radial, dists.pairwise.as_ref(), ops, cfg.k, &cfg.knobs, seeds.solver)?;
    let (emd_pairwise, emd_radial) = recovery_emds(&rec, &model, plan.axis())?;
    let report = rec.report(Some(emd_pairwise), Some(emd_radial));
    let path = out.join(SINGLE_FILES[4]);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(SingleOutcome {
        model,
        report,
        emd_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: TableKind) -> TableConfig {
        TableConfig {
            ks: vec![2],
            half_bins: vec![40],
            snrs: vec![Snr::NOISELESS, Snr(10.0)],
            trials: 3,
            seed: 9,
            knobs: Knobs {
                lines: 400,
                grid_side: 9,
                restarts: 2,
                max_iters: 50,
                ..Knobs::default()
            },
            ..TableConfig::for_kind(kind)
        }
    }

    #[test]
    fn snr_text_forms() {
        assert_eq!("inf".parse::<Snr>().unwrap(), Snr::NOISELESS);
        assert_eq!("0.5".parse::<Snr>().unwrap(), Snr(0.5));
        assert!("0".parse::<Snr>().is_err());
        assert!("loud".parse::<Snr>().is_err());
        assert_eq!(Snr::NOISELESS.to_string(), "inf");
        let json = serde_json::to_string(&vec![Snr::NOISELESS, Snr(10.0)]).unwrap();
        assert_eq!(json, r#"["inf",10.0]"#);
        let back: Vec<Snr> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![Snr::NOISELESS, Snr(10.0)]);
        assert!(serde_json::from_str::<Snr>("-1").is_err());
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut c = TableConfig::pbde();
        c.trials = 0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("trials"), "{e}");
        let mut c = TableConfig::pbde();
        c.ks = vec![1];
        assert!(c.validate().unwrap_err().to_string().contains("ks"));
        let mut c = TableConfig::pbde();
        c.half_bins = vec![30];
        assert!(c.validate().unwrap_err().to_string().contains("half_bins"));
        let mut c = TableConfig::recovery();
        c.knobs.epsilon = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("epsilon"));
        assert!(TableConfig::pbde().validate().is_ok());
        assert!(TableConfig::recovery().validate().is_ok());
    }

    #[test]
    fn seeds_depend_on_every_coordinate() {
        let c = Cell { k: 5, half_bins: 100, snr: Snr(1.0) };
        let base = trial_seeds(1, &c, 0);
        let variants = [
            trial_seeds(2, &c, 0),
            trial_seeds(1, &c, 1),
            trial_seeds(1, &Cell { k: 10, ..c }, 0),
            trial_seeds(1, &Cell { half_bins: 500, ..c }, 0),
            trial_seeds(1, &Cell { snr: Snr(10.0), ..c }, 0),
        ];
        for v in variants {
            assert_ne!(v.trial, base.trial);
        }
        assert_eq!(trial_seeds(1, &c, 0), base);
        assert_ne!(base.model, base.data);
    }

    #[test]
    fn recentered_models_fit_and_are_centered() {
        for seed in 0..20 {
            let m = trial_model(6, seed, true).unwrap();
            let c = m.centroid();
            assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        }
    }

    #[test]
    fn pbde_table_runs_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(TableKind::Pbde);
        let first = run_table(&cfg, dir.path(), "t", 1).unwrap();
        assert_eq!(first.cells.len(), 2);
        assert!(first.cells.iter().all(|c| !c.resumed && c.trials == 3));
        let summary = fs::read_to_string(first.dir.join("summary.csv")).unwrap();
        assert!(summary.starts_with("k,half_bins,snr,trials,success_rate,rate_at_0.03"));

        let victim = first.dir.join("cells").join(cfg.cells()[1].file_name());
        let text = fs::read_to_string(&victim).unwrap();
        fs::write(&victim, text.replace(COMPLETE_MARKER, "")).unwrap();
        let second = run_table(&cfg, dir.path(), "t", 2).unwrap();
        assert!(second.cells[0].resumed);
        assert!(!second.cells[1].resumed);
        assert_eq!(fs::read_to_string(&victim).unwrap(), text);
        assert_eq!(fs::read_to_string(second.dir.join("summary.csv")).unwrap(), summary);

        let mut other = cfg.clone();
        other.seed = 10;
        assert!(run_table(&other, dir.path(), "t", 1).is_err());
    }

    #[test]
    fn recovery_table_is_independent_of_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(TableKind::Recovery);
        let a = run_table(&cfg, dir.path(), "a", 1).unwrap();
        let b = run_table(&cfg, dir.path(), "b", 4).unwrap();
        for cell in cfg.cells() {
            let fa = fs::read(a.dir.join("cells").join(cell.file_name())).unwrap();
            let fb = fs::read(b.dir.join("cells").join(cell.file_name())).unwrap();
            assert_eq!(fa, fb);
        }
        assert!(run_indexed(0, 3, Ok).is_err());
    }

    #[test]
    fn histograms_of_points() {
        let axis = DistanceAxis::new(0.0, 0.5, 8).unwrap();
        let (pairs, radial) = distance_histograms(&[[0.0, 0.0], [1.0, 0.0]], axis).unwrap();
        let pairs = pairs.unwrap();
        assert_eq!(pairs.mass()[2], 1.0);
        assert_eq!(radial.mass()[0], 0.5);
        assert_eq!(radial.mass()[2], 0.5);
        assert!(distance_histograms(&[[0.1, 0.1]], axis).unwrap().0.is_none());
    }
}
