//! `pstomo`: simulate unknown-view projections, estimate distance features,
//! recover point sources and run seeded success-rate tables.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use pstomo::dde::{estimate_distributions, read_distributions_csv, write_distributions_csv, HankelPlan};
use pstomo::experiment::{
    distance_histograms, recover_points, recovery_emds, run_single, run_table, trial_model, trial_seeds, Cell, Knobs,
    SingleConfig, Snr, TableConfig, TableKind,
};
use pstomo::features::{analytic_features, estimate_features, integer_axis, write_features_csv};
use pstomo::geometry::PointSourceModel;
use pstomo::pbde::{estimate_pairwise_distances, estimate_radial_distances, max_matched_error};
use pstomo::projector::{LineSource, ProjectionSet, SimulatedLines};
use pstomo::udgp::DistanceOperators;

#[derive(Parser)]
#[command(name = "pstomo", version, about = "Point-source reconstruction from projections at unknown angles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random model and its projections.
    Simulate(RunArgs),
    /// Rotation-invariant features of a projection file, as CSV.
    Features(DataArgs),
    /// Radial and pairwise distances by the annihilating filter, as JSON.
    Pbde(DataArgs),
    /// Radial and pairwise distance distributions, as CSV.
    Dde(DataArgs),
    /// Point locations from a distributions CSV, as JSON.
    Recover(RecoverArgs),
    /// Success rates of distance estimation over a (K, M, SNR) grid.
    TablePbde(TableArgs),
    /// Success rates of full recovery over a (K, M, SNR) grid.
    TableRecovery(TableArgs),
    /// One end-to-end run writing every intermediate file.
    Single(RunArgs),
}

/// Flags that override configuration values.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Number of point sources (comma separated for tables).
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Half the number of detector bins, M (comma separated for tables).
    #[arg(long = "m-bins", value_delimiter = ',')]
    m_bins: Vec<usize>,
    /// Signal-to-noise ratio, `inf` for noiseless (comma separated for tables).
    #[arg(long, value_delimiter = ',')]
    snr: Vec<Snr>,
    /// Projection lines per trial.
    #[arg(long)]
    lines: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Side of the square recovery grid, in cells.
    #[arg(long)]
    grid: Option<usize>,
    /// Lowest frequency used by the annihilating filter.
    #[arg(long = "nu-min")]
    nu_min: Option<usize>,
    /// Center each model on the origin.
    #[arg(long)]
    recenter: bool,
    /// Noise variance used for debiasing instead of the known one.
    #[arg(long)]
    sigma2: Option<f64>,
}

impl Overrides {
    fn apply_knobs(&self, knobs: &mut Knobs) {
        if let Some(v) = self.lines {
            knobs.lines = v;
        }
        if let Some(v) = self.grid {
            knobs.grid_side = v;
        }
        if let Some(v) = self.nu_min {
            knobs.nu_min = v;
        }
        if self.recenter {
            knobs.recenter = true;
        }
        if self.sigma2.is_some() {
            knobs.sigma2 = self.sigma2;
        }
    }

    fn single(&self, mut cfg: SingleConfig) -> Result<SingleConfig, Failure> {
        cfg.k = one("k", &self.k)?.unwrap_or(cfg.k);
        cfg.half_bins = one("m-bins", &self.m_bins)?.unwrap_or(cfg.half_bins);
        cfg.snr = one("snr", &self.snr)?.unwrap_or(cfg.snr);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        self.apply_knobs(&mut cfg.knobs);
        Ok(cfg)
    }
}

fn one<T: Copy>(name: &str, values: &[T]) -> Result<Option<T>, Failure> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(Failure::Config(format!("--{name}: expects a single value here"))),
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with any subset of the configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    set: Overrides,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Projection file written by `simulate`.
    #[arg(long)]
    projections: PathBuf,
    #[arg(long)]
    k: usize,
    /// True model, for reference columns and errors.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "nu-min")]
    nu_min: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecoverArgs {
    /// Distributions CSV written by `dde`.
    #[arg(long)]
    distributions: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    set: Overrides,
    #[arg(long)]
    trials: Option<usize>,
    /// Success threshold: a fraction of R for distances, an EMD for recovery.
    #[arg(long)]
    threshold: Option<f64>,
    /// Root directory of runs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run directory name; derived from the configuration when absent.
    #[arg(long = "run-id")]
    run_id: Option<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
}

impl From<pstomo::Error> for Failure {
    fn from(e: pstomo::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("{}: {e}", path.display()))
}

/// Overlays the keys of a JSON file onto `defaults`, recursing into objects.
fn with_file<T: serde::Serialize + serde::de::DeserializeOwned>(defaults: T, path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(defaults) };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let patch: Value = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(defaults)?;
    merge(&mut base, patch);
    serde_json::from_value(base).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(io_err(path)),
        None => io::stdout().write_all(bytes).map_err(|e| Failure::Config(format!("stdout: {e}"))),
    }
}

fn load_model(path: Option<&Path>) -> Result<Option<PointSourceModel>, Failure> {
    path.map(|p| PointSourceModel::load(p).map_err(Failure::from)).transpose()
}

fn simulate(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.set.single(with_file(SingleConfig::default(), args.config.as_deref())?)?;
    cfg.knobs.validate()?;
    let cell = Cell {
        k: cfg.k,
        half_bins: cfg.half_bins,
        snr: cfg.snr,
    };
    let seeds = trial_seeds(cfg.seed, &cell, 0);
    let model = trial_model(cfg.k, seeds.model, cfg.knobs.recenter)?;
    let data = SimulatedLines::new(&model, cfg.knobs.lines, cfg.half_bins, cfg.snr.value(), seeds.data)?.materialize();
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    model.save(&args.out.join("model.json"))?;
    data.save(&args.out.join("projections.bin"))?;
    println!(
        "wrote {} lines of {} bins, noise variance {:.6e}, to {}",
        data.line_count(),
        data.bins(),
        data.noise_variance(),
        args.out.display()
    );
    Ok(())
}

fn load_data(args: &DataArgs) -> Result<ProjectionSet, Failure> {
    let data = ProjectionSet::load(&args.projections)?;
    Ok(match args.sigma2 {
        Some(s) if s >= 0.0 && s.is_finite() => data.with_noise_variance(s),
        Some(s) => return Err(Failure::Config(format!("--sigma2: {s} must be finite and nonnegative"))),
        None => data,
    })
}

fn features(args: &DataArgs) -> Result<(), Failure> {
    let data = load_data(args)?;
    let model = load_model(args.model.as_deref())?;
    let knobs = Knobs::default();
    let nu_max = knobs.pbde_options(data.half_bins()).nu_max;
    let freq = integer_axis(args.nu_min.unwrap_or(0), nu_max);
    let est = estimate_features(&data, args.k, &freq, Default::default())?;
    let truth = model.map(|m| analytic_features(&m, &freq));
    let mut buf = Vec::new();
    write_features_csv(&mut buf, &est, truth.as_ref()).map_err(|e| Failure::Config(e.to_string()))?;
    emit(args.out.as_deref(), &buf)
}

fn pbde(args: &DataArgs) -> Result<(), Failure> {
    let data = load_data(args)?;
    let model = load_model(args.model.as_deref())?;
    let mut knobs = Knobs::default();
    if let Some(v) = args.nu_min {
        knobs.nu_min = v;
    }
    let opts = knobs.pbde_options(data.half_bins());
    let r = data.radius_bound();
    let est = estimate_features(&data, args.k, &integer_axis(opts.nu_min, opts.nu_max), Default::default())?;
    let radial = estimate_radial_distances(&est, args.k, r, opts)?;
    let pairwise = estimate_pairwise_distances(&est, args.k, r, opts)?;
    let mut out = serde_json::json!({ "radial": radial, "pairwise": pairwise });
    if let Some(m) = model {
        let rel = |e: &[f64], t: &[f64]| max_matched_error(e, t).map(|v| v / r);
        out["radial_error"] = serde_json::json!(rel(&radial.distances, &m.radial_distances()));
        out["pairwise_error"] = serde_json::json!(rel(&pairwise.distances, &m.unordered_pair_distances()));
    }
    emit(args.out.as_deref(), (serde_json::to_string_pretty(&out)? + "\n").as_bytes())
}

fn dde(args: &DataArgs) -> Result<(), Failure> {
    let data = load_data(args)?;
    let model = load_model(args.model.as_deref())?;
    let r = data.radius_bound();
    let plan = HankelPlan::new(Knobs::default().hankel_config(data.half_bins(), r), r)?;
    let est = estimate_distributions(&data, args.k, &plan, Default::default())?;
    let truth = model.map(|m| distance_histograms(m.points(), plan.axis())).transpose()?;
    let mut buf = Vec::new();
    write_distributions_csv(&mut buf, &est, truth.as_ref().map(|(p, r)| (r, p.as_ref())))
        .map_err(|e| Failure::Config(e.to_string()))?;
    emit(args.out.as_deref(), &buf)
}

fn recover(args: &RecoverArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.distributions).map_err(io_err(&args.distributions))?;
    let (radial, pairwise) = read_distributions_csv(&text)?;
    let model = load_model(args.model.as_deref())?;
    let mut knobs = Knobs::default();
    if let Some(g) = args.grid {
        knobs.grid_side = g;
    }
    knobs.validate()?;
    let ops = Arc::new(DistanceOperators::new(knobs.grid()?));
    let rec = recover_points(&radial, pairwise.as_ref(), ops, args.k, &knobs, args.seed.unwrap_or(0))?;
    let (emd_pairwise, emd_radial) = match &model {
        Some(m) => {
            let (p, r) = recovery_emds(&rec, m, *radial.axis())?;
            (Some(p), Some(r))
        }
        None => (None, None),
    };
    let report = rec.report(emd_pairwise, emd_radial);
    emit(args.out.as_deref(), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())
}

fn table(kind: TableKind, args: &TableArgs) -> Result<(), Failure> {
    let mut cfg = with_file(TableConfig::for_kind(kind), args.config.as_deref())?;
    if cfg.kind != kind {
        return Err(Failure::Config(format!("kind: the configuration is for {:?} tables", cfg.kind)));
    }
    let set = &args.set;
    if !set.k.is_empty() {
        cfg.ks = set.k.clone();
    }
    if !set.m_bins.is_empty() {
        cfg.half_bins = set.m_bins.clone();
    }
    if !set.snr.is_empty() {
        cfg.snrs = set.snr.clone();
    }
    if let Some(s) = set.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    set.apply_knobs(&mut cfg.knobs);
    cfg.validate()?;
    let run_id = match &args.run_id {
        Some(id) => id.clone(),
        None => default_run_id(&cfg)?,
    };
    let summary = run_table(&cfg, &args.out, &run_id, args.jobs)?;
    let text = fs::read_to_string(summary.dir.join("summary.csv")).map_err(io_err(&summary.dir))?;
    print!("{text}");
    eprintln!("results in {}", summary.dir.display());
    Ok(())
}

/// `<kind>-<hash of the configuration>`, so that equal configurations
/// resume the same directory.
fn default_run_id(cfg: &TableConfig) -> Result<String, Failure> {
    let text = serde_json::to_string(cfg)?;
    let words: Vec<u64> = text.bytes().map(u64::from).collect();
    let kind = match cfg.kind {
        TableKind::Pbde => "pbde",
        TableKind::Recovery => "recovery",
    };
    Ok(format!("{kind}-{:016x}", pstomo::rng::derive_seed(&words)))
}

fn single(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.set.single(with_file(SingleConfig::default(), args.config.as_deref())?)?;
    let outcome = run_single(&cfg, &args.out)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "K = {}, M = {}, SNR = {}: estimate EMD {}, recovered pairwise EMD {}, radial EMD {}",
        cfg.k,
        cfg.half_bins,
        cfg.snr,
        fmt(outcome.emd_estimate),
        fmt(outcome.report.emd_pairwise),
        fmt(outcome.report.emd_radial)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Features(a) => features(a),
        Command::Pbde(a) => pbde(a),
        Command::Dde(a) => dde(a),
        Command::Recover(a) => recover(a),
        Command::TablePbde(a) => table(TableKind::Pbde, a),
        Command::TableRecovery(a) => table(TableKind::Recovery, a),
        Command::Single(a) => single(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
