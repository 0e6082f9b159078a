//! The `modalmix` command line: `gen`, `fit`, `cluster`, `eval`, `grid`.
//!
//! Every command writes a `<out>.manifest.json` echoing its arguments and
//! configuration next to its outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::dvector;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, adjusted_rand_index_labels};
use crate::datagen;
use crate::em::{self, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::io::{self, ClusterSidecar};
use crate::meanshift::MeanShiftConfig;
use crate::mixture::GaussianMixture;

pub const THREADS_ENV: &str = "MODALMIX_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "modalmix",
    version,
    about = "Gaussian mixture fitting and modal clustering"
)]
pub struct Cli {
    /// Master seed; every internal seed is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a named scenario; writes data CSV and true component labels.
    Gen(GenArgs),
    /// Fit mixtures over a range of G and keep the best BIC.
    Fit(FitArgs),
    /// Cluster data with a fitted model.
    Cluster(ClusterArgs),
    /// Adjusted Rand index between two label files.
    Eval(EvalArgs),
    /// Evaluate a bivariate model's density on a regular grid.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// overlapping | trimodal | normal
    pub scenario: String,
    #[arg(short = 'n', long = "n", default_value_t = 2000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub gmin: usize,
    #[arg(long, default_value_t = 9)]
    pub gmax: usize,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Relative log-likelihood tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub covariance_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Component,
    Merge,
    Modal,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Model JSON written by `fit` (or a bare mixture JSON).
    pub model: PathBuf,
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ClusterMethod::Modal)]
    pub method: ClusterMethod,
    #[arg(long, default_value_t = 1e-8)]
    pub step_tol: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub merge_tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    pub model: PathBuf,
    /// xmin,xmax,ymin,ymax
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Vec<f64>,
    /// Grid points per axis.
    #[arg(long, default_value_t = 100)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status per error class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse(_) | Error::Json(_) | Error::Csv(_) => 3,
        Error::DimensionMismatch { .. } | Error::LengthMismatch(..) => 4,
        Error::DegenerateData(_) => 5,
        Error::UnresolvedTrajectory => 6,
        Error::InvalidArgument(_) | Error::UnknownScenario(_) => 2,
        _ => 1,
    }
}

/// Exit status when clustering finished but some ascents did not resolve.
pub const EXIT_UNRESOLVED: i32 = 6;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_config: Option<FitConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meanshift_config: Option<MeanShiftConfig>,
    pub duration_secs: f64,
    pub version: String,
}

/// What a successful command reports back.
#[derive(Debug, Default)]
pub struct Outcome {
    pub message: String,
    /// Some trajectories were unresolved; outputs are complete but flagged.
    pub unresolved: bool,
}

/// `data.csv` + `.labels.csv` → `data.labels.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn manifest_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{name}.manifest.json"))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

struct Recorder {
    manifest: RunManifest,
    started: Instant,
}

impl Recorder {
    fn new(command: &str, argv: &[String], seed: u64) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                argv: argv.to_vec(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                seed,
                fit_config: None,
                meanshift_config: None,
                duration_secs: 0.0,
                version: env!("CARGO_PKG_VERSION").into(),
            },
            started: Instant::now(),
        }
    }

    fn finish(mut self, out: &Path) -> Result<()> {
        self.manifest.duration_secs = self.started.elapsed().as_secs_f64();
        let path = manifest_path(out);
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }
}

/// Accepts either a `fit` result or a bare mixture.
#[derive(Deserialize)]
#[serde(untagged)]
enum ModelFile {
    Fit(Box<FitResult>),
    Mixture(GaussianMixture),
}

pub fn load_model(path: &Path) -> Result<GaussianMixture> {
    let text = std::fs::read_to_string(path)?;
    match serde_json::from_str::<ModelFile>(&text) {
        Ok(ModelFile::Fit(f)) => Ok(f.mixture),
        Ok(ModelFile::Mixture(m)) => Ok(m),
        Err(_) => {
            // surface the specific mixture error instead of serde's untagged message
            serde_json::from_str::<FitResult>(&text)
                .map(|f| f.mixture)
                .or_else(|_| GaussianMixture::from_json(&text))
        }
    }
}

/// Caps the rayon pool from `MODALMIX_THREADS` (0 or unset = automatic).
pub fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // a pool already built by an embedding program keeps its size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run(argv: &[String]) -> Result<Outcome> {
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    execute(cli, argv)
}

pub fn execute(cli: Cli, argv: &[String]) -> Result<Outcome> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, seed, argv),
        Command::Fit(a) => cmd_fit(&a, seed, argv),
        Command::Cluster(a) => cmd_cluster(&a, seed, argv),
        Command::Eval(a) => cmd_eval(&a, seed, argv),
        Command::Grid(a) => cmd_grid(&a, seed, argv),
    }
}

pub fn cmd_gen(args: &GenArgs, seed: u64, argv: &[String]) -> Result<Outcome> {
    let mut rec = Recorder::new("gen", argv, seed);
    let scenario = datagen::scenario_by_name(&args.scenario)?;
    if args.n == 0 {
        return Err(Error::InvalidArgument("-n must be positive".into()));
    }
    let (data, labels) = scenario.mixture.sample(args.n, seed)?;
    let label_path = sibling(&args.out, ".labels.csv");
    io::write_data_csv(&args.out, &data)?;
    io::write_labels_csv(&label_path, &labels)?;
    rec.manifest.outputs = vec![display(&args.out), display(&label_path)];
    rec.finish(&args.out)?;
    Ok(Outcome {
        message: format!(
            "wrote {} points from `{}` to {}",
            args.n,
            scenario.name,
            args.out.display()
        ),
        unresolved: false,
    })
}

pub fn cmd_fit(args: &FitArgs, seed: u64, argv: &[String]) -> Result<Outcome> {
    let mut rec = Recorder::new("fit", argv, seed);
    let data = io::read_data_csv(&args.data)?;
    let config = FitConfig {
        max_iterations: args.max_iter,
        rel_tol: args.tol,
        restarts: args.restarts,
        covariance_floor: args.covariance_floor,
        seed,
    };
    let selection = em::select_model(&data, args.gmin..=args.gmax, &config)?;
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&selection.best)? + "\n",
    )?;

    let table_path = sibling(&args.out, ".bic.csv");
    let mut w = csv::Writer::from_path(&table_path)?;
    w.write_record([
        "g",
        "n_params",
        "log_likelihood",
        "bic",
        "converged",
        "iterations",
        "error",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for s in &selection.scores {
        w.write_record([
            s.g.to_string(),
            s.n_params.to_string(),
            opt(s.log_likelihood.map(|v| format!("{v:?}"))),
            opt(s.bic.map(|v| format!("{v:?}"))),
            opt(s.converged.map(|v| v.to_string())),
            opt(s.iterations.map(|v| v.to_string())),
            opt(s.error.clone()),
        ])?;
    }
    w.flush()?;

    rec.manifest.inputs = vec![display(&args.data)];
    rec.manifest.outputs = vec![display(&args.out), display(&table_path)];
    rec.manifest.fit_config = Some(config);
    rec.finish(&args.out)?;
    Ok(Outcome {
        message: format!(
            "selected G={} (BIC {:.4}, log-likelihood {:.4})",
            selection.best.n_components(),
            selection.best.bic,
            selection.best.log_likelihood
        ),
        unresolved: false,
    })
}

pub fn cmd_cluster(args: &ClusterArgs, seed: u64, argv: &[String]) -> Result<Outcome> {
    let mut rec = Recorder::new("cluster", argv, seed);
    let mixture = load_model(&args.model)?;
    let data = io::read_data_csv(&args.data)?;
    let ms = MeanShiftConfig {
        step_tol: args.step_tol,
        max_iterations: args.max_iter,
        mode_merge_tol: args.merge_tol,
        ..Default::default()
    };
    let (clustering, sidecar, unresolved) = match args.method {
        ClusterMethod::Component => {
            let c = clustering::component_assign(&mixture, &data)?;
            let side = ClusterSidecar::new(&c, None);
            (c, side, false)
        }
        ClusterMethod::Merge => {
            let r = clustering::merge_components(&mixture, &data, &ms)?;
            let mut side = ClusterSidecar::new(&r.clustering, Some(&r.modes));
            side.merge_map = Some(r.merge_map.clone());
            side.unresolved = r.unresolved_components.iter().map(|g| g + 1).collect();
            let flagged = !r.unresolved_components.is_empty();
            (r.clustering, side, flagged)
        }
        ClusterMethod::Modal => {
            let r = clustering::modal_assign(&mixture, &data, &ms)?;
            let mut side = ClusterSidecar::new(&r.clustering, Some(&r.modes));
            side.mode_labels = Some(r.mode_labels.clone());
            side.unresolved = r.unresolved_points.clone();
            let flagged = !r.unresolved_points.is_empty();
            (r.clustering, side, flagged)
        }
    };
    let sidecar_path = sibling(&args.out, ".modes.json");
    io::write_labels_csv(&args.out, &clustering.labels)?;
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;

    rec.manifest.inputs = vec![display(&args.model), display(&args.data)];
    rec.manifest.outputs = vec![display(&args.out), display(&sidecar_path)];
    if args.method != ClusterMethod::Component {
        rec.manifest.meanshift_config = Some(ms);
    }
    rec.finish(&args.out)?;
    Ok(Outcome {
        message: format!(
            "{} clusters ({}){}",
            clustering.k,
            clustering.method.as_str(),
            if unresolved {
                ", some ascents unresolved"
            } else {
                ""
            }
        ),
        unresolved,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub ari: f64,
    pub n: usize,
    pub clusters_a: usize,
    pub clusters_b: usize,
}

pub fn cmd_eval(args: &EvalArgs, seed: u64, argv: &[String]) -> Result<Outcome> {
    let a = io::read_labels_csv(&args.a)?;
    let b = io::read_labels_csv(&args.b)?;
    let ari = adjusted_rand_index_labels(&a, &b)?;
    let distinct = |v: &[usize]| v.iter().collect::<std::collections::BTreeSet<_>>().len();
    let report = EvalReport {
        ari,
        n: a.len(),
        clusters_a: distinct(&a),
        clusters_b: distinct(&b),
    };
    if let Some(out) = &args.out {
        let mut rec = Recorder::new("eval", argv, seed);
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
        rec.manifest.inputs = vec![display(&args.a), display(&args.b)];
        rec.manifest.outputs = vec![display(out)];
        rec.finish(out)?;
    }
    Ok(Outcome {
        message: format!(
            "ARI {ari:.6} (n={}, clusters {} vs {})",
            report.n, report.clusters_a, report.clusters_b
        ),
        unresolved: false,
    })
}

/// Grid coordinates along one axis; a single point sits at the midpoint.
fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Density on an `n × n` grid as `(x, y, density)` rows, x varying slowest.
pub fn density_grid(
    mixture: &GaussianMixture,
    bounds: [f64; 4],
    resolution: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    if mixture.dimension() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: mixture.dimension(),
        });
    }
    let [x0, x1, y0, y1] = bounds;
    if !(x0 < x1 && y0 < y1) {
        return Err(Error::InvalidArgument(
            "bounds must be xmin<xmax, ymin<ymax".into(),
        ));
    }
    let mut out = Vec::with_capacity(resolution * resolution);
    for &x in &axis(x0, x1, resolution) {
        for &y in &axis(y0, y1, resolution) {
            out.push((x, y, mixture.density(&dvector![x, y])?));
        }
    }
    Ok(out)
}

pub fn cmd_grid(args: &GridArgs, seed: u64, argv: &[String]) -> Result<Outcome> {
    let mut rec = Recorder::new("grid", argv, seed);
    let bounds: [f64; 4] = args
        .bounds
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidArgument("--bounds takes xmin,xmax,ymin,ymax".into()))?;
    let mixture = load_model(&args.model)?;
    let grid = density_grid(&mixture, bounds, args.resolution)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["x", "y", "density"])?;
    for (x, y, f) in &grid {
        w.write_record([format!("{x:?}"), format!("{y:?}"), format!("{f:?}")])?;
    }
    w.flush()?;
    rec.manifest.inputs = vec![display(&args.model)];
    rec.manifest.outputs = vec![display(&args.out)];
    rec.finish(&args.out)?;
    Ok(Outcome {
        message: format!("wrote {} grid points", grid.len()),
        unresolved: false,
    })
}
