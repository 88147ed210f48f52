//! The `circlecal` command-line tool.
//!
//! Exit codes: 0 success, 2 input error, 3 estimation failure,
//! 4 disambiguation failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod io;
pub mod job;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use circlecal_core::center::{
    chord_loss_field, disambiguate_by_ratio, hypotheses_from_field, CenterHypothesis, LossMode, SearchConfig,
};
use circlecal_core::robust::{ransac_fit_circle, RansacConfig};
use circlecal_core::synth::{run_benchmark, Scenario, ScenarioSpec};
use circlecal_core::{Error, Pixel};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{emit_json, read_cloud, read_ellipse, read_intrinsics};
use crate::job::{calibrate, CalibrationJob, Mode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("disambiguation failed: {0}")]
    Disambiguation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Estimation(_) => 3,
            CliError::Disambiguation(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }

    /// Sorts a library error into the exit-code classes.
    pub fn from_core(e: Error) -> Self {
        match e {
            Error::InvalidIntrinsics(_)
            | Error::InvalidTransform(_)
            | Error::InvalidConfig(_)
            | Error::InsufficientPoints { .. }
            | Error::NotAnEllipse(_) => CliError::Input(e.to_string()),
            Error::DisambiguationFailed => CliError::Disambiguation(e.to_string()),
            _ => CliError::Estimation(e.to_string()),
        }
    }

    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::Input(m) => CliError::Input(format!("{what}: {m}")),
            CliError::Estimation(m) => CliError::Estimation(format!("{what}: {m}")),
            CliError::Disambiguation(m) => CliError::Disambiguation(format!("{what}: {m}")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "circlecal", version, about = "Circle-based camera/LiDAR extrinsic calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a 3D circle to a point cloud (CSV with x,y,z header, or ASCII PLY).
    FitCircle3d(FitCircle3dArgs),
    /// Projected circle center hypotheses from an image ellipse.
    RefineCenter2d(RefineCenter2dArgs),
    /// Estimate LiDAR-to-camera extrinsics from a calibration job.
    Calibrate(CalibrateArgs),
    /// Run a synthetic Monte Carlo scenario.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RansacArgs {
    #[arg(long, default_value_t = 1000)]
    pub ransac_iters: usize,
    /// Inlier gate; squared meters for circles.
    #[arg(long)]
    pub inlier_thresh: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitCircle3dArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub ransac: RansacArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineCenter2dArgs {
    /// Ellipse JSON, either {"Q": 3x3} or {"cx","cy","a","b","theta"}.
    pub ellipse: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Physical radius in meters; without it the scale-free loss is used.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Ellipse of a second circle on the same plane.
    #[arg(long, requires = "ratio")]
    pub coplanar: Option<PathBuf>,
    /// Physical radius ratio, this circle over the coplanar one.
    #[arg(long, requires = "coplanar")]
    pub ratio: Option<f64>,
    #[arg(long, default_value_t = 36)]
    pub n_dirs: usize,
    #[arg(long)]
    pub subpixel: bool,
    /// Write the chord-loss grid as CSV (u,v,loss).
    #[arg(long)]
    pub dump_field: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    pub job: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub ransac_iters: Option<usize>,
    /// Circle RANSAC gate in squared meters.
    #[arg(long)]
    pub inlier_thresh: Option<f64>,
    #[arg(long)]
    pub n_dirs: Option<usize>,
    #[arg(long)]
    pub subpixel: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// A, B, C, D, outlier, twod_center or pose_study.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Noise level; defaults per scenario (meters or pixels).
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Outlier fraction for the outlier scenario.
    #[arg(long, default_value_t = 0.2)]
    pub p: f64,
    #[arg(long, default_value_t = 1000)]
    pub ransac_iters: usize,
    /// Circle RANSAC gate in squared meters; defaults to (0.05)^2 for the
    /// outlier scenario and (2.45 sigma)^2 otherwise.
    #[arg(long)]
    pub inlier_thresh: Option<f64>,
    #[arg(long, default_value_t = 36)]
    pub n_dirs: usize,
    /// Output directory for results.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircleFitOutput {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    pub radius: f64,
    pub inliers: Vec<usize>,
    pub inlier_count: usize,
    pub n_points: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CenterOutput {
    pub ellipse_center: Pixel,
    pub hypotheses: Vec<CenterHypothesis>,
    /// Ratio-selected center; `null` without a coplanar circle or when
    /// disambiguation failed.
    pub selected: Option<Pixel>,
}

pub fn fit_circle3d(args: &FitCircle3dArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let pts = read_cloud(&args.input)?;
    let defaults = RansacConfig::default();
    let cfg = RansacConfig {
        max_iterations: args.ransac.ransac_iters,
        inlier_threshold: args.ransac.inlier_thresh.unwrap_or(defaults.inlier_threshold),
        seed: args.ransac.seed,
        ..defaults
    };
    let r = ransac_fit_circle(&pts, &cfg).map_err(CliError::from_core)?;
    let c = r.best_model;
    let out = CircleFitOutput {
        center: c.center.into(),
        normal: c.normal.into(),
        radius: c.radius,
        inliers: r.inlier_mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect(),
        inlier_count: r.inlier_count,
        n_points: pts.len(),
        iterations: r.iterations_run,
    };
    emit_json(&out, args.out.as_deref(), stdout)
}

pub fn refine_center2d(args: &RefineCenter2dArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let k = read_intrinsics(&args.intrinsics)?;
    let conic = read_ellipse(&args.ellipse)?;
    let secondary = args.coplanar.as_deref().map(read_ellipse).transpose()?;
    let cfg = SearchConfig {
        n_dirs: args.n_dirs,
        mode: match args.radius {
            Some(r) => LossMode::KnownRadius(r),
            None => LossMode::Relative,
        },
        nms_radius: None,
        subpixel: args.subpixel,
    };
    let field = chord_loss_field(&conic, &k, &cfg).map_err(CliError::from_core)?;
    if let Some(path) = &args.dump_field {
        let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        field
            .write_csv(std::io::BufWriter::new(f))
            .map_err(|e| CliError::io(path, e))?;
    }
    let pair = hypotheses_from_field(&field, &conic, &k, &cfg).map_err(CliError::from_core)?;
    let selection = match (&secondary, args.ratio) {
        (Some(q2), Some(ratio)) => Some(disambiguate_by_ratio(&pair, &conic, q2, ratio)),
        _ => None,
    };
    let out = CenterOutput {
        ellipse_center: conic.center().map_err(CliError::from_core)?,
        hypotheses: pair.hypotheses(),
        selected: selection.as_ref().and_then(|s| s.as_ref().ok().copied()),
    };
    emit_json(&out, args.out.as_deref(), stdout)?;
    match selection {
        Some(Err(e)) => Err(CliError::from_core(e)),
        _ => Ok(()),
    }
}

pub fn cmd_calibrate(args: &CalibrateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut job = CalibrationJob::load(&args.job)?;
    let o = &mut job.options;
    if let Some(m) = args.mode {
        o.mode = m;
    }
    if let Some(n) = args.ransac_iters {
        o.ransac_iterations = n;
    }
    if let Some(t) = args.inlier_thresh {
        o.inlier_threshold = t;
    }
    if let Some(n) = args.n_dirs {
        o.n_dirs = n;
    }
    if let Some(s) = args.seed {
        o.seed = s;
    }
    o.subpixel |= args.subpixel;
    job.validate()?;
    let report = calibrate(&job)?;
    emit_json(&report, args.out.as_deref(), stdout)
}

pub fn bench(args: &BenchArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let scenario: Scenario = args.scenario.parse().map_err(CliError::from_core)?;
    let spec = ScenarioSpec {
        sigma: args.sigma.unwrap_or(scenario.default_sigma()),
        outlier_fraction: args.p,
        ransac_iterations: args.ransac_iters,
        inlier_threshold: args.inlier_thresh,
        n_dirs: args.n_dirs,
        ..ScenarioSpec::new(scenario, args.trials, args.seed)
    };
    let result = run_benchmark(&spec).map_err(CliError::from_core)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let csv_path = args.out.join("results.csv");
    let f = fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    result
        .write_csv(std::io::BufWriter::new(f))
        .map_err(|e| CliError::io(&csv_path, e))?;
    let summary = result.summary_json();
    emit_json(&summary, Some(&args.out.join("summary.json")), stdout)?;
    emit_json(&summary, None, stdout)
}

/// Dispatches a parsed command line, writing primary output to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::FitCircle3d(a) => fit_circle3d(a, stdout),
        Command::RefineCenter2d(a) => refine_center2d(a, stdout),
        Command::Calibrate(a) => cmd_calibrate(a, stdout),
        Command::Bench(a) => bench(a, stdout),
    }
}
