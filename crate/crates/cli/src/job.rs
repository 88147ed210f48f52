//! Calibration jobs: per-frame circle observations and the pipeline that
//! turns them into an extrinsic transform.

use std::path::{Path, PathBuf};

use circlecal_core::center::{disambiguate_by_ratio, find_center_hypotheses, CenterHypothesisPair, SearchConfig};
use circlecal_core::ellipse::Conic;
use circlecal_core::pnp::{reprojection_error, solve_pnp_paired_detailed, AmbiguousCorrespondence};
use circlecal_core::robust::{ransac_fit_circle, RansacConfig};
use circlecal_core::{Error, Intrinsics, Pixel, Vec3};
use serde::{Deserialize, Serialize};

use crate::io::{read_cloud, read_ellipse, read_intrinsics, read_json};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Homography where a coplanar partner is declared, paired RANSAC elsewhere.
    #[default]
    Auto,
    Homography,
    Paired,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationJob {
    pub intrinsics: PathBuf,
    pub frames: Vec<Frame>,
    #[serde(default)]
    pub options: SolverOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub circles: Vec<CircleEntry>,
    #[serde(default)]
    pub coplanar: Vec<CoplanarPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleEntry {
    /// Boundary points in the LiDAR frame.
    pub cloud: PathBuf,
    pub ellipse: PathBuf,
    /// Physical radius in meters.
    pub radius: f64,
}

/// Two circles of a frame that share a plane. `ratio` is
/// `radius[pair[0]] / radius[pair[1]]` and defaults to the declared radii.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoplanarPair {
    pub pair: [usize; 2],
    #[serde(default)]
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub ransac_iterations: usize,
    /// Circle RANSAC gate, squared meters.
    pub inlier_threshold: f64,
    /// PnP-RANSAC gate, pixels.
    pub pnp_threshold: f64,
    pub mode: Mode,
    pub seed: u64,
    pub n_dirs: usize,
    pub subpixel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            ransac_iterations: 1000,
            inlier_threshold: RansacConfig::default().inlier_threshold,
            pnp_threshold: 5.0,
            mode: Mode::Auto,
            seed: 0,
            n_dirs: 36,
            subpixel: false,
        }
    }
}

impl CalibrationJob {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut job: CalibrationJob = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        job.intrinsics = base.join(&job.intrinsics);
        for f in &mut job.frames {
            for c in &mut f.circles {
                c.cloud = base.join(&c.cloud);
                c.ellipse = base.join(&c.ellipse);
            }
        }
        job.validate()?;
        Ok(job)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let total: usize = self.frames.iter().map(|f| f.circles.len()).sum();
        if total < 4 {
            return Err(CliError::Input(format!(
                "insufficient correspondences: {total} circles, at least 4 required"
            )));
        }
        for (fi, f) in self.frames.iter().enumerate() {
            for (ci, c) in f.circles.iter().enumerate() {
                if !(c.radius > 0.0) || !c.radius.is_finite() {
                    return Err(CliError::Input(format!("frame {fi} circle {ci}: radius must be > 0")));
                }
            }
            for p in &f.coplanar {
                let [a, b] = p.pair;
                if a == b || a >= f.circles.len() || b >= f.circles.len() {
                    return Err(CliError::Input(format!("frame {fi}: bad coplanar pair {:?}", p.pair)));
                }
                if p.ratio.is_some_and(|r| !(r > 0.0)) {
                    return Err(CliError::Input(format!("frame {fi}: coplanar ratio must be > 0")));
                }
            }
        }
        let o = &self.options;
        if o.n_dirs < 2 {
            return Err(CliError::Input("n_dirs must be at least 2".into()));
        }
        if o.ransac_iterations == 0 || !(o.inlier_threshold > 0.0) || !(o.pnp_threshold > 0.0) {
            return Err(CliError::Input("RANSAC iterations and thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Partner index and ratio `self / partner` for circle `ci` of frame `fi`.
    fn partner(&self, fi: usize, ci: usize) -> Option<(usize, f64)> {
        let f = &self.frames[fi];
        f.coplanar.iter().find_map(|p| {
            let r = |i: usize| f.circles[i].radius;
            let ratio = p.ratio.unwrap_or_else(|| r(p.pair[0]) / r(p.pair[1]));
            if p.pair[0] == ci {
                Some((p.pair[1], ratio))
            } else if p.pair[1] == ci {
                Some((p.pair[0], 1.0 / ratio))
            } else {
                None
            }
        })
    }
}

/// How the 2D center of one correspondence was settled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// Only one chord-loss minimum.
    Single,
    Homography,
    Paired,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    pub frame: usize,
    pub circle: usize,
    pub center_3d: [f64; 3],
    pub fitted_radius: f64,
    pub cloud_inliers: usize,
    pub hypotheses: Vec<Pixel>,
    pub center_2d: Pixel,
    pub resolution: Resolution,
    pub reproj_px: f64,
    pub inlier: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    #[serde(rename = "T")]
    pub t: [[f64; 4]; 4],
    pub mean_reproj_px: f64,
    pub inliers: Vec<usize>,
    pub mode: Mode,
    pub correspondences: Vec<CorrespondenceReport>,
}

struct Observation {
    frame: usize,
    circle: usize,
    center: Vec3,
    fitted_radius: f64,
    cloud_inliers: usize,
    conic: Conic,
    pair: CenterHypothesisPair,
}

fn observe(job: &CalibrationJob, k: &Intrinsics) -> Result<Vec<Observation>, CliError> {
    let o = &job.options;
    let mut out = Vec::new();
    for (fi, f) in job.frames.iter().enumerate() {
        for (ci, c) in f.circles.iter().enumerate() {
            let tag = |e: Error| CliError::from_core(e).context(&format!("frame {fi} circle {ci}"));
            let cloud = read_cloud(&c.cloud)?;
            let cfg = RansacConfig {
                max_iterations: o.ransac_iterations,
                inlier_threshold: o.inlier_threshold,
                min_sample: 5,
                seed: o.seed,
            };
            let fit = ransac_fit_circle(&cloud, &cfg).map_err(tag)?;
            let conic = read_ellipse(&c.ellipse)?;
            let search = SearchConfig {
                n_dirs: o.n_dirs,
                subpixel: o.subpixel,
                ..SearchConfig::with_radius(c.radius)
            };
            let pair = find_center_hypotheses(&conic, k, &search).map_err(tag)?;
            out.push(Observation {
                frame: fi,
                circle: ci,
                center: fit.best_model.center,
                fitted_radius: fit.best_model.radius,
                cloud_inliers: fit.inlier_count,
                conic,
                pair,
            });
        }
    }
    Ok(out)
}

/// Runs the full pipeline: circle fits, center hypotheses, disambiguation
/// and PnP.
pub fn calibrate(job: &CalibrationJob) -> Result<CalibrationReport, CliError> {
    let k = read_intrinsics(&job.intrinsics)?;
    let obs = observe(job, &k)?;
    let mode = job.options.mode;
    let mut data = Vec::with_capacity(obs.len());
    let mut resolution = Vec::with_capacity(obs.len());
    for ob in &obs {
        let hyps = ob.pair.hypotheses();
        if ob.pair.is_single() {
            data.push(AmbiguousCorrespondence::new(ob.center, hyps[0].center, hyps[0].center));
            resolution.push(Resolution::Single);
            continue;
        }
        let partner = job.partner(ob.frame, ob.circle);
        match (mode, partner) {
            (Mode::Paired, _) | (Mode::Auto, None) => {
                data.push(AmbiguousCorrespondence::new(ob.center, hyps[0].center, hyps[1].center));
                resolution.push(Resolution::Paired);
            }
            (_, Some((j, ratio))) => {
                let other = obs
                    .iter()
                    .find(|o| o.frame == ob.frame && o.circle == j)
                    .expect("partner observed");
                let c = disambiguate_by_ratio(&ob.pair, &ob.conic, &other.conic, ratio).map_err(|e| {
                    CliError::from_core(e).context(&format!("frame {} circle {}", ob.frame, ob.circle))
                })?;
                data.push(AmbiguousCorrespondence::new(ob.center, c, c));
                resolution.push(Resolution::Homography);
            }
            (Mode::Homography, None) => {
                return Err(CliError::Input(format!(
                    "frame {} circle {}: homography mode needs a coplanar partner",
                    ob.frame, ob.circle
                )));
            }
        }
    }
    let cfg = RansacConfig {
        max_iterations: job.options.ransac_iterations,
        inlier_threshold: job.options.pnp_threshold,
        min_sample: 4,
        seed: job.options.seed,
    };
    let paired = solve_pnp_paired_detailed(&data, &k, &cfg).map_err(CliError::from_core)?;
    let pose = &paired.estimate.transform;
    let correspondences = obs
        .iter()
        .zip(&data)
        .zip(&resolution)
        .enumerate()
        .map(|(i, ((ob, d), res))| {
            let chosen = d.choose(paired.selection[i]);
            CorrespondenceReport {
                frame: ob.frame,
                circle: ob.circle,
                center_3d: ob.center.into(),
                fitted_radius: ob.fitted_radius,
                cloud_inliers: ob.cloud_inliers,
                hypotheses: ob.pair.hypotheses().iter().map(|h| h.center).collect(),
                center_2d: chosen.q2d,
                resolution: *res,
                reproj_px: reprojection_error(pose, &chosen, &k),
                inlier: paired.estimate.inlier_mask[i],
            }
        })
        .collect();
    let ext = paired.estimate.to_json();
    Ok(CalibrationReport {
        t: ext.t,
        mean_reproj_px: ext.mean_reproj_px,
        inliers: ext.inliers,
        mode,
        correspondences,
    })
}
