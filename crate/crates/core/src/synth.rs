//! Synthetic scenes and the Monte Carlo harness.
//!
//! Each [`Scenario`] is a full protocol: draw ground truth, corrupt it, run
//! every competing method, and record one [`TrialRecord`] per method. Trials
//! are seeded with `seed + trial`, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::center::{disambiguate_by_ratio, find_center_hypotheses, SearchConfig};
use crate::cga::fit_circle_cga;
use crate::ellipse::{center_of_mass, fit_conic, Conic};
use crate::error::{Error, Result};
use crate::geom::{exp_so3, rotation_error, translation_error, Circle3D, Intrinsics, Pixel, RigidTransform, Vec3};
use crate::pnp::{solve_pnp_paired, solve_pnp_ransac, AmbiguousCorrespondence, Correspondence, PoseEstimate};
use crate::robust::{fit_circle_decoupled, ransac_fit_circle, ransac_fit_circle_decoupled, RansacConfig};

pub const IMAGE_WIDTH: f64 = 1280.0;
pub const IMAGE_HEIGHT: f64 = 960.0;
/// Boundary samples projected per circle.
pub const BOUNDARY_SAMPLES: usize = 100;
const MAX_VIEW_ATTEMPTS: usize = 200;

/// The camera used by the image-side scenarios.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(600.0, 600.0, 640.0, 480.0).expect("valid intrinsics")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// 100 points over the full circle.
    FullCircle,
    /// 100 points on a 70° arc with power-law density.
    PartialArc,
    /// 12 points in 2 or 3 angular clusters.
    SparseClusters,
    /// 20 points over 200° with jittered spacing.
    SymmetricSparse,
    /// Full circle at σ = 0.1 plus a fraction of uniform outliers.
    Outlier,
    /// Projected-center accuracy from a single noisy image ellipse.
    TwodCenter,
    /// Extrinsics from 20 circle pairs with each 2D-center method.
    PoseStudy,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::FullCircle,
        Scenario::PartialArc,
        Scenario::SparseClusters,
        Scenario::SymmetricSparse,
        Scenario::Outlier,
        Scenario::TwodCenter,
        Scenario::PoseStudy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::FullCircle => "A",
            Scenario::PartialArc => "B",
            Scenario::SparseClusters => "C",
            Scenario::SymmetricSparse => "D",
            Scenario::Outlier => "outlier",
            Scenario::TwodCenter => "twod_center",
            Scenario::PoseStudy => "pose_study",
        }
    }

    pub fn default_sigma(&self) -> f64 {
        match self {
            Scenario::Outlier => 0.1,
            Scenario::TwodCenter | Scenario::PoseStudy => 1.0,
            _ => 0.2,
        }
    }

    fn is_cloud(&self) -> bool {
        matches!(
            self,
            Scenario::FullCircle | Scenario::PartialArc | Scenario::SparseClusters | Scenario::SymmetricSparse
        )
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "a" | "full" | "full_circle" => Scenario::FullCircle,
            "b" | "partial" | "partial_arc" => Scenario::PartialArc,
            "c" | "sparse" | "sparse_clusters" => Scenario::SparseClusters,
            "d" | "symmetric" | "symmetric_sparse" => Scenario::SymmetricSparse,
            "outlier" | "outlier_test" => Scenario::Outlier,
            "twod_center" | "2d" | "twod" => Scenario::TwodCenter,
            "pose_study" | "pose" => Scenario::PoseStudy,
            _ => return Err(Error::InvalidConfig(format!("unknown scenario '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub trials: usize,
    /// Meters for point clouds, pixels for image scenarios.
    pub sigma: f64,
    pub seed: u64,
    /// Outlier fraction for [`Scenario::Outlier`].
    pub outlier_fraction: f64,
    pub ransac_iterations: usize,
    /// Circle RANSAC gate in squared meters; `None` picks the protocol
    /// default (see [`ScenarioSpec::circle_threshold`]).
    pub inlier_threshold: Option<f64>,
    /// PnP-RANSAC gate in pixels.
    pub pnp_threshold: f64,
    pub pairs: usize,
    pub n_dirs: usize,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, trials: usize, seed: u64) -> Self {
        Self {
            scenario,
            trials,
            sigma: scenario.default_sigma(),
            seed,
            outlier_fraction: 0.2,
            ransac_iterations: 1000,
            inlier_threshold: None,
            pnp_threshold: 5.0,
            pairs: 20,
            n_dirs: 36,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..=0.5).contains(&self.outlier_fraction) {
            return Err(Error::InvalidConfig(format!(
                "outlier fraction must be in [0, 0.5], got {}",
                self.outlier_fraction
            )));
        }
        if self.ransac_iterations == 0 || self.pairs < 4 || self.n_dirs < 2 {
            return Err(Error::InvalidConfig("iterations, pairs (>= 4) and n_dirs must be positive".into()));
        }
        Ok(())
    }

    /// Circle RANSAC gate. The outlier protocol uses the fixed `(0.05 m)²`;
    /// the sparse configurations use a χ²(2) 95% band on the noise scale,
    /// since a fixed 5 cm gate at σ = 0.2 leaves too few inliers to fit.
    pub fn circle_threshold(&self) -> f64 {
        self.inlier_threshold
            .unwrap_or_else(|| match self.scenario {
                Scenario::Outlier => RansacConfig::default().inlier_threshold,
                _ => (2.45 * self.sigma).powi(2),
            })
            .max(1e-12)
    }

    fn circle_ransac(&self, seed: u64) -> RansacConfig {
        RansacConfig {
            max_iterations: self.ransac_iterations,
            inlier_threshold: self.circle_threshold(),
            min_sample: 5,
            seed,
        }
    }

    fn pnp_ransac(&self, seed: u64) -> RansacConfig {
        RansacConfig {
            max_iterations: self.ransac_iterations,
            inlier_threshold: self.pnp_threshold,
            min_sample: 4,
            seed,
        }
    }
}

/// Uniform direction on the unit sphere.
pub fn sample_unit_normal<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Center in `[−2, 2]³`, radius in `[1, 5]`, isotropic normal.
pub fn sample_circle_gt<R: Rng + ?Sized>(rng: &mut R) -> Circle3D {
    let center = Vec3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    let radius = rng.random_range(1.0..5.0);
    Circle3D::new(center, sample_unit_normal(rng), radius).expect("valid circle")
}

/// Angular positions for one of the four cloud layouts (radians, in the
/// circle's own basis).
pub fn sample_angles<R: Rng + ?Sized>(scenario: Scenario, rng: &mut R) -> Vec<f64> {
    match scenario {
        Scenario::PartialArc => {
            let arc = 70f64.to_radians();
            (0..100)
                .map(|_| {
                    let u: f64 = rng.random();
                    u * u * arc - 0.2 * arc
                })
                .collect()
        }
        Scenario::SparseClusters => {
            let k: usize = rng.random_range(2..=3);
            let mut out = Vec::with_capacity(12);
            for c in 0..k {
                let count = 12 / k + usize::from(c < 12 % k);
                let mu = rng.random_range(0.0..TAU);
                let spread = rng.random_range(PI / 30.0..PI / 9.0);
                let n = Normal::new(mu, spread).expect("positive spread");
                out.extend((0..count).map(|_| n.sample(rng)));
            }
            out
        }
        Scenario::SymmetricSparse => {
            let arc = 200f64.to_radians();
            let gaps: Vec<f64> = (0..19).map(|_| rng.random_range(0.8..1.2)).collect();
            let total: f64 = gaps.iter().sum();
            let mut theta = 0.0;
            let mut out = vec![0.0];
            for g in gaps {
                theta += g / total * arc;
                out.push(theta);
            }
            out
        }
        _ => (0..100).map(|_| rng.random_range(0.0..TAU)).collect(),
    }
}

pub fn sample_points<R: Rng + ?Sized>(circle: &Circle3D, scenario: Scenario, rng: &mut R) -> Vec<Vec3> {
    sample_angles(scenario, rng)
        .into_iter()
        .map(|t| circle.point_at(t))
        .collect()
}

/// Adds i.i.d. `N(0, σ²)` to every coordinate.
pub fn add_noise<R: Rng + ?Sized>(points: &mut [Vec3], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    for p in points {
        for x in p.iter_mut() {
            *x += n.sample(rng);
        }
    }
}

/// Appends `round(p · N)` points uniform in the cube of side `4r` around the
/// circle center and shuffles the result. Returns the shuffled cloud and its
/// inlier mask.
pub fn inject_outliers<R: Rng + ?Sized>(
    points: Vec<Vec3>,
    fraction: f64,
    circle: &Circle3D,
    rng: &mut R,
) -> (Vec<Vec3>, Vec<bool>) {
    let n_out = (fraction * points.len() as f64).round() as usize;
    let half = 2.0 * circle.radius;
    let mut tagged: Vec<(Vec3, bool)> = points.into_iter().map(|p| (p, true)).collect();
    for _ in 0..n_out {
        let d = Vec3::new(
            rng.random_range(-half..half),
            rng.random_range(-half..half),
            rng.random_range(-half..half),
        );
        tagged.push((circle.center + d, false));
    }
    tagged.shuffle(rng);
    tagged.into_iter().unzip()
}

/// One rendered view of a set of circles.
#[derive(Debug, Clone)]
pub struct View {
    pub conics: Vec<Conic>,
    /// Exact projections of the 3D centers.
    pub gt_centers: Vec<Pixel>,
    pub boundaries: Vec<Vec<Pixel>>,
}

fn in_image(p: &Pixel) -> bool {
    p.u >= 0.0 && p.u < IMAGE_WIDTH && p.v >= 0.0 && p.v < IMAGE_HEIGHT
}

/// Projects boundary samples of each circle (source frame of `pose`), adds
/// pixel noise and fits a conic per circle.
///
/// Fails if any sample is behind the camera or outside the image, or if a
/// noisy fit is not an ellipse; callers resample the view.
pub fn generate_view<R: Rng + ?Sized>(
    circles: &[Circle3D],
    pose: &RigidTransform,
    k: &Intrinsics,
    sigma_px: f64,
    rng: &mut R,
) -> Result<View> {
    let noise = Normal::new(0.0, sigma_px.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut view = View {
        conics: Vec::new(),
        gt_centers: Vec::new(),
        boundaries: Vec::new(),
    };
    for c in circles {
        let cam = c.transformed(pose);
        let mut pts = Vec::with_capacity(BOUNDARY_SAMPLES);
        for i in 0..BOUNDARY_SAMPLES {
            let p = k.project_camera(&cam.point_at(TAU * i as f64 / BOUNDARY_SAMPLES as f64))?;
            if !in_image(&p) {
                return Err(Error::DegenerateConfiguration("circle leaves the image".into()));
            }
            pts.push(if sigma_px > 0.0 {
                Pixel::new(p.u + noise.sample(rng), p.v + noise.sample(rng))
            } else {
                p
            });
        }
        view.conics.push(fit_conic(&pts)?);
        view.gt_centers.push(k.project_camera(&cam.center)?);
        view.boundaries.push(pts);
    }
    Ok(view)
}

/// Depth range and tilt bound for a coplanar pair.
#[derive(Debug, Clone, Copy)]
pub struct PairLayout {
    pub depth: (f64, f64),
    pub max_tilt: f64,
    pub radius: f64,
}

/// Two coplanar, non-overlapping circles in the camera frame. The primary
/// has `layout.radius`; the secondary `r₁·U(0.5, 1)` at an in-plane offset
/// of `(r₁ + r₂)·U(1.1, 1.6)`.
pub fn sample_coplanar_pair<R: Rng + ?Sized>(layout: &PairLayout, k: &Intrinsics, rng: &mut R) -> (Circle3D, Circle3D) {
    let z = rng.random_range(layout.depth.0..layout.depth.1);
    let px = Pixel::new(
        rng.random_range(0.2 * IMAGE_WIDTH..0.8 * IMAGE_WIDTH),
        rng.random_range(0.2 * IMAGE_HEIGHT..0.8 * IMAGE_HEIGHT),
    );
    let c1 = k.normalized(&px) * z;
    // tilt away from the line of sight about a random perpendicular axis
    let los = -c1.normalize();
    let axis = los.cross(&sample_unit_normal(rng)).normalize();
    let tilt = rng.random_range(0.0..layout.max_tilt);
    let n = exp_so3(&(axis * tilt)) * los;
    let r1 = layout.radius;
    let r2 = r1 * rng.random_range(0.5..1.0);
    let (e1, e2) = crate::geom::plane_basis(&n);
    let phi = rng.random_range(0.0..TAU);
    let offset = (r1 + r2) * rng.random_range(1.1..1.6);
    let c2 = c1 + (e1 * phi.cos() + e2 * phi.sin()) * offset;
    (
        Circle3D::new(c1, n, r1).expect("valid circle"),
        Circle3D::new(c2, n, r2).expect("valid circle"),
    )
}

fn random_extrinsics<R: Rng + ?Sized>(rng: &mut R) -> RigidTransform {
    let axis = sample_unit_normal(rng);
    RigidTransform::from_axis_angle(
        &(axis * rng.random_range(0.0..PI)),
        Vec3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ),
    )
}

/// A pair expressed in the source frame of `pose`, with its rendered view.
#[derive(Debug, Clone)]
pub struct PairObservation {
    pub primary: Circle3D,
    pub secondary: Circle3D,
    pub view: View,
}

/// Samples a pair that renders fully inside the image with ellipse fits,
/// retrying up to a fixed budget.
pub fn observe_pair<R: Rng + ?Sized>(
    layout: &PairLayout,
    pose: &RigidTransform,
    k: &Intrinsics,
    sigma_px: f64,
    rng: &mut R,
) -> Result<PairObservation> {
    let inv = pose.inverse();
    for _ in 0..MAX_VIEW_ATTEMPTS {
        let (a, b) = sample_coplanar_pair(layout, k, rng);
        let (a, b) = (a.transformed(&inv), b.transformed(&inv));
        if let Ok(view) = generate_view(&[a, b], pose, k, sigma_px, rng) {
            return Ok(PairObservation {
                primary: a,
                secondary: b,
                view,
            });
        }
    }
    Err(Error::DegenerateConfiguration("no valid view within the attempt budget".into()))
}

/// Per-method errors of one trial. `None` marks a metric that does not
/// apply or a failed method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub method: String,
    pub e_center_m: Option<f64>,
    pub e_radius_m: Option<f64>,
    pub e_2d_px: Option<f64>,
    pub e_reproj_px: Option<f64>,
    pub e_rot_rad: Option<f64>,
    pub e_trans_m: Option<f64>,
    pub failed: bool,
}

impl TrialRecord {
    fn empty(trial: usize, method: &str) -> Self {
        Self {
            trial,
            method: method.to_string(),
            e_center_m: None,
            e_radius_m: None,
            e_2d_px: None,
            e_reproj_px: None,
            e_rot_rad: None,
            e_trans_m: None,
            failed: false,
        }
    }

    fn failed(trial: usize, method: &str) -> Self {
        Self {
            failed: true,
            ..Self::empty(trial, method)
        }
    }

    fn circle(trial: usize, method: &str, est: Result<Circle3D>, gt: &Circle3D) -> Self {
        match est {
            Ok(c) => Self {
                e_center_m: Some((c.center - gt.center).norm()),
                e_radius_m: Some((c.radius - gt.radius).abs()),
                ..Self::empty(trial, method)
            },
            Err(_) => Self::failed(trial, method),
        }
    }

    pub const METRICS: [&'static str; 6] = [
        "e_center_m",
        "e_radius_m",
        "e_2d_px",
        "e_reproj_px",
        "e_rot_rad",
        "e_trans_m",
    ];

    pub fn metrics(&self) -> [Option<f64>; 6] {
        [
            self.e_center_m,
            self.e_radius_m,
            self.e_2d_px,
            self.e_reproj_px,
            self.e_rot_rad,
            self.e_trans_m,
        ]
    }
}

pub const CSV_HEADER: &str = "trial,method,e_center_m,e_radius_m,e_2d_px,e_reproj_px,e_rot_rad,e_trans_m,failed";

fn cloud_trial(spec: &ScenarioSpec, trial: usize, rng: &mut ChaCha8Rng) -> Vec<TrialRecord> {
    let gt = sample_circle_gt(rng);
    let mut pts = sample_points(&gt, spec.scenario, rng);
    add_noise(&mut pts, spec.sigma, rng);
    let seed: u64 = rng.random();
    let cfg = spec.circle_ransac(seed);
    vec![
        TrialRecord::circle(trial, "cga_ransac", ransac_fit_circle(&pts, &cfg).map(|r| r.best_model), &gt),
        TrialRecord::circle(
            trial,
            "decoupled_ransac",
            ransac_fit_circle_decoupled(&pts, &cfg).map(|r| r.best_model),
            &gt,
        ),
        TrialRecord::circle(trial, "cga", fit_circle_cga(&pts).map(|r| r.circle), &gt),
        TrialRecord::circle(trial, "decoupled", fit_circle_decoupled(&pts), &gt),
    ]
}

fn outlier_trial(spec: &ScenarioSpec, trial: usize, rng: &mut ChaCha8Rng) -> Vec<TrialRecord> {
    let gt = sample_circle_gt(rng);
    let mut pts = sample_points(&gt, Scenario::FullCircle, rng);
    add_noise(&mut pts, spec.sigma, rng);
    let (pts, _) = inject_outliers(pts, spec.outlier_fraction, &gt, rng);
    let seed: u64 = rng.random();
    let cfg = spec.circle_ransac(seed);
    vec![
        TrialRecord::circle(trial, "cga_ransac", ransac_fit_circle(&pts, &cfg).map(|r| r.best_model), &gt),
        TrialRecord::circle(
            trial,
            "decoupled_ransac",
            ransac_fit_circle_decoupled(&pts, &cfg).map(|r| r.best_model),
            &gt,
        ),
    ]
}

pub const TWOD_METHODS: [&str; 4] = ["ellipse_center", "center_of_mass", "refined", "refined_lowest_loss"];
pub const POSE_METHODS: [&str; 4] = ["ellipse_center", "center_of_mass", "refined", "refined_paired"];

/// Every 2D-center estimate for the primary circle of one observation.
#[derive(Debug, Clone)]
pub struct CenterEstimates {
    pub ellipse_center: Result<Pixel>,
    pub center_of_mass: Result<Pixel>,
    pub refined: Result<Pixel>,
    pub hypotheses: Result<(Pixel, Pixel)>,
}

pub fn estimate_centers(obs: &PairObservation, k: &Intrinsics, n_dirs: usize) -> CenterEstimates {
    let (q1, q2) = (&obs.view.conics[0], &obs.view.conics[1]);
    let cfg = SearchConfig {
        n_dirs,
        ..SearchConfig::with_radius(obs.primary.radius)
    };
    let pair = find_center_hypotheses(q1, k, &cfg);
    let ratio = obs.primary.radius / obs.secondary.radius;
    CenterEstimates {
        ellipse_center: q1.center(),
        center_of_mass: center_of_mass(q1),
        refined: pair.as_ref().map_err(Clone::clone).and_then(|p| disambiguate_by_ratio(p, q1, q2, ratio)),
        hypotheses: pair.map(|p| {
            let a = p.primary.center;
            (a, p.secondary.map_or(a, |s| s.center))
        }),
    }
}

fn twod_trial(spec: &ScenarioSpec, trial: usize, rng: &mut ChaCha8Rng) -> Vec<TrialRecord> {
    let k = default_intrinsics();
    let layout = PairLayout {
        depth: (2.0, 5.0),
        max_tilt: 60f64.to_radians(),
        radius: 0.5,
    };
    let Ok(obs) = observe_pair(&layout, &RigidTransform::identity(), &k, spec.sigma, rng) else {
        return TWOD_METHODS.iter().map(|m| TrialRecord::failed(trial, m)).collect();
    };
    let gt = obs.view.gt_centers[0];
    let est = estimate_centers(&obs, &k, spec.n_dirs);
    let rec = |m: &str, p: Result<Pixel>| match p {
        Ok(p) => TrialRecord {
            e_2d_px: Some(p.distance(&gt)),
            ..TrialRecord::empty(trial, m)
        },
        Err(_) => TrialRecord::failed(trial, m),
    };
    vec![
        rec("ellipse_center", est.ellipse_center),
        rec("center_of_mass", est.center_of_mass),
        rec("refined", est.refined),
        rec("refined_lowest_loss", est.hypotheses.map(|h| h.0)),
    ]
}

#[allow(clippy::too_many_arguments)]
fn pose_record(
    trial: usize,
    method: &str,
    est: Result<PoseEstimate>,
    used: &[Option<Pixel>],
    world: &[Vec3],
    gt_px: &[Pixel],
    gt: &RigidTransform,
    k: &Intrinsics,
) -> TrialRecord {
    let Ok(est) = est else {
        return TrialRecord::failed(trial, method);
    };
    let t = &est.transform;
    let reproj: Vec<f64> = world
        .iter()
        .zip(gt_px)
        .map(|(w, g)| k.project_camera(&t.apply(w)).map_or(f64::INFINITY, |p| p.distance(g)))
        .collect();
    let e2d: Vec<f64> = used.iter().zip(gt_px).filter_map(|(u, g)| u.map(|u| u.distance(g))).collect();
    TrialRecord {
        e_2d_px: (!e2d.is_empty()).then(|| e2d.iter().sum::<f64>() / e2d.len() as f64),
        e_reproj_px: Some(reproj.iter().sum::<f64>() / reproj.len() as f64),
        e_rot_rad: Some(rotation_error(&t.rotation, &gt.rotation)),
        e_trans_m: Some(translation_error(&t.translation, &gt.translation)),
        ..TrialRecord::empty(trial, method)
    }
}

fn pose_trial(spec: &ScenarioSpec, trial: usize, rng: &mut ChaCha8Rng) -> Vec<TrialRecord> {
    let k = default_intrinsics();
    let gt = random_extrinsics(rng);
    let layout = PairLayout {
        depth: (3.0, 10.0),
        max_tilt: 60f64.to_radians(),
        radius: 0.5,
    };
    let mut observations = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        match observe_pair(&layout, &gt, &k, spec.sigma, rng) {
            Ok(o) => observations.push(o),
            Err(_) => return POSE_METHODS.iter().map(|m| TrialRecord::failed(trial, m)).collect(),
        }
    }
    let seed: u64 = rng.random();
    let estimates: Vec<CenterEstimates> = observations
        .par_iter()
        .map(|o| estimate_centers(o, &k, spec.n_dirs))
        .collect();
    let world: Vec<Vec3> = observations.iter().map(|o| o.primary.center).collect();
    let gt_px: Vec<Pixel> = observations.iter().map(|o| o.view.gt_centers[0]).collect();
    let cfg = spec.pnp_ransac(seed);

    let single = |pick: &dyn Fn(&CenterEstimates) -> Option<Pixel>| -> (Vec<Option<Pixel>>, Result<PoseEstimate>) {
        let used: Vec<Option<Pixel>> = estimates.iter().map(pick).collect();
        let corr: Vec<Correspondence> = world
            .iter()
            .zip(&used)
            .filter_map(|(w, u)| u.map(|u| Correspondence::new(*w, u)))
            .collect();
        (used, solve_pnp_ransac(&corr, &k, &cfg))
    };
    let mut out = Vec::with_capacity(4);
    for (name, pick) in [
        ("ellipse_center", &(|e: &CenterEstimates| e.ellipse_center.clone().ok()) as &dyn Fn(&CenterEstimates) -> Option<Pixel>),
        ("center_of_mass", &|e: &CenterEstimates| e.center_of_mass.clone().ok()),
        ("refined", &|e: &CenterEstimates| e.refined.clone().ok()),
    ] {
        let (used, est) = single(pick);
        out.push(pose_record(trial, name, est, &used, &world, &gt_px, &gt, &k));
    }
    let amb: Vec<AmbiguousCorrespondence> = world
        .iter()
        .zip(&estimates)
        .filter_map(|(w, e)| e.hypotheses.as_ref().ok().map(|(a, b)| AmbiguousCorrespondence::new(*w, *a, *b)))
        .collect();
    let paired = solve_pnp_paired(&amb, &k, &cfg);
    let used: Vec<Option<Pixel>> = match &paired {
        Ok(p) => estimates
            .iter()
            .zip(&world)
            .map(|(e, w)| {
                e.hypotheses.as_ref().ok().map(|(a, b)| {
                    let err = |q: &Pixel| {
                        k.project_camera(&p.transform.apply(w)).map_or(f64::INFINITY, |x| x.distance(q))
                    };
                    if err(b) < err(a) {
                        *b
                    } else {
                        *a
                    }
                })
            })
            .collect(),
        Err(_) => vec![None; world.len()],
    };
    out.push(pose_record(trial, "refined_paired", paired, &used, &world, &gt_px, &gt, &k));
    out
}

/// Records for one trial; seeded with `spec.seed + trial`.
pub fn run_trial(spec: &ScenarioSpec, trial: usize) -> Vec<TrialRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(trial as u64));
    match spec.scenario {
        s if s.is_cloud() => cloud_trial(spec, trial, &mut rng),
        Scenario::Outlier => outlier_trial(spec, trial, &mut rng),
        Scenario::TwodCenter => twod_trial(spec, trial, &mut rng),
        _ => pose_trial(spec, trial, &mut rng),
    }
}

/// Mean, sample standard deviation, median and interquartile range
/// (linear-interpolation quantiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub iqr: f64,
}

pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        Some(Stats {
            n,
            mean,
            std,
            median: quantile(&s, 0.5),
            iqr: quantile(&s, 0.75) - quantile(&s, 0.25),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MethodSummary {
    pub failed: usize,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, Stats>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub spec: ScenarioSpec,
    pub records: Vec<TrialRecord>,
    pub summary: BTreeMap<String, MethodSummary>,
}

pub fn summarize(records: &[TrialRecord]) -> BTreeMap<String, MethodSummary> {
    let mut values: BTreeMap<String, (usize, BTreeMap<&str, Vec<f64>>)> = BTreeMap::new();
    for r in records {
        let entry = values.entry(r.method.clone()).or_default();
        entry.0 += usize::from(r.failed);
        for (name, v) in TrialRecord::METRICS.iter().zip(r.metrics()) {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                entry.1.entry(name).or_default().push(v);
            }
        }
    }
    values
        .into_iter()
        .map(|(m, (failed, metrics))| {
            let metrics = metrics
                .into_iter()
                .filter_map(|(k, v)| Stats::of(&v).map(|s| (k.to_string(), s)))
                .collect();
            (m, MethodSummary { failed, metrics })
        })
        .collect()
}

/// Runs every trial of `spec` (in parallel) and summarizes per method.
pub fn run_benchmark(spec: &ScenarioSpec) -> Result<BenchmarkResult> {
    spec.validate()?;
    let records: Vec<TrialRecord> = (0..spec.trials)
        .into_par_iter()
        .map(|t| run_trial(spec, t))
        .collect::<Vec<_>>()
        .concat();
    let summary = summarize(&records);
    Ok(BenchmarkResult {
        spec: *spec,
        records,
        summary,
    })
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl BenchmarkResult {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            let m = r.metrics();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.trial,
                r.method,
                csv_field(m[0]),
                csv_field(m[1]),
                csv_field(m[2]),
                csv_field(m[3]),
                csv_field(m[4]),
                csv_field(m[5]),
                u8::from(r.failed)
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.summary).expect("summary serializes")
    }

    /// Mean of a metric for a method, if any trial produced it.
    pub fn mean(&self, method: &str, metric: &str) -> Option<f64> {
        self.summary.get(method)?.metrics.get(metric).map(|s| s.mean)
    }

    pub fn median(&self, method: &str, metric: &str) -> Option<f64> {
        self.summary.get(method)?.metrics.get(metric).map(|s| s.median)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::center::project_circle;
    use crate::ellipse::conic_to_params;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ground_truth_distribution() {
        let mut r = rng(71);
        let n = 10_000;
        let mut mean_c = Vec3::zeros();
        let mut mean_n = Vec3::zeros();
        let (mut rmin, mut rmax) = (f64::INFINITY, 0.0f64);
        for _ in 0..n {
            let c = sample_circle_gt(&mut r);
            assert!(c.center.iter().all(|x| (-2.0..=2.0).contains(x)));
            mean_c += c.center / n as f64;
            rmin = rmin.min(c.radius);
            rmax = rmax.max(c.radius);
            mean_n += sample_unit_normal(&mut r) / n as f64;
        }
        assert!(mean_c.amax() < 0.05, "{mean_c}");
        assert!(rmin >= 1.0 && rmax <= 5.0);
        assert!(mean_n.norm() < 0.03);
    }

    #[test]
    fn full_circle_angles_are_uniform() {
        let mut r = rng(72);
        let mut a: Vec<f64> = (0..100).flat_map(|_| sample_angles(Scenario::FullCircle, &mut r)).collect();
        a.sort_by(|x, y| x.total_cmp(y));
        let n = a.len() as f64;
        let ks = a
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = x / TAU;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "{ks}");
    }

    #[test]
    fn layout_supports() {
        let mut r = rng(73);
        let arc = 70f64.to_radians();
        for _ in 0..50 {
            let b = sample_angles(Scenario::PartialArc, &mut r);
            assert_eq!(b.len(), 100);
            assert!(b.iter().all(|t| *t >= -0.2 * arc && *t <= 0.8 * arc));
            let c = sample_angles(Scenario::SparseClusters, &mut r);
            assert_eq!(c.len(), 12);
            let d = sample_angles(Scenario::SymmetricSparse, &mut r);
            assert_eq!(d.len(), 20);
            assert!((d[19] - 200f64.to_radians()).abs() < 1e-12);
            let gaps: Vec<f64> = d.windows(2).map(|w| w[1] - w[0]).collect();
            for g in gaps.windows(2) {
                let q = g[1] / g[0];
                assert!((0.8 / 1.2 - 1e-12..=1.2 / 0.8 + 1e-12).contains(&q));
            }
        }
    }

    #[test]
    fn points_lie_on_circle() {
        let mut r = rng(74);
        for s in [Scenario::FullCircle, Scenario::PartialArc, Scenario::SparseClusters, Scenario::SymmetricSparse] {
            let c = sample_circle_gt(&mut r);
            for p in sample_points(&c, s, &mut r) {
                assert!(c.distance(&p) < 1e-12);
            }
        }
    }

    #[test]
    fn noise_statistics() {
        let mut r = rng(75);
        let orig = vec![Vec3::zeros(); 100_000];
        let mut same = orig.clone();
        add_noise(&mut same, 0.0, &mut r);
        assert_eq!(same, orig);
        let mut pts = orig;
        add_noise(&mut pts, 0.3, &mut r);
        for axis in 0..3 {
            let v: Vec<f64> = pts.iter().map(|p| p[axis]).collect();
            let s = Stats::of(&v).unwrap();
            assert!((s.std - 0.3).abs() < 0.02 * 0.3);
        }
    }

    #[test]
    fn outlier_counts_and_cube() {
        let mut r = rng(76);
        let c = sample_circle_gt(&mut r);
        let pts = sample_points(&c, Scenario::FullCircle, &mut r);
        let (all, mask) = inject_outliers(pts, 0.5, &c, &mut r);
        assert_eq!(all.len(), 150);
        assert_eq!(mask.iter().filter(|m| !**m).count(), 50);
        for (p, m) in all.iter().zip(&mask) {
            if !m {
                assert!((p - c.center).amax() <= 2.0 * c.radius);
            } else {
                assert!(c.distance(p) < 1e-12);
            }
        }
        // shuffled: outliers are not all at the tail
        assert!(mask[100..].iter().any(|m| *m));
    }

    #[test]
    fn fronto_parallel_view_scale() {
        let k = default_intrinsics();
        let c = Circle3D::new(Vec3::new(0.0, 0.0, 5.0), Vec3::z(), 1.0).unwrap();
        let v = generate_view(&[c], &RigidTransform::identity(), &k, 0.0, &mut rng(77)).unwrap();
        let p = conic_to_params(&v.conics[0]).unwrap();
        assert!((p.a - 120.0).abs() < 1e-6 && (p.b - 120.0).abs() < 1e-6);
        assert!(p.center().distance(&Pixel::new(640.0, 480.0)) < 1e-6);
        assert_eq!(v.gt_centers[0], k.project_camera(&c.center).unwrap());
    }

    #[test]
    fn tilted_view_shows_perspective_bias() {
        let k = default_intrinsics();
        let n = exp_so3(&Vec3::new(std::f64::consts::FRAC_PI_4, 0.0, 0.0)) * Vec3::z();
        let c = Circle3D::new(Vec3::new(0.3, 0.2, 2.5), n, 0.5).unwrap();
        let v = generate_view(&[c], &RigidTransform::identity(), &k, 0.0, &mut rng(78)).unwrap();
        let (exact, _) = project_circle(&c, &k).unwrap();
        assert!(v.conics[0].center().unwrap().distance(&exact.center().unwrap()) < 1e-6);
        assert!(v.conics[0].center().unwrap().distance(&v.gt_centers[0]) > 0.5);
    }

    #[test]
    fn pair_layout_is_valid() {
        let k = default_intrinsics();
        let mut r = rng(79);
        let layout = PairLayout {
            depth: (2.0, 5.0),
            max_tilt: 60f64.to_radians(),
            radius: 0.5,
        };
        let pose = random_extrinsics(&mut r);
        for _ in 0..20 {
            let o = observe_pair(&layout, &pose, &k, 1.0, &mut r).unwrap();
            let (a, b) = (o.primary.transformed(&pose), o.secondary.transformed(&pose));
            assert!((a.normal.dot(&b.normal).abs() - 1.0).abs() < 1e-9);
            assert!((b.center - a.center).dot(&a.normal).abs() < 1e-9);
            assert!((b.center - a.center).norm() > a.radius + b.radius);
            assert!((0.5..=1.0).contains(&(b.radius / a.radius)));
            assert!(o.view.boundaries.iter().flatten().all(|p| p.u.is_finite()));
        }
    }

    #[test]
    fn exact_cloud_trials_have_zero_cga_error() {
        for s in [Scenario::FullCircle, Scenario::PartialArc, Scenario::SparseClusters, Scenario::SymmetricSparse] {
            let spec = ScenarioSpec {
                sigma: 0.0,
                ransac_iterations: 50,
                ..ScenarioSpec::new(s, 5, 3)
            };
            let res = run_benchmark(&spec).unwrap();
            for r in res.records.iter().filter(|r| r.method.starts_with("cga")) {
                assert!(!r.failed);
                assert!(r.e_center_m.unwrap() <= 1e-8, "{s}: {r:?}");
                assert!(r.e_radius_m.unwrap() <= 1e-8);
            }
        }
    }

    #[test]
    fn benchmark_is_deterministic_and_csv_matches_summary() {
        let spec = ScenarioSpec {
            ransac_iterations: 100,
            ..ScenarioSpec::new(Scenario::Outlier, 6, 11)
        };
        let a = run_benchmark(&spec).unwrap();
        let b = run_benchmark(&spec).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().count(), 1 + 6 * 2);
        // recompute the means from the CSV text
        for method in ["cga_ransac", "decoupled_ransac"] {
            let vals: Vec<f64> = text
                .lines()
                .skip(1)
                .map(|l| l.split(',').collect::<Vec<_>>())
                .filter(|f| f[1] == method && !f[2].is_empty())
                .map(|f| f[2].parse().unwrap())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((m - a.mean(method, "e_center_m").unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn stats_quantiles() {
        let s = Stats::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.iqr, 3.25 - 1.75);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("nope".parse::<Scenario>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = ScenarioSpec::new(Scenario::Outlier, 1, 0);
        s.outlier_fraction = 0.7;
        assert!(s.validate().is_err());
        s.outlier_fraction = 0.2;
        s.trials = 0;
        assert!(run_benchmark(&s).is_err());
    }
}
