//! RANSAC and the circle estimators built on it.
//!
//! [`ransac`] is a plain hypothesize-and-verify loop over any [`Estimator`].
//! Two circle estimators plug into it: the conformal fit scored with the
//! conformal distance, and a decoupled plane + 2D circle baseline scored
//! with the Euclidean distance to the circle.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cga::{circle_distance2, fit_circle_cga};
use crate::error::{Error, Result};
use crate::geom::{Circle3D, Vec3};

/// Loop parameters shared by every RANSAC variant in the crate.
///
/// `inlier_threshold` is in the residual units of the estimator it drives:
/// squared meters for the circle estimators, pixels for PnP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    /// Smallest consensus set accepted as a solution.
    pub min_sample: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 0.05 * 0.05,
            min_sample: 5,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.inlier_threshold > 0.0) || !self.inlier_threshold.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "inlier_threshold must be positive, got {}",
                self.inlier_threshold
            )));
        }
        Ok(())
    }

    /// Same settings with a different seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A model family that RANSAC can hypothesize from minimal samples.
pub trait Estimator {
    type Datum: Clone;
    type Model: Clone;

    /// Number of data drawn per hypothesis.
    fn sample_size(&self) -> usize;

    /// Model through a minimal sample; `None` for degenerate samples.
    fn fit(&self, sample: &[Self::Datum]) -> Option<Self::Model>;

    fn residual(&self, model: &Self::Model, datum: &Self::Datum) -> f64;

    /// Optional polish on the consensus set. The default keeps the hypothesis.
    fn refit(&self, _inliers: &[Self::Datum], _hypothesis: &Self::Model) -> Option<Self::Model> {
        None
    }
}

/// Result of a RANSAC run.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus<M> {
    pub model: M,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    /// Mean residual over the inliers.
    pub mean_residual: f64,
    pub iterations_run: usize,
    /// Largest consensus among the sampled hypotheses.
    pub best_hypothesis_inliers: usize,
}

struct Score {
    mask: Vec<bool>,
    count: usize,
    mean: f64,
}

fn score<E: Estimator>(est: &E, model: &E::Model, data: &[E::Datum], threshold: f64) -> Score {
    let mut mask = vec![false; data.len()];
    let (mut count, mut sum) = (0usize, 0.0);
    for (m, d) in mask.iter_mut().zip(data) {
        let r = est.residual(model, d);
        if r <= threshold {
            *m = true;
            count += 1;
            sum += r;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    Score { mask, count, mean }
}

fn better(a: &Score, b: &Score) -> bool {
    a.count > b.count || (a.count == b.count && a.mean < b.mean)
}

/// Runs exactly `cfg.max_iterations` iterations (no adaptive early exit).
///
/// Hypotheses are ranked by inlier count, then by lower mean inlier residual;
/// on a full tie the earlier iteration wins. The winner is then refit on its
/// consensus set and the mask is rescored against the refit, so every
/// reported inlier satisfies the threshold against the returned model. The
/// refit may hold fewer inliers than the sampled winner, whose count is kept
/// in `best_hypothesis_inliers`.
pub fn ransac<E: Estimator>(
    est: &E,
    data: &[E::Datum],
    cfg: &RansacConfig,
) -> Result<Consensus<E::Model>> {
    cfg.validate()?;
    let k = est.sample_size();
    let needed = cfg.min_sample.max(k);
    if data.len() < needed {
        return Err(Error::InsufficientPoints {
            needed,
            got: data.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(E::Model, Score)> = None;
    let mut sample = Vec::with_capacity(k);
    for _ in 0..cfg.max_iterations {
        sample.clear();
        sample.extend(index::sample(&mut rng, data.len(), k).iter().map(|i| data[i].clone()));
        let Some(model) = est.fit(&sample) else {
            continue;
        };
        let s = score(est, &model, data, cfg.inlier_threshold);
        if best.as_ref().is_none_or(|(_, b)| better(&s, b)) {
            best = Some((model, s));
        }
    }
    let Some((model, s)) = best else {
        return Err(Error::NoConsensus { best: 0, needed });
    };
    if s.count < needed {
        return Err(Error::NoConsensus {
            best: s.count,
            needed,
        });
    }
    let best_hypothesis_inliers = s.count;
    let inliers: Vec<E::Datum> = data
        .iter()
        .zip(&s.mask)
        .filter(|(_, &m)| m)
        .map(|(d, _)| d.clone())
        .collect();
    let (model, s) = match est.refit(&inliers, &model) {
        Some(refit) => {
            let rs = score(est, &refit, data, cfg.inlier_threshold);
            (refit, rs)
        }
        None => (model, s),
    };
    Ok(Consensus {
        model,
        inlier_count: s.count,
        inlier_mask: s.mask,
        mean_residual: s.mean,
        iterations_run: cfg.max_iterations,
        best_hypothesis_inliers,
    })
}

/// Circle RANSAC result.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacReport {
    pub best_model: Circle3D,
    pub inlier_mask: Vec<bool>,
    pub iterations_run: usize,
    pub inlier_count: usize,
}

impl From<Consensus<Circle3D>> for RansacReport {
    fn from(c: Consensus<Circle3D>) -> Self {
        RansacReport {
            best_model: c.model,
            inlier_mask: c.inlier_mask,
            iterations_run: c.iterations_run,
            inlier_count: c.inlier_count,
        }
    }
}

/// Five-point conformal fit, scored with the conformal squared distance and
/// refit on all inliers.
#[derive(Debug, Clone, Copy, Default)]
pub struct CgaCircleEstimator;

impl Estimator for CgaCircleEstimator {
    type Datum = Vec3;
    type Model = Circle3D;

    fn sample_size(&self) -> usize {
        5
    }

    fn fit(&self, sample: &[Vec3]) -> Option<Circle3D> {
        fit_circle_cga(sample).ok().map(|f| f.circle)
    }

    fn residual(&self, model: &Circle3D, p: &Vec3) -> f64 {
        circle_distance2(model, p)
    }

    fn refit(&self, inliers: &[Vec3], _: &Circle3D) -> Option<Circle3D> {
        fit_circle_cga(inliers).ok().map(|f| f.circle)
    }
}

/// Three-point circumcircle hypotheses scored by squared Euclidean distance
/// to the circle. The best sampled model is returned as is, without a
/// consensus refit, the way a stock sample-consensus circle model behaves.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecoupledCircleEstimator;

impl Estimator for DecoupledCircleEstimator {
    type Datum = Vec3;
    type Model = Circle3D;

    fn sample_size(&self) -> usize {
        3
    }

    fn fit(&self, sample: &[Vec3]) -> Option<Circle3D> {
        fit_circle_decoupled(sample).ok()
    }

    fn residual(&self, model: &Circle3D, p: &Vec3) -> f64 {
        model.distance(p).powi(2)
    }
}

fn check_circle_config(points: &[Vec3], cfg: &RansacConfig) -> Result<()> {
    if cfg.min_sample < 5 {
        return Err(Error::InvalidConfig(format!(
            "circle models need min_sample >= 5, got {}",
            cfg.min_sample
        )));
    }
    let needed = cfg.min_sample.max(5);
    if points.len() < needed {
        return Err(Error::InsufficientPoints {
            needed,
            got: points.len(),
        });
    }
    Ok(())
}

/// Robust conformal circle fit.
pub fn ransac_fit_circle(points: &[Vec3], cfg: &RansacConfig) -> Result<RansacReport> {
    check_circle_config(points, cfg)?;
    ransac(&CgaCircleEstimator, points, cfg).map(Into::into)
}

/// Robust decoupled baseline; the threshold is compared against the squared
/// Euclidean point-to-circle distance.
pub fn ransac_fit_circle_decoupled(points: &[Vec3], cfg: &RansacConfig) -> Result<RansacReport> {
    check_circle_config(points, cfg)?;
    ransac(&DecoupledCircleEstimator, points, cfg).map(Into::into)
}

/// Total-least-squares plane through `points`: returns the centroid, the
/// unit normal and two in-plane axes.
pub fn fit_plane(points: &[Vec3]) -> Result<(Vec3, Vec3, Vec3, Vec3)> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let mean = points.iter().sum::<Vec3>() / points.len() as f64;
    let scatter = points
        .iter()
        .fold(Matrix3::zeros(), |acc, p| acc + (p - mean) * (p - mean).transpose());
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) || eig.eigenvalues[order[1]] <= 1e-20 * top {
        return Err(Error::DegeneratePlane);
    }
    let e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into_owned();
    let normal = e1.cross(&e2).normalize();
    Ok((mean, normal, e1, e2))
}

/// Plane first, then an algebraic (Kåsa) circle fit to the points projected
/// into that plane, lifted back to 3D.
pub fn fit_circle_decoupled(points: &[Vec3]) -> Result<Circle3D> {
    let (mean, normal, e1, e2) = fit_plane(points)?;
    // Kåsa: x² + y² = A x + B y + C
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for p in points {
        let q = p - mean;
        let (x, y) = (q.dot(&e1), q.dot(&e2));
        let row = Vector3::new(x, y, 1.0);
        ata += row * row.transpose();
        atb += row * (x * x + y * y);
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or(Error::DegeneratePlane)?;
    let (cx, cy) = (0.5 * sol.x, 0.5 * sol.y);
    let r2 = sol.z + cx * cx + cy * cy;
    if !(r2 > 0.0) {
        return Err(Error::NonCircleSolution(r2));
    }
    Circle3D::new(mean + cx * e1 + cy * e2, normal, r2.sqrt())
}
