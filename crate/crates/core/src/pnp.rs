//! Camera pose from 3D–2D correspondences.
//!
//! [`solve_pnp`] initializes linearly (DLT, plane homography or P3P) and
//! polishes with Levenberg–Marquardt on the squared reprojection error.
//! [`solve_pnp_ransac`] wraps it in a 4-point hypothesize-and-verify loop, and
//! [`solve_pnp_paired`] does the same when every 3D point has two candidate
//! projections and the right one is unknown.

use std::cell::RefCell;

use nalgebra::{DMatrix, Matrix2x6, Matrix3, Matrix3x4, Matrix6, SymmetricEigen, Vector2, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{exp_so3, orthonormalize, skew, Intrinsics, Pixel, RigidTransform, Vec3};
use crate::robust::{ransac, Estimator, RansacConfig};

const MAX_LM_ITERATIONS: usize = 100;
const GRADIENT_TOL: f64 = 1e-10;
const PLANAR_RATIO: f64 = 1e-3;
const P3P_SAMPLES: usize = 600;
/// Mixed into the RANSAC seed for the hypothesis-choice stream.
const CHOICE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub p3d: Vec3,
    pub q2d: Pixel,
}

impl Correspondence {
    pub fn new(p3d: Vec3, q2d: Pixel) -> Self {
        Self { p3d, q2d }
    }
}

/// A 3D point with two candidate image projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousCorrespondence {
    pub p3d: Vec3,
    pub hypotheses: [Pixel; 2],
}

impl AmbiguousCorrespondence {
    pub fn new(p3d: Vec3, a: Pixel, b: Pixel) -> Self {
        Self {
            p3d,
            hypotheses: [a, b],
        }
    }

    /// Both hypotheses equal: the single-minimum case.
    pub fn unambiguous(c: &Correspondence) -> Self {
        Self::new(c.p3d, c.q2d, c.q2d)
    }

    pub fn choose(&self, i: usize) -> Correspondence {
        Correspondence::new(self.p3d, self.hypotheses[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub transform: RigidTransform,
    /// Mean reprojection error in pixels over the inliers.
    pub mean_reproj_error: f64,
    pub inlier_mask: Vec<bool>,
}

impl PoseEstimate {
    pub fn inliers(&self) -> Vec<usize> {
        self.inlier_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn to_json(&self) -> ExtrinsicsJson {
        let m = self.transform.to_matrix4();
        ExtrinsicsJson {
            t: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            mean_reproj_px: self.mean_reproj_error,
            inliers: self.inliers(),
        }
    }
}

/// On-disk form of an extrinsic estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicsJson {
    #[serde(rename = "T")]
    pub t: [[f64; 4]; 4],
    pub mean_reproj_px: f64,
    pub inliers: Vec<usize>,
}

/// Reprojection error in pixels; infinite when the point is behind the camera.
pub fn reprojection_error(pose: &RigidTransform, c: &Correspondence, k: &Intrinsics) -> f64 {
    match k.project_camera(&pose.apply(&c.p3d)) {
        Ok(p) => p.distance(&c.q2d),
        Err(_) => f64::INFINITY,
    }
}

/// Residual `π(R p + t) − q` and its Jacobian with respect to a left
/// rotation increment `ω` (`R ← exp(ω) R`) followed by `δt`.
pub fn residual_jacobian(
    pose: &RigidTransform,
    c: &Correspondence,
    k: &Intrinsics,
) -> Result<(Vector2<f64>, Matrix2x6<f64>)> {
    let rp = pose.rotation * c.p3d;
    let x = rp + pose.translation;
    if !(x.z > 0.0) {
        return Err(Error::BehindCamera(x.z));
    }
    let iz = 1.0 / x.z;
    let r = Vector2::new(
        k.fx * x.x * iz + k.cx - c.q2d.u,
        k.fy * x.y * iz + k.cy - c.q2d.v,
    );
    let dpi = nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * x.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * x.y * iz * iz,
    );
    let mut j = Matrix2x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * -skew(&rp)));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dpi);
    Ok((r, j))
}

/// Sum of squared reprojection residuals; `None` if a point is behind the camera.
pub fn reprojection_cost(pose: &RigidTransform, corr: &[Correspondence], k: &Intrinsics) -> Option<f64> {
    let mut sum = 0.0;
    for c in corr {
        let x = pose.apply(&c.p3d);
        let p = k.project_camera(&x).ok()?;
        let (du, dv) = (p.u - c.q2d.u, p.v - c.q2d.v);
        sum += du * du + dv * dv;
    }
    Some(sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pose: RigidTransform,
    /// Objective after initialization and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Refinement {
    pub fn cost(&self) -> f64 {
        *self.cost_trace.last().unwrap()
    }
}

/// Levenberg–Marquardt on the squared reprojection error.
pub fn refine_pose(corr: &[Correspondence], k: &Intrinsics, init: &RigidTransform) -> Result<Refinement> {
    let mut pose = *init;
    let mut cost = reprojection_cost(&pose, corr, k).ok_or_else(|| {
        Error::DegenerateConfiguration("initial pose puts points behind the camera".into())
    })?;
    let mut trace = vec![cost];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_LM_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corr {
            let (r, j) = residual_jacobian(&pose, c, k)?;
            jtj += j.transpose() * j;
            g += j.transpose() * r;
        }
        if g.norm() < GRADIENT_TOL {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&-g);
            let omega = Vec3::new(delta[0], delta[1], delta[2]);
            let trial = RigidTransform {
                rotation: orthonormalize(&(exp_so3(&omega) * pose.rotation)),
                translation: pose.translation + Vec3::new(delta[3], delta[4], delta[5]),
            };
            match reprojection_cost(&trial, corr, k) {
                Some(c) if c < cost => {
                    let tiny = delta.norm() < 1e-15 * (1.0 + pose.translation.norm());
                    pose = trial;
                    cost = c;
                    trace.push(c);
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = !tiny;
                    converged |= tiny;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            // no decrease possible at any damping: a stationary point
            converged = true;
            break;
        }
    }
    Ok(Refinement {
        pose,
        cost_trace: trace,
        iterations,
        converged,
    })
}

/// Rigid transform `x = R p + t` best aligning `world` onto `camera`.
pub fn kabsch(world: &[Vec3], camera: &[Vec3]) -> Option<RigidTransform> {
    let n = world.len() as f64;
    let pw = world.iter().sum::<Vec3>() / n;
    let pc = camera.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (w, c) in world.iter().zip(camera) {
        h += (w - pw) * (c - pc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    if !r.iter().all(|x| x.is_finite()) {
        return None;
    }
    Some(RigidTransform {
        rotation: r,
        translation: pc - r * pw,
    })
}

/// All poses consistent with three points and their unit bearings.
///
/// Depths follow from the law of cosines on the three viewing-ray pairs.
/// The system is reduced to one unknown depth and its roots are bracketed on
/// a dense grid over every sign branch, then bisected.
pub fn p3p(world: &[Vec3; 3], bearings: &[Vec3; 3]) -> Vec<RigidTransform> {
    let f: Vec<Vec3> = bearings.iter().map(|b| b.normalize()).collect();
    let (c12, c13, c23) = (f[0].dot(&f[1]), f[0].dot(&f[2]), f[1].dot(&f[2]));
    let d12 = (world[0] - world[1]).norm_squared();
    let d13 = (world[0] - world[2]).norm_squared();
    let d23 = (world[1] - world[2]).norm_squared();
    let (k12, k13) = (1.0 - c12 * c12, 1.0 - c13 * c13);
    if !(k12 > 1e-14 && k13 > 1e-14 && d12 > 0.0 && d13 > 0.0 && d23 > 0.0) {
        return Vec::new();
    }
    let s_max = (d12 / k12).sqrt().min((d13 / k13).sqrt());
    let depths = |s1: f64, b2: f64, b3: f64| {
        let s2 = s1 * c12 + b2 * (d12 - s1 * s1 * k12).max(0.0).sqrt();
        let s3 = s1 * c13 + b3 * (d13 - s1 * s1 * k13).max(0.0).sqrt();
        (s2, s3)
    };
    let g = |s1: f64, b2: f64, b3: f64| {
        let (s2, s3) = depths(s1, b2, b3);
        s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * c23 - d23
    };
    let mut out: Vec<RigidTransform> = Vec::new();
    for (b2, b3) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let xs: Vec<f64> = (0..=P3P_SAMPLES).map(|i| s_max * i as f64 / P3P_SAMPLES as f64).collect();
        let mut prev = (xs[0], g(xs[0], b2, b3));
        for &x in &xs[1..] {
            let cur = (x, g(x, b2, b3));
            let root = if cur.1 == 0.0 {
                Some(cur.0)
            } else if prev.1 != 0.0 && prev.1.signum() != cur.1.signum() {
                Some(bisect(|s| g(s, b2, b3), prev.0, cur.0, prev.1))
            } else {
                None
            };
            prev = cur;
            let Some(s1) = root else { continue };
            let (s2, s3) = depths(s1, b2, b3);
            if !(s1 > 0.0 && s2 > 0.0 && s3 > 0.0) {
                continue;
            }
            let cam = [f[0] * s1, f[1] * s2, f[2] * s3];
            if let Some(t) = kabsch(world, &cam) {
                let dup = out.iter().any(|o| {
                    (o.rotation - t.rotation).norm() < 1e-9 && (o.translation - t.translation).norm() < 1e-9
                });
                if !dup {
                    out.push(t);
                }
            }
        }
    }
    out
}

fn bisect(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, g_lo: f64) -> f64 {
    let s_lo = g_lo.signum();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            return mid;
        }
        if gm.signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Similarity normalizing a point set to zero centroid and mean norm √dim.
fn normalizer<const D: usize>(pts: &[nalgebra::SVector<f64, D>]) -> Option<(nalgebra::SVector<f64, D>, f64)> {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<nalgebra::SVector<f64, D>>() / n;
    let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    (spread > 0.0).then(|| (mean, (D as f64).sqrt() / spread))
}

/// Smallest right singular vector; `None` if the null space is not one-dimensional.
fn null_vector(a: DMatrix<f64>) -> Option<Vec<f64>> {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        a.resize_vertically(cols, 0.0)
    } else {
        a
    };
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].partial_cmp(&svd.singular_values[j]).unwrap());
    let (s0, s1, smax) = (
        svd.singular_values[order[0]],
        svd.singular_values[order[1]],
        svd.singular_values[order[cols - 1]],
    );
    if !(s1 > 1e-10 * smax) || !s0.is_finite() {
        return None;
    }
    Some(v_t.row(order[0]).iter().copied().collect())
}

fn dlt(corr: &[Correspondence], k: &Intrinsics) -> Option<RigidTransform> {
    let world: Vec<Vec3> = corr.iter().map(|c| c.p3d).collect();
    let img: Vec<Vector2<f64>> = corr
        .iter()
        .map(|c| {
            let x = k.normalized(&c.q2d);
            Vector2::new(x.x, x.y)
        })
        .collect();
    let (wm, ws) = normalizer(&world)?;
    let (im, is) = normalizer(&img)?;
    let mut a = DMatrix::<f64>::zeros(2 * corr.len(), 12);
    for (i, (w, x)) in world.iter().zip(&img).enumerate() {
        let p = (w - wm) * ws;
        let u = (x - im) * is;
        let ph = [p.x, p.y, p.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = ph[j];
            a[(2 * i, 8 + j)] = -u.x * ph[j];
            a[(2 * i + 1, 4 + j)] = ph[j];
            a[(2 * i + 1, 8 + j)] = -u.y * ph[j];
        }
    }
    let v = null_vector(a)?;
    let pn = Matrix3x4::from_row_slice(&v);
    let t_img_inv = Matrix3::new(1.0 / is, 0.0, im.x, 0.0, 1.0 / is, im.y, 0.0, 0.0, 1.0);
    let mut t_world = nalgebra::Matrix4::<f64>::identity() * ws;
    t_world[(3, 3)] = 1.0;
    for r in 0..3 {
        t_world[(r, 3)] = -ws * wm[r];
    }
    let mut p = t_img_inv * pn * t_world;
    let m = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m = p.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = m.svd(true, true);
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) {
        return None;
    }
    let r = svd.u? * svd.v_t?;
    let t = p.column(3).into_owned() / scale;
    Some(RigidTransform {
        rotation: r,
        translation: t,
    })
}

/// Orthonormal frame `(origin, [e1 e2 n])` of a planar point set, or `None`
/// when the set is not planar.
fn plane_frame(world: &[Vec3]) -> Option<(Vec3, Matrix3<f64>)> {
    let n = world.len() as f64;
    let mean = world.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    for p in world {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let (l1, l3) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[2]].max(0.0));
    if !(l1 > 0.0) || (l3 / l1).sqrt() > PLANAR_RATIO {
        return None;
    }
    let e1: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    let e2: Vec3 = eig.eigenvectors.column(order[1]).into_owned();
    Some((mean, Matrix3::from_columns(&[e1, e2, e1.cross(&e2)])))
}

fn homography_poses(corr: &[Correspondence], k: &Intrinsics, origin: Vec3, basis: &Matrix3<f64>) -> Vec<RigidTransform> {
    let plane: Vec<Vector2<f64>> = corr
        .iter()
        .map(|c| {
            let l = basis.transpose() * (c.p3d - origin);
            Vector2::new(l.x, l.y)
        })
        .collect();
    let img: Vec<Vector2<f64>> = corr
        .iter()
        .map(|c| {
            let x = k.normalized(&c.q2d);
            Vector2::new(x.x, x.y)
        })
        .collect();
    let (Some((pm, ps)), Some((im, is))) = (normalizer(&plane), normalizer(&img)) else {
        return Vec::new();
    };
    let mut a = DMatrix::<f64>::zeros(2 * corr.len(), 9);
    for (i, (p, x)) in plane.iter().zip(&img).enumerate() {
        let p = (p - pm) * ps;
        let u = (x - im) * is;
        let ph = [p.x, p.y, 1.0];
        for j in 0..3 {
            a[(2 * i, j)] = ph[j];
            a[(2 * i, 6 + j)] = -u.x * ph[j];
            a[(2 * i + 1, 3 + j)] = ph[j];
            a[(2 * i + 1, 6 + j)] = -u.y * ph[j];
        }
    }
    let Some(v) = null_vector(a) else {
        return Vec::new();
    };
    let hn = Matrix3::from_row_slice(&v);
    let t_img_inv = Matrix3::new(1.0 / is, 0.0, im.x, 0.0, 1.0 / is, im.y, 0.0, 0.0, 1.0);
    let t_plane = Matrix3::new(ps, 0.0, -ps * pm.x, 0.0, ps, -ps * pm.y, 0.0, 0.0, 1.0);
    let h = t_img_inv * hn * t_plane;
    let scale = 0.5 * (h.column(0).norm() + h.column(1).norm());
    if !(scale > 0.0) {
        return Vec::new();
    }
    [1.0, -1.0]
        .iter()
        .filter_map(|&sign| {
            let hs = h * (sign / scale);
            let r1: Vec3 = hs.column(0).into_owned();
            let r2: Vec3 = hs.column(1).into_owned();
            let rp = orthonormalize(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
            let tp: Vec3 = hs.column(2).into_owned();
            let rotation = rp * basis.transpose();
            let pose = RigidTransform {
                rotation,
                translation: tp - rotation * origin,
            };
            corr.iter().all(|c| pose.apply(&c.p3d).z > 0.0).then_some(pose)
        })
        .collect()
}

fn p3p_candidates(corr: &[Correspondence], k: &Intrinsics, idx: [usize; 3]) -> Vec<RigidTransform> {
    let world = idx.map(|i| corr[i].p3d);
    let bearings = idx.map(|i| k.normalized(&corr[i].q2d));
    p3p(&world, &bearings)
}

fn mean_error(pose: &RigidTransform, corr: &[Correspondence], k: &Intrinsics) -> f64 {
    corr.iter().map(|c| reprojection_error(pose, c, k)).sum::<f64>() / corr.len() as f64
}

/// Reprojection-minimizing pose from at least four correspondences.
pub fn solve_pnp(corr: &[Correspondence], k: &Intrinsics) -> Result<PoseEstimate> {
    if corr.len() < 4 {
        return Err(Error::InsufficientPoints {
            needed: 4,
            got: corr.len(),
        });
    }
    if corr.iter().any(|c| !c.q2d.is_finite() || !c.p3d.iter().all(|x| x.is_finite())) {
        return Err(Error::DegenerateConfiguration("non-finite correspondence".into()));
    }
    let world: Vec<Vec3> = corr.iter().map(|c| c.p3d).collect();
    let mut candidates = Vec::new();
    if let Some((origin, basis)) = plane_frame(&world) {
        candidates.extend(homography_poses(corr, k, origin, &basis));
    } else if corr.len() >= 6 {
        candidates.extend(dlt(corr, k));
    }
    if candidates.is_empty() {
        let n = corr.len();
        candidates.extend(p3p_candidates(corr, k, [0, n / 3, 2 * n / 3]));
    }
    let best = candidates
        .iter()
        .filter_map(|init| refine_pose(corr, k, init).ok())
        .min_by(|a, b| a.cost().partial_cmp(&b.cost()).unwrap())
        .ok_or_else(|| Error::DegenerateConfiguration("no valid initial pose".into()))?;
    Ok(PoseEstimate {
        transform: best.pose,
        mean_reproj_error: mean_error(&best.pose, corr, k),
        inlier_mask: vec![true; corr.len()],
    })
}

/// Pose from a 4-point sample: P3P on the first three, the fourth selects.
fn minimal_pose(sample: &[Correspondence], k: &Intrinsics) -> Option<RigidTransform> {
    p3p_candidates(sample, k, [0, 1, 2])
        .into_iter()
        .map(|p| (reprojection_error(&p, &sample[3], k), p))
        .filter(|(e, _)| e.is_finite())
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|(_, p)| p)
}

struct PnpEstimator<'a> {
    k: &'a Intrinsics,
}

impl Estimator for PnpEstimator<'_> {
    type Datum = Correspondence;
    type Model = RigidTransform;

    fn sample_size(&self) -> usize {
        4
    }

    fn fit(&self, sample: &[Correspondence]) -> Option<RigidTransform> {
        minimal_pose(sample, self.k)
    }

    fn residual(&self, model: &RigidTransform, d: &Correspondence) -> f64 {
        reprojection_error(model, d, self.k)
    }
}

fn paired_error(pose: &RigidTransform, d: &AmbiguousCorrespondence, k: &Intrinsics) -> (usize, f64) {
    let e0 = reprojection_error(pose, &d.choose(0), k);
    let e1 = reprojection_error(pose, &d.choose(1), k);
    if e1 < e0 {
        (1, e1)
    } else {
        (0, e0)
    }
}

struct PairedEstimator<'a> {
    k: &'a Intrinsics,
    chooser: RefCell<ChaCha8Rng>,
}

impl Estimator for PairedEstimator<'_> {
    type Datum = AmbiguousCorrespondence;
    type Model = RigidTransform;

    fn sample_size(&self) -> usize {
        4
    }

    fn fit(&self, sample: &[AmbiguousCorrespondence]) -> Option<RigidTransform> {
        let mut rng = self.chooser.borrow_mut();
        let chosen: Vec<Correspondence> = sample
            .iter()
            .map(|d| d.choose(usize::from(rng.random_bool(0.5))))
            .collect();
        minimal_pose(&chosen, self.k)
    }

    fn residual(&self, model: &RigidTransform, d: &AmbiguousCorrespondence) -> f64 {
        paired_error(model, d, self.k).1
    }
}

fn pnp_config(cfg: &RansacConfig) -> RansacConfig {
    RansacConfig {
        min_sample: cfg.min_sample.max(4),
        ..*cfg
    }
}

struct Scored {
    mask: Vec<bool>,
    count: usize,
    mean: f64,
}

fn score_by(errors: impl Iterator<Item = f64>, threshold: f64) -> Scored {
    let mut mask = Vec::new();
    let (mut count, mut sum) = (0, 0.0);
    for e in errors {
        let inl = e <= threshold;
        mask.push(inl);
        if inl {
            count += 1;
            sum += e;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    Scored { mask, count, mean }
}

/// The refit minimizes squared error, so only the consensus size is
/// compared; a mean-absolute comparison would reject many sound refits.
fn keeps_consensus(refit: &Scored, sampled: &Scored) -> bool {
    refit.count >= sampled.count
}

/// Standard PnP-RANSAC with a Levenberg–Marquardt refit on the consensus set.
///
/// `cfg.inlier_threshold` is a reprojection error in pixels.
pub fn solve_pnp_ransac(corr: &[Correspondence], k: &Intrinsics, cfg: &RansacConfig) -> Result<PoseEstimate> {
    let cfg = pnp_config(cfg);
    let est = PnpEstimator { k };
    let cons = ransac(&est, corr, &cfg)?;
    let errs = |p: RigidTransform| corr.iter().map(move |c| reprojection_error(&p, c, k));
    let hyp = score_by(errs(cons.model), cfg.inlier_threshold);
    let inliers: Vec<Correspondence> = corr.iter().zip(&hyp.mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
    let (pose, s) = match refine_pose(&inliers, k, &cons.model) {
        Ok(r) => {
            let rs = score_by(errs(r.pose), cfg.inlier_threshold);
            if keeps_consensus(&rs, &hyp) {
                (r.pose, rs)
            } else {
                (cons.model, hyp)
            }
        }
        Err(_) => (cons.model, hyp),
    };
    Ok(PoseEstimate {
        transform: pose,
        mean_reproj_error: s.mean,
        inlier_mask: s.mask,
    })
}

/// Paired solver output with the per-point hypothesis choice.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedPoseEstimate {
    pub estimate: PoseEstimate,
    /// Index (0 or 1) of the hypothesis closer to the final reprojection.
    pub selection: Vec<usize>,
    /// Mean best-of-two inlier error of the best sampled hypothesis.
    pub best_hypothesis_error: f64,
}

/// PnP-RANSAC over correspondences with two candidate projections each.
///
/// Index samples are drawn exactly as in [`solve_pnp_ransac`]; the choice of
/// hypothesis per sampled point comes from a separate stream, so pairs with
/// identical hypotheses reproduce the standard solver bit for bit.
pub fn solve_pnp_paired(
    data: &[AmbiguousCorrespondence],
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    solve_pnp_paired_detailed(data, k, cfg).map(|p| p.estimate)
}

pub fn solve_pnp_paired_detailed(
    data: &[AmbiguousCorrespondence],
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PairedPoseEstimate> {
    let cfg = pnp_config(cfg);
    let est = PairedEstimator {
        k,
        chooser: RefCell::new(ChaCha8Rng::seed_from_u64(cfg.seed ^ CHOICE_STREAM)),
    };
    let cons = ransac(&est, data, &cfg)?;
    let errs = |p: RigidTransform| data.iter().map(move |d| paired_error(&p, d, k).1);
    let hyp = score_by(errs(cons.model), cfg.inlier_threshold);
    let best_hypothesis_error = hyp.mean;
    let chosen: Vec<Correspondence> = data
        .iter()
        .zip(&hyp.mask)
        .filter(|(_, &m)| m)
        .map(|(d, _)| d.choose(paired_error(&cons.model, d, k).0))
        .collect();
    let (pose, s) = match refine_pose(&chosen, k, &cons.model) {
        Ok(r) => {
            let rs = score_by(errs(r.pose), cfg.inlier_threshold);
            if keeps_consensus(&rs, &hyp) {
                (r.pose, rs)
            } else {
                (cons.model, hyp)
            }
        }
        Err(_) => (cons.model, hyp),
    };
    let selection = data.iter().map(|d| paired_error(&pose, d, k).0).collect();
    Ok(PairedPoseEstimate {
        estimate: PoseEstimate {
            transform: pose,
            mean_reproj_error: s.mean,
            inlier_mask: s.mask,
        },
        selection,
        best_hypothesis_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{rotation_error, translation_error};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn cam() -> Intrinsics {
        Intrinsics::new(600.0, 600.0, 640.0, 480.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
        let w = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidTransform::from_axis_angle(
            &(w * rng.random_range(0.0..2.5) / w.norm()),
            Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        )
    }

    /// Points spread in front of the camera, expressed in the pose's source frame.
    fn scene(rng: &mut ChaCha8Rng, pose: &RigidTransform, n: usize, planar: bool, k: &Intrinsics) -> Vec<Correspondence> {
        let inv = pose.inverse();
        (0..n)
            .map(|_| {
                let x = if planar {
                    // a tilted plane in the camera frame
                    let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    Vec3::new(a, b, 4.0 + 0.3 * a - 0.2 * b)
                } else {
                    Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(3.0..7.0))
                };
                Correspondence::new(inv.apply(&x), k.project_camera(&x).unwrap())
            })
            .collect()
    }

    fn add_noise(rng: &mut ChaCha8Rng, corr: &mut [Correspondence], sigma: f64) {
        let n = Normal::new(0.0, sigma).unwrap();
        for c in corr {
            c.q2d.u += n.sample(rng);
            c.q2d.v += n.sample(rng);
        }
    }

    #[test]
    fn exact_recovery_general_and_planar() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for planar in [false, true] {
            for n in [4, 5, 6, 20] {
                for _ in 0..10 {
                    let gt = random_pose(&mut rng);
                    let corr = scene(&mut rng, &gt, n, planar, &k);
                    let est = solve_pnp(&corr, &k).unwrap();
                    let rerr = rotation_error(&est.transform.rotation, &gt.rotation);
                    let terr = translation_error(&est.transform.translation, &gt.translation);
                    assert!(rerr < 1e-8 && terr < 1e-8, "planar={planar} n={n}: {rerr:e} {terr:e}");
                    // gauge: est⁻¹ ∘ gt is the identity
                    let g = est.transform.inverse().compose(&gt);
                    assert!((g.rotation - Matrix3::identity()).norm() < 1e-8 && g.translation.norm() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn identity_pose() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let corr = scene(&mut rng, &RigidTransform::identity(), 20, false, &k);
        let est = solve_pnp(&corr, &k).unwrap();
        assert!(rotation_error(&est.transform.rotation, &Matrix3::identity()) < 1e-8);
        assert!(est.transform.translation.norm() < 1e-8);
        assert!(est.mean_reproj_error < 1e-8);
    }

    #[test]
    fn noisy_solution_is_locally_optimal() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let gt = random_pose(&mut rng);
            let mut corr = scene(&mut rng, &gt, 20, false, &k);
            add_noise(&mut rng, &mut corr, 1.0);
            let est = solve_pnp(&corr, &k).unwrap();
            let at_est = reprojection_cost(&est.transform, &corr, &k).unwrap();
            let at_gt = reprojection_cost(&gt, &corr, &k).unwrap();
            assert!(at_est <= at_gt + 1e-9);
            // central-difference gradient vanishes at the solution
            let h = 1e-6;
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                let step = |s: f64| {
                    let w = Vec3::new(d[0], d[1], d[2]) * s;
                    let p = RigidTransform {
                        rotation: exp_so3(&w) * est.transform.rotation,
                        translation: est.transform.translation + Vec3::new(d[3], d[4], d[5]) * s,
                    };
                    reprojection_cost(&p, &corr, &k).unwrap()
                };
                let g = (step(1.0) - step(-1.0)) / (2.0 * h);
                assert!(g.abs() < 1e-3 * (1.0 + at_est), "component {i}: {g}");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for _ in 0..100 {
            let gt = random_pose(&mut rng);
            let c = scene(&mut rng, &gt, 1, false, &k)[0];
            let pose = RigidTransform::from_axis_angle(
                &Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
                Vec3::zeros(),
            )
            .compose(&gt);
            let (_, j) = residual_jacobian(&pose, &c, &k).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                let perturb = |s: f64| {
                    let mut d = [0.0; 6];
                    d[i] = s * h;
                    let p = RigidTransform {
                        rotation: exp_so3(&Vec3::new(d[0], d[1], d[2])) * pose.rotation,
                        translation: pose.translation + Vec3::new(d[3], d[4], d[5]),
                    };
                    residual_jacobian(&p, &c, &k).unwrap().0
                };
                let fd = (perturb(1.0) - perturb(-1.0)) / (2.0 * h);
                let col = j.column(i);
                assert!((fd - col).norm() <= 1e-5 * col.norm().max(1.0), "col {i}: {fd} vs {col}");
            }
        }
    }

    #[test]
    fn refinement_is_monotone() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..20 {
            let gt = random_pose(&mut rng);
            let mut corr = scene(&mut rng, &gt, 15, false, &k);
            add_noise(&mut rng, &mut corr, 2.0);
            let init = RigidTransform::from_axis_angle(&Vec3::new(0.05, -0.04, 0.03), Vec3::new(0.05, 0.0, -0.05)).compose(&gt);
            let r = refine_pose(&corr, &k, &init).unwrap();
            assert!(r.cost_trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(r.cost() < r.cost_trace[0]);
        }
    }

    #[test]
    fn p3p_contains_truth() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let mut hits = 0;
        for _ in 0..200 {
            let gt = random_pose(&mut rng);
            let corr = scene(&mut rng, &gt, 3, false, &k);
            let sols = p3p_candidates(&corr, &k, [0, 1, 2]);
            assert!(sols.len() <= 4);
            if sols
                .iter()
                .any(|s| rotation_error(&s.rotation, &gt.rotation) < 1e-7 && translation_error(&s.translation, &gt.translation) < 1e-7)
            {
                hits += 1;
            }
        }
        assert!(hits >= 198, "{hits}");
    }

    #[test]
    fn too_few_points() {
        let k = cam();
        let c = Correspondence::new(Vec3::new(0.0, 0.0, 5.0), Pixel::new(640.0, 480.0));
        assert_eq!(solve_pnp(&[c; 3], &k), Err(Error::InsufficientPoints { needed: 4, got: 3 }));
        assert!(solve_pnp(&[c; 6], &k).is_err());
    }

    fn pnp_cfg(seed: u64) -> RansacConfig {
        RansacConfig {
            max_iterations: 200,
            inlier_threshold: 3.0,
            min_sample: 4,
            seed,
        }
    }

    #[test]
    fn ransac_without_outliers_matches_direct() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let gt = random_pose(&mut rng);
        let corr = scene(&mut rng, &gt, 20, false, &k);
        let direct = solve_pnp(&corr, &k).unwrap();
        let robust = solve_pnp_ransac(&corr, &k, &pnp_cfg(1)).unwrap();
        assert!(robust.inlier_mask.iter().all(|&m| m));
        assert!(rotation_error(&robust.transform.rotation, &direct.transform.rotation) < 1e-9);
        assert!(translation_error(&robust.transform.translation, &direct.transform.translation) < 1e-9);
    }

    #[test]
    fn ransac_rejects_outliers_and_is_deterministic() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let mut clean = 0;
        for trial in 0..100 {
            let gt = random_pose(&mut rng);
            let mut corr = scene(&mut rng, &gt, 20, false, &k);
            add_noise(&mut rng, &mut corr, 0.5);
            for c in corr.iter_mut().take(5) {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                c.q2d.u += 50.0 * a.cos();
                c.q2d.v += 50.0 * a.sin();
            }
            let est = solve_pnp_ransac(&corr, &k, &pnp_cfg(trial)).unwrap();
            if est.inlier_mask[..5].iter().all(|&m| !m) {
                clean += 1;
            }
            for (c, &m) in corr.iter().zip(&est.inlier_mask) {
                assert_eq!(m, reprojection_error(&est.transform, c, &k) <= 3.0);
            }
            if trial < 5 {
                assert_eq!(est, solve_pnp_ransac(&corr, &k, &pnp_cfg(trial)).unwrap());
            }
        }
        assert!(clean >= 99, "{clean}");
    }

    #[test]
    fn paired_recovers_pose_and_selection() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        for trial in 0..10 {
            let gt = random_pose(&mut rng);
            let corr = scene(&mut rng, &gt, 20, false, &k);
            let amb: Vec<AmbiguousCorrespondence> = corr
                .iter()
                .map(|c| {
                    // tangential offset around the principal point
                    let (du, dv) = (c.q2d.u - k.cx, c.q2d.v - k.cy);
                    let n = du.hypot(dv).max(1e-9);
                    let off = Pixel::new(c.q2d.u - 20.0 * dv / n, c.q2d.v + 20.0 * du / n);
                    if rng.random_bool(0.5) {
                        AmbiguousCorrespondence::new(c.p3d, c.q2d, off)
                    } else {
                        AmbiguousCorrespondence::new(c.p3d, off, c.q2d)
                    }
                })
                .collect();
            let res = solve_pnp_paired_detailed(&amb, &k, &pnp_cfg(trial)).unwrap();
            let t = &res.estimate.transform;
            assert!(rotation_error(&t.rotation, &gt.rotation) < 1e-6);
            assert!(translation_error(&t.translation, &gt.translation) < 1e-6);
            let right = amb
                .iter()
                .zip(&corr)
                .zip(&res.selection)
                .filter(|((a, c), &s)| a.hypotheses[s] == c.q2d)
                .count();
            assert!(right >= 19);
            assert!(res.estimate.mean_reproj_error <= res.best_hypothesis_error + 1e-12);
        }
    }

    #[test]
    fn paired_with_degenerate_pairs_is_standard_ransac() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for trial in 0..5 {
            let gt = random_pose(&mut rng);
            let mut corr = scene(&mut rng, &gt, 20, false, &k);
            add_noise(&mut rng, &mut corr, 1.0);
            corr[0].q2d.u += 80.0;
            let amb: Vec<_> = corr.iter().map(AmbiguousCorrespondence::unambiguous).collect();
            let cfg = pnp_cfg(trial);
            assert_eq!(solve_pnp_paired(&amb, &k, &cfg).unwrap(), solve_pnp_ransac(&corr, &k, &cfg).unwrap());
        }
    }

    #[test]
    fn extrinsics_json_shape() {
        let est = PoseEstimate {
            transform: RigidTransform::identity(),
            mean_reproj_error: 0.5,
            inlier_mask: vec![true, false, true],
        };
        let v = serde_json::to_value(est.to_json()).unwrap();
        assert_eq!(v["inliers"], serde_json::json!([0, 2]));
        assert_eq!(v["T"][3][3], 1.0);
        assert_eq!(v["mean_reproj_px"], 0.5);
    }
}
