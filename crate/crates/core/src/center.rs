//! Projected circle centers from a single image ellipse.
//!
//! Every chord through the true projection of the center subtends a triangle
//! whose apex distance (camera to 3D center) is the same for all chords. The
//! loss is the dispersion of those distances over a fan of chord directions.
//! It has two local minima inside the ellipse; a second coplanar circle of
//! known radius ratio tells them apart after metric rectification.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipse::{conic_to_params, CenteredConic, Conic};
use crate::error::{Error, Result};
use crate::geom::{plane_basis, Circle3D, Intrinsics, Pixel, Vec3};

const DENOM_EPS: f64 = 1e-12;

/// How chord distances are turned into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Raw variance of the distances for a circle of this radius (meters).
    KnownRadius(f64),
    /// Variance divided by the squared mean, radius-free.
    Relative,
}

impl LossMode {
    fn radius(&self) -> f64 {
        match self {
            LossMode::KnownRadius(r) => *r,
            LossMode::Relative => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub n_dirs: usize,
    pub mode: LossMode,
    /// Suppression radius in pixels; `None` uses `max(3, 0.1 · minor axis)`.
    pub nms_radius: Option<f64>,
    pub subpixel: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_dirs: 36,
            mode: LossMode::Relative,
            nms_radius: None,
            subpixel: false,
        }
    }
}

impl SearchConfig {
    pub fn with_radius(radius: f64) -> Self {
        Self {
            mode: LossMode::KnownRadius(radius),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dirs < 2 {
            return Err(Error::InvalidConfig(format!("n_dirs must be >= 2, got {}", self.n_dirs)));
        }
        if let LossMode::KnownRadius(r) = self.mode {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!("radius must be positive, got {r}")));
            }
        }
        if let Some(rho) = self.nms_radius {
            if !(rho >= 0.0) {
                return Err(Error::InvalidConfig(format!("nms radius must be >= 0, got {rho}")));
            }
        }
        Ok(())
    }
}

struct Direction {
    /// `dᵀ Q d`
    a: f64,
    /// `Q d`
    qd: Vec3,
    /// `K⁻¹ d`
    kd: Vec3,
}

/// Chord distances for a fixed conic, camera and fan of directions.
struct ChordFan {
    q: Matrix3<f64>,
    kinv: Matrix3<f64>,
    dirs: Vec<Direction>,
    radius: f64,
}

impl ChordFan {
    fn new(conic: &Conic, k: &Intrinsics, angles: impl Iterator<Item = f64>, radius: f64) -> Self {
        let q = *conic.matrix();
        let kinv = k.inverse_matrix();
        let dirs = angles
            .map(|g| {
                let d = Vec3::new(g.cos(), g.sin(), 0.0);
                let qd = q * d;
                Direction {
                    a: d.dot(&qd),
                    qd,
                    kd: kinv * d,
                }
            })
            .collect();
        Self { q, kinv, dirs, radius }
    }

    fn uniform(conic: &Conic, k: &Intrinsics, n_dirs: usize, radius: f64) -> Self {
        let step = std::f64::consts::PI / n_dirs as f64;
        Self::new(conic, k, (0..n_dirs).map(|i| i as f64 * step), radius)
    }

    fn distances(&self, p: &Pixel, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        let ph = p.homogeneous();
        let qp = self.q * ph;
        let c = ph.dot(&qp);
        if !(c < 0.0) {
            return Err(Error::NoTwoIntersections);
        }
        let rc = self.kinv * ph;
        for dir in &self.dirs {
            let b = dir.qd.dot(&ph);
            let disc = b * b - dir.a * c;
            if !(dir.a > 0.0) || !(disc > 0.0) {
                return Err(Error::NoTwoIntersections);
            }
            let root = disc.sqrt();
            let qq = -(b + b.signum() * root);
            let (t1, t2) = (qq / dir.a, c / qq);
            out.push(self.apex_distance(&(rc + t1 * dir.kd), &(rc + t2 * dir.kd), &rc)?);
        }
        Ok(())
    }

    fn apex_distance(&self, ra: &Vec3, rb: &Vec3, rc: &Vec3) -> Result<f64> {
        let (s1, c1) = sin_cos_between(ra, rc);
        let (s2, c2) = sin_cos_between(rb, rc);
        let s12 = s1 * c2 + c1 * s2;
        // 3 − 2cos2θ₁ − 2cos2θ₂ + cos2(θ₁+θ₂), expanded to avoid cancellation
        let denom = (4.0 * s1 * s1 + 4.0 * s2 * s2 - 2.0 * s12 * s12).max(0.0).sqrt();
        if denom < DENOM_EPS {
            return Err(Error::DegenerateChord(denom));
        }
        Ok(std::f64::consts::SQRT_2 * self.radius * s12 / denom)
    }
}

fn sin_cos_between(a: &Vec3, b: &Vec3) -> (f64, f64) {
    let n = a.norm() * b.norm();
    (a.cross(b).norm() / n, a.dot(b) / n)
}

/// Camera-to-center distance implied by the chord through `candidate` at
/// angle `gamma`, for a circle of radius `radius`.
pub fn chord_distance(
    conic: &Conic,
    candidate: &Pixel,
    gamma: f64,
    radius: f64,
    k: &Intrinsics,
) -> Result<f64> {
    let fan = ChordFan::new(conic, k, std::iter::once(gamma), radius);
    let mut out = Vec::with_capacity(1);
    fan.distances(candidate, &mut out)?;
    Ok(out[0])
}

fn mean_var(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

fn loss_of(mode: &LossMode, d: &[f64]) -> (f64, f64) {
    let (mu, var) = mean_var(d);
    match mode {
        LossMode::KnownRadius(_) => (var, mu),
        LossMode::Relative => (var / (mu * mu), mu),
    }
}

/// Population variance of the chord distances over `n_dirs` directions
/// `γᵢ = iπ/n_dirs` (relative to `μ²` in [`LossMode::Relative`]).
pub fn chord_loss(
    conic: &Conic,
    candidate: &Pixel,
    mode: LossMode,
    k: &Intrinsics,
    n_dirs: usize,
) -> Result<f64> {
    let fan = ChordFan::uniform(conic, k, n_dirs, mode.radius());
    let mut d = Vec::with_capacity(n_dirs);
    fan.distances(candidate, &mut d)?;
    Ok(loss_of(&mode, &d).0)
}

/// Loss sampled on a regular grid; cells outside the ellipse hold `NaN`.
#[derive(Debug, Clone)]
pub struct ChordLossField {
    pub origin: Pixel,
    pub step: f64,
    pub width: usize,
    pub height: usize,
    pub n_dirs: usize,
    values: Vec<f64>,
    distances: Vec<f64>,
}

impl ChordLossField {
    pub fn get(&self, ix: usize, iy: usize) -> Option<f64> {
        let v = self.values[iy * self.width + ix];
        v.is_finite().then_some(v)
    }

    pub fn position(&self, ix: usize, iy: usize) -> Pixel {
        Pixel::new(
            self.origin.u + ix as f64 * self.step,
            self.origin.v + iy as f64 * self.step,
        )
    }

    /// `(position, loss)` for every cell inside the ellipse.
    pub fn cells(&self) -> impl Iterator<Item = (Pixel, f64)> + '_ {
        (0..self.height).flat_map(move |iy| {
            (0..self.width).filter_map(move |ix| self.get(ix, iy).map(|v| (self.position(ix, iy), v)))
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "u,v,loss")?;
        for (p, v) in self.cells() {
            writeln!(w, "{},{},{:e}", p.u, p.v, v)?;
        }
        Ok(())
    }

    fn local_minima(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for iy in 1..self.height.saturating_sub(1) {
            for ix in 1..self.width.saturating_sub(1) {
                let Some(v) = self.get(ix, iy) else { continue };
                let mut is_min = true;
                'nb: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = ((ix as i64 + dx) as usize, (iy as i64 + dy) as usize);
                        let Some(n) = self.get(nx, ny) else {
                            is_min = false;
                            break 'nb;
                        };
                        // plateaus resolve to their first cell in raster order
                        let earlier = dy < 0 || (dy == 0 && dx < 0);
                        if n < v || (earlier && n == v) {
                            is_min = false;
                            break 'nb;
                        }
                    }
                }
                if is_min {
                    out.push((ix, iy));
                }
            }
        }
        out
    }
}

/// A local minimum of the chord loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterHypothesis {
    pub center: Pixel,
    pub loss: f64,
    /// Mean chord distance at the minimum, in meters for a known radius
    /// and in units of the radius otherwise.
    pub distance: f64,
}

/// The lowest minimum and, unless the view is degenerate, the runner-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterHypothesisPair {
    pub primary: CenterHypothesis,
    pub secondary: Option<CenterHypothesis>,
}

impl CenterHypothesisPair {
    pub fn single(h: CenterHypothesis) -> Self {
        Self {
            primary: h,
            secondary: None,
        }
    }

    pub fn hypotheses(&self) -> Vec<CenterHypothesis> {
        std::iter::once(self.primary).chain(self.secondary).collect()
    }

    pub fn is_single(&self) -> bool {
        self.secondary.is_none()
    }
}

/// Evaluates the loss on a 1-px grid aligned with the ellipse center.
pub fn chord_loss_field(conic: &Conic, k: &Intrinsics, cfg: &SearchConfig) -> Result<ChordLossField> {
    cfg.validate()?;
    let p = conic_to_params(conic)?;
    let interior = CenteredConic::new(conic)?;
    let (s, c) = p.theta.sin_cos();
    let half_u = (p.a * p.a * c * c + p.b * p.b * s * s).sqrt().ceil() as usize;
    let half_v = (p.a * p.a * s * s + p.b * p.b * c * c).sqrt().ceil() as usize;
    let (width, height) = (2 * half_u + 1, 2 * half_v + 1);
    let origin = Pixel::new(p.center_u - half_u as f64, p.center_v - half_v as f64);
    let fan = ChordFan::uniform(conic, k, cfg.n_dirs, cfg.mode.radius());
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..height)
        .into_par_iter()
        .map(|iy| {
            let mut d = Vec::with_capacity(cfg.n_dirs);
            let mut vals = vec![f64::NAN; width];
            let mut dist = vec![f64::NAN; width];
            for ix in 0..width {
                let px = Pixel::new(origin.u + ix as f64, origin.v + iy as f64);
                if !(interior.eval(&px) < 0.0) || fan.distances(&px, &mut d).is_err() {
                    continue;
                }
                let (l, mu) = loss_of(&cfg.mode, &d);
                vals[ix] = l;
                dist[ix] = mu;
            }
            (vals, dist)
        })
        .collect();
    let (values, distances): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(ChordLossField {
        origin,
        step: 1.0,
        width,
        height,
        n_dirs: cfg.n_dirs,
        values: values.concat(),
        distances: distances.concat(),
    })
}

/// Grid search plus non-maximum suppression for the two lowest minima.
pub fn find_center_hypotheses(
    conic: &Conic,
    k: &Intrinsics,
    cfg: &SearchConfig,
) -> Result<CenterHypothesisPair> {
    let field = chord_loss_field(conic, k, cfg)?;
    hypotheses_from_field(&field, conic, k, cfg)
}

pub fn hypotheses_from_field(
    field: &ChordLossField,
    conic: &Conic,
    k: &Intrinsics,
    cfg: &SearchConfig,
) -> Result<CenterHypothesisPair> {
    let params = conic_to_params(conic)?;
    let rho = cfg.nms_radius.unwrap_or_else(|| (0.1 * params.b).max(3.0));
    let mut minima = field.local_minima();
    if minima.is_empty() {
        // fall back to the global minimum when it touches the border
        let best = (0..field.height)
            .flat_map(|iy| (0..field.width).map(move |ix| (ix, iy)))
            .filter(|&(ix, iy)| field.get(ix, iy).is_some())
            .min_by(|a, b| field.get(a.0, a.1).partial_cmp(&field.get(b.0, b.1)).unwrap())
            .ok_or(Error::EmptyInterior)?;
        minima.push(best);
    }
    minima.sort_by(|a, b| field.get(a.0, a.1).partial_cmp(&field.get(b.0, b.1)).unwrap());
    let mut kept: Vec<(usize, usize)> = Vec::with_capacity(2);
    for m in minima {
        let pm = field.position(m.0, m.1);
        if kept.iter().all(|k| field.position(k.0, k.1).distance(&pm) > rho) {
            kept.push(m);
            if kept.len() == 2 {
                break;
            }
        }
    }
    let fan = ChordFan::uniform(conic, k, cfg.n_dirs, cfg.mode.radius());
    let to_hyp = |(ix, iy): (usize, usize)| -> CenterHypothesis {
        let idx = iy * field.width + ix;
        let grid = CenterHypothesis {
            center: field.position(ix, iy),
            loss: field.values[idx],
            distance: field.distances[idx],
        };
        if cfg.subpixel {
            subpixel(field, ix, iy, &fan, &cfg.mode).unwrap_or(grid)
        } else {
            grid
        }
    };
    let mut hyps: Vec<CenterHypothesis> = kept.into_iter().map(to_hyp).collect();
    hyps.sort_by(|a, b| a.loss.partial_cmp(&b.loss).unwrap());
    Ok(CenterHypothesisPair {
        primary: hyps[0],
        secondary: hyps.get(1).copied(),
    })
}

fn subpixel(
    field: &ChordLossField,
    ix: usize,
    iy: usize,
    fan: &ChordFan,
    mode: &LossMode,
) -> Option<CenterHypothesis> {
    let c = field.get(ix, iy)?;
    let offset = |l: f64, r: f64| {
        let curv = l - 2.0 * c + r;
        if curv > 0.0 {
            (0.5 * (l - r) / curv).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let du = offset(field.get(ix - 1, iy)?, field.get(ix + 1, iy)?);
    let dv = offset(field.get(ix, iy - 1)?, field.get(ix, iy + 1)?);
    let base = field.position(ix, iy);
    let center = Pixel::new(base.u + du * field.step, base.v + dv * field.step);
    let mut d = Vec::with_capacity(field.n_dirs);
    fan.distances(&center, &mut d).ok()?;
    let (loss, distance) = loss_of(mode, &d);
    Some(CenterHypothesis { center, loss, distance })
}

/// Homography taking the image plane to a similarity of the circle's plane,
/// assuming `candidate` is the projected circle center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectifyingHomography {
    pub h: Matrix3<f64>,
    pub candidate: Pixel,
}

impl RectifyingHomography {
    pub fn map(&self, p: &Pixel) -> Option<Pixel> {
        Pixel::from_homogeneous(&(self.h * p.homogeneous()))
    }

    pub fn rectify(&self, conic: &Conic) -> Result<Conic> {
        conic.transformed(&self.h)
    }
}

pub fn build_rectifying_homography(conic: &Conic, candidate: &Pixel) -> Result<RectifyingHomography> {
    if !conic.contains(candidate) {
        return Err(Error::InvalidCandidate);
    }
    let p = conic_to_params(conic)?;
    let (s, c) = p.theta.sin_cos();
    // T = A1·A2: move the ellipse center to the origin, then align the axes
    let a1 = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
    let a2 = Matrix3::new(1.0, 0.0, -p.center_u, 0.0, 1.0, -p.center_v, 0.0, 0.0, 1.0);
    let t = a1 * a2;
    let ti = t.try_inverse().ok_or(Error::InvalidCandidate)?;
    let qt = ti.transpose() * conic.matrix() * ti;
    let qt = qt / -qt[(2, 2)];
    let (q11, q22, q33) = (qt[(0, 0)], qt[(1, 1)], -1.0);
    let cp: Vector3<f64> = t * candidate.homogeneous();
    let (cx, cy) = (cp.x / cp.z, cp.y / cp.z);

    let hp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, q11 * cx, q22 * cy, q33);
    let den = q11 * cx * cx + q33;
    let sum = q11 * cx * cx + q22 * cy * cy + q33;
    let a = -q22 * cx * cy / den;
    let b2 = q22 * q33 * sum / (q11 * den * den);
    if !(b2 > 0.0) || !b2.is_finite() {
        return Err(Error::InvalidCandidate);
    }
    let b = b2.sqrt();
    let x = (-cx / b + cy * a / b) / sum;
    let y = -cy / sum;
    let ha = Matrix3::new(1.0 / b, -a / b, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    let he = Matrix3::new(1.0, 0.0, x, 0.0, 1.0, y, 0.0, 0.0, 1.0);
    let h = he * ha * hp * t;
    if !(h.determinant().abs() > 0.0) || !h.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidCandidate);
    }
    Ok(RectifyingHomography {
        h,
        candidate: *candidate,
    })
}

/// Equivalent radius `√(a·b)` of a rectified conic.
fn rectified_radius(conic: &Conic) -> Result<f64> {
    let p = conic_to_params(conic)?;
    Ok((p.a * p.b).sqrt())
}

/// Ratio of rectified radii (primary over secondary) when `candidate` is
/// taken as the primary's projected center.
pub fn rectified_ratio(primary: &Conic, secondary: &Conic, candidate: &Pixel) -> Result<f64> {
    let h = build_rectifying_homography(primary, candidate)?;
    let r1 = rectified_radius(&h.rectify(primary)?)?;
    let r2 = rectified_radius(&h.rectify(secondary)?)?;
    Ok(r1 / r2)
}

/// Picks the hypothesis whose rectification best preserves the known
/// physical radius ratio `primary / secondary`.
pub fn disambiguate_by_ratio(
    pair: &CenterHypothesisPair,
    primary: &Conic,
    secondary: &Conic,
    physical_ratio: f64,
) -> Result<Pixel> {
    if !(physical_ratio > 0.0) {
        return Err(Error::InvalidConfig(format!("radius ratio must be positive, got {physical_ratio}")));
    }
    if pair.is_single() {
        return Ok(pair.primary.center);
    }
    pair.hypotheses()
        .iter()
        .filter_map(|h| {
            rectified_ratio(primary, secondary, &h.center)
                .ok()
                .filter(|r| r.is_finite())
                .map(|r| (h.center, (r - physical_ratio).abs()))
        })
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(c, _)| c)
        .ok_or(Error::DisambiguationFailed)
}

/// Exact image conic of a circle given in the camera frame, together with
/// the projection of its center.
pub fn project_circle(circle: &Circle3D, k: &Intrinsics) -> Result<(Conic, Pixel)> {
    let (e1, e2) = plane_basis(&circle.normal);
    let g = k.matrix() * Matrix3::from_columns(&[e1, e2, circle.center]);
    let gi = g
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("circle plane passes through the camera".into()))?;
    let r2 = circle.radius * circle.radius;
    let c = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -r2));
    let conic = Conic::ellipse(gi.transpose() * c * gi)?;
    let center = k.project_camera(&circle.center)?;
    Ok((conic, center))
}
