//! Image conics: fitting, geometric parameters, chords and region moments.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pixel, Vec3};

/// Symmetric conic `pᵀ Q p = 0` for `p = [u, v, 1]ᵀ`.
///
/// Stored with `‖Q‖_F = 1` and the upper-left 2×2 block of positive trace,
/// so for a real ellipse the interior evaluates negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conic {
    q: Matrix3<f64>,
}

impl Conic {
    /// Symmetrizes and normalizes `q`.
    pub fn new(q: Matrix3<f64>) -> Result<Self> {
        let q = 0.5 * (q + q.transpose());
        let norm = q.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NotAnEllipse("zero or non-finite conic matrix".into()));
        }
        let sign = if q[(0, 0)] + q[(1, 1)] < 0.0 { -1.0 } else { 1.0 };
        Ok(Self { q: q * (sign / norm) })
    }

    /// Like [`Conic::new`] but also requires a real, non-degenerate ellipse.
    pub fn ellipse(q: Matrix3<f64>) -> Result<Self> {
        let c = Self::new(q)?;
        c.check_ellipse()?;
        Ok(c)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.q
    }

    pub fn eval(&self, p: &Pixel) -> f64 {
        let h = p.homogeneous();
        h.dot(&(self.q * h))
    }

    pub fn contains(&self, p: &Pixel) -> bool {
        self.eval(p) < 0.0
    }

    fn block(&self) -> Matrix2<f64> {
        self.q.fixed_view::<2, 2>(0, 0).into_owned()
    }

    pub fn check_ellipse(&self) -> Result<()> {
        let det2 = self.block().determinant();
        if !(det2 > 0.0) {
            return Err(Error::NotAnEllipse(format!("quadratic part not definite (det {det2:e})")));
        }
        // value at the center, negative for a real ellipse
        let f0 = self.q.determinant() / det2;
        if !(f0 < 0.0) {
            return Err(Error::NotAnEllipse(format!("imaginary or degenerate ellipse (f0 = {f0:e})")));
        }
        Ok(())
    }

    /// Geometric center `-A⁻¹ b`.
    pub fn center(&self) -> Result<Pixel> {
        let b = Vector2::new(self.q[(0, 2)], self.q[(1, 2)]);
        let c = self
            .block()
            .try_inverse()
            .ok_or_else(|| Error::NotAnEllipse("singular quadratic part".into()))?
            * -b;
        Ok(Pixel::new(c.x, c.y))
    }

    /// The conic seen through the point map `x' = H x`: `H⁻ᵀ Q H⁻¹`.
    pub fn transformed(&self, h: &Matrix3<f64>) -> Result<Conic> {
        let hi = h
            .try_inverse()
            .ok_or_else(|| Error::DegenerateConfiguration("singular homography".into()))?;
        Conic::new(hi.transpose() * self.q * hi)
    }
}

/// Center, semi-axes `a ≥ b > 0` and major-axis orientation in `[0, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    #[serde(rename = "cx")]
    pub center_u: f64,
    #[serde(rename = "cy")]
    pub center_v: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl EllipseParams {
    /// Reorders the axes if needed so that `a ≥ b` and wraps `theta`.
    pub fn new(center: Pixel, a: f64, b: f64, theta: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() && theta.is_finite()) {
            return Err(Error::NotAnEllipse(format!("invalid axes a={a}, b={b}")));
        }
        let (a, b, theta) = if a >= b {
            (a, b, theta)
        } else {
            (b, a, theta + std::f64::consts::FRAC_PI_2)
        };
        Ok(Self {
            center_u: center.u,
            center_v: center.v,
            a,
            b,
            theta: wrap_pi(theta),
        })
    }

    pub fn center(&self) -> Pixel {
        Pixel::new(self.center_u, self.center_v)
    }

    /// Point at eccentric angle `t`.
    pub fn point_at(&self, t: f64) -> Pixel {
        let (s, c) = self.theta.sin_cos();
        let (x, y) = (self.a * t.cos(), self.b * t.sin());
        Pixel::new(self.center_u + c * x - s * y, self.center_v + s * x + c * y)
    }
}

fn wrap_pi(theta: f64) -> f64 {
    let t = theta.rem_euclid(std::f64::consts::PI);
    if t >= std::f64::consts::PI {
        0.0
    } else {
        t
    }
}

pub fn conic_to_params(c: &Conic) -> Result<EllipseParams> {
    c.check_ellipse()?;
    let center = c.center()?;
    let q = c.matrix();
    let f0 = q[(2, 2)] + q[(0, 2)] * center.u + q[(1, 2)] * center.v;
    let m = c.block() / -f0;
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let rad = half_diff.hypot(m[(0, 1)]);
    let (lo, hi) = (mean - rad, mean + rad);
    // direction of the larger eigenvalue is the minor axis
    let theta = if rad == 0.0 {
        0.0
    } else {
        0.5 * (2.0 * m[(0, 1)]).atan2(m[(0, 0)] - m[(1, 1)]) + std::f64::consts::FRAC_PI_2
    };
    EllipseParams::new(center, 1.0 / lo.sqrt(), 1.0 / hi.sqrt(), theta)
}

pub fn params_to_conic(p: &EllipseParams) -> Result<Conic> {
    let (s, c) = p.theta.sin_cos();
    let r = Matrix2::new(c, -s, s, c);
    let m = r * Matrix2::new(1.0 / (p.a * p.a), 0.0, 0.0, 1.0 / (p.b * p.b)) * r.transpose();
    let e = Vector2::new(p.center_u, p.center_v);
    let me = m * e;
    let q = Matrix3::new(
        m[(0, 0)],
        m[(0, 1)],
        -me.x,
        m[(1, 0)],
        m[(1, 1)],
        -me.y,
        -me.x,
        -me.y,
        e.dot(&me) - 1.0,
    );
    Conic::ellipse(q)
}

/// Algebraic least-squares conic through `points` (unit-norm coefficient
/// vector minimizing the design-matrix residual), computed in Hartley
/// normalized coordinates.
pub fn fit_conic(points: &[Pixel]) -> Result<Conic> {
    if points.len() < 5 {
        return Err(Error::InsufficientPoints {
            needed: 5,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let (mu, mv) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.u / n, b + p.v / n));
    let spread = points.iter().map(|p| (p.u - mu).hypot(p.v - mv)).sum::<f64>() / n;
    if !(spread > 0.0) {
        return Err(Error::NotAnEllipse("points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / spread;
    let rows = points.len().max(6);
    let mut design = DMatrix::<f64>::zeros(rows, 6);
    for (i, p) in points.iter().enumerate() {
        let (x, y) = ((p.u - mu) * s, (p.v - mv) * s);
        let row = [x * x, x * y, y * y, x, y, 1.0];
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let k = svd.singular_values.imin();
    let w: Vec<f64> = v_t.row(k).iter().copied().collect();
    let qn = Matrix3::new(
        w[0],
        0.5 * w[1],
        0.5 * w[3],
        0.5 * w[1],
        w[2],
        0.5 * w[4],
        0.5 * w[3],
        0.5 * w[4],
        w[5],
    );
    let t = Matrix3::new(s, 0.0, -s * mu, 0.0, s, -s * mv, 0.0, 0.0, 1.0);
    Conic::ellipse(t.transpose() * qn * t)
}

/// The two points where the line through `through` at angle `gamma` meets
/// the ellipse, ordered by the line parameter (backward end first).
pub fn line_conic_intersect(c: &Conic, through: &Pixel, gamma: f64) -> Result<(Pixel, Pixel)> {
    let (ts, tc) = gamma.sin_cos();
    let (t1, t2) = chord_params(c.matrix(), through, tc, ts)?;
    Ok((
        Pixel::new(through.u + t1 * tc, through.v + t1 * ts),
        Pixel::new(through.u + t2 * tc, through.v + t2 * ts),
    ))
}

/// Line parameters `t1 < 0 < t2` of the chord through `p` along `(dx, dy)`.
pub(crate) fn chord_params(q: &Matrix3<f64>, p: &Pixel, dx: f64, dy: f64) -> Result<(f64, f64)> {
    let ph = Vec3::new(p.u, p.v, 1.0);
    let d = Vec3::new(dx, dy, 0.0);
    let qp = q * ph;
    let a = d.dot(&(q * d));
    let b = d.dot(&qp);
    let c = ph.dot(&qp);
    if !(c < 0.0) || !(a > 0.0) {
        return Err(Error::NoTwoIntersections);
    }
    let disc = b * b - a * c;
    let root = disc.sqrt();
    // stable quadratic roots
    let qq = -(b + b.signum() * root);
    let (r1, r2) = if qq == 0.0 {
        (-root / a, root / a)
    } else {
        (qq / a, c / qq)
    };
    Ok(if r1 < r2 { (r1, r2) } else { (r2, r1) })
}

/// Mean of the integer pixels strictly inside the ellipse.
pub fn center_of_mass(c: &Conic) -> Result<Pixel> {
    let p = conic_to_params(c)?;
    let (s, co) = p.theta.sin_cos();
    let half_v = (p.a * p.a * s * s + p.b * p.b * co * co).sqrt();
    let half_u = (p.a * p.a * co * co + p.b * p.b * s * s).sqrt();
    let q = c.matrix();
    let (mut count, mut sum_u, mut sum_v) = (0i64, 0i64, 0i64);
    let v_lo = (p.center_v - half_v).floor() as i64;
    let v_hi = (p.center_v + half_v).ceil() as i64;
    let interior = CenteredConic::new(c)?;
    let u_min = (p.center_u - half_u).floor() as i64 - 1;
    let u_max = (p.center_u + half_u).ceil() as i64 + 1;
    for v in v_lo..=v_hi {
        let vf = v as f64;
        // row quadratic in u
        let qa = q[(0, 0)];
        let qb = q[(0, 1)] * vf + q[(0, 2)];
        let qc = q[(1, 1)] * vf * vf + 2.0 * q[(1, 2)] * vf + q[(2, 2)];
        let disc = qb * qb - qa * qc;
        if disc < 0.0 {
            continue;
        }
        let mid = -qb / qa;
        let half = disc.sqrt() / qa;
        let mut lo = ((mid - half).ceil() as i64).max(u_min);
        let mut hi = ((mid + half).floor() as i64).min(u_max);
        let inside = |u: i64| interior.eval(&Pixel::new(u as f64, vf)) < 0.0;
        // settle the rounding at both ends with the exact membership test
        while lo <= hi && !inside(lo) {
            lo += 1;
        }
        while lo > u_min && inside(lo - 1) {
            lo -= 1;
        }
        while hi >= lo && !inside(hi) {
            hi -= 1;
        }
        while hi < u_max && inside(hi + 1) {
            hi += 1;
        }
        if lo > hi {
            continue;
        }
        let n = hi - lo + 1;
        count += n;
        sum_u += (lo + hi) * n / 2;
        sum_v += v * n;
    }
    if count == 0 {
        return Err(Error::EmptyInterior);
    }
    Ok(Pixel::new(sum_u as f64 / count as f64, sum_v as f64 / count as f64))
}

/// `pᵀQp` rewritten about the center as `dᵀ M d + f0`, which keeps the
/// membership test symmetric for pixels on the boundary.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CenteredConic {
    center: Pixel,
    m: Matrix2<f64>,
    f0: f64,
}

impl CenteredConic {
    pub(crate) fn new(c: &Conic) -> Result<Self> {
        let center = c.center()?;
        let q = c.matrix();
        Ok(Self {
            center,
            m: c.block(),
            f0: q[(2, 2)] + q[(0, 2)] * center.u + q[(1, 2)] * center.v,
        })
    }

    pub(crate) fn eval(&self, p: &Pixel) -> f64 {
        let d = Vector2::new(p.u - self.center.u, p.v - self.center.v);
        d.dot(&(self.m * d)) + self.f0
    }
}

/// Either representation accepted on input.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EllipseInput {
    Conic {
        #[serde(rename = "Q")]
        q: [[f64; 3]; 3],
    },
    Params(EllipseParams),
}

impl EllipseInput {
    pub fn to_conic(&self) -> Result<Conic> {
        match self {
            EllipseInput::Conic { q } => Conic::ellipse(Matrix3::from_fn(|r, c| q[r][c])),
            EllipseInput::Params(p) => {
                let p = EllipseParams::new(p.center(), p.a, p.b, p.theta)?;
                params_to_conic(&p)
            }
        }
    }

    pub fn from_conic(c: &Conic) -> Self {
        let m = c.matrix();
        EllipseInput::Conic {
            q: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
        }
    }
}
