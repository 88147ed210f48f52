//! Shared geometric types: points, pixels, rigid transforms, the pinhole
//! camera, and spatial circles.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or direction in 3D (meters when it is a point).
pub type Vec3 = Vector3<f64>;

/// Image coordinates in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn homogeneous(&self) -> Vec3 {
        Vec3::new(self.u, self.v, 1.0)
    }

    /// Dehomogenizes `h`; `None` for points at infinity.
    pub fn from_homogeneous(h: &Vec3) -> Option<Pixel> {
        if h.z.abs() < f64::EPSILON * h.norm() || !h.iter().all(|x| x.is_finite()) {
            return None;
        }
        Some(Pixel::new(h.x / h.z, h.y / h.z))
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsJson")]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Deserialize)]
struct IntrinsicsJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl TryFrom<IntrinsicsJson> for Intrinsics {
    type Error = Error;

    fn try_from(j: IntrinsicsJson) -> Result<Self> {
        Intrinsics::new(j.fx, j.fy, j.cx, j.cy)
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite principal point".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, p: &Vec3) -> Result<Pixel> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera(p.z));
        }
        Ok(Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Normalized image coordinates `K^-1 [u v 1]^T` (not unit length).
    pub fn normalized(&self, px: &Pixel) -> Vec3 {
        Vec3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }
}

/// Rotation followed by translation: `x_cam = R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformJson", into = "TransformJson")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct TransformJson {
    #[serde(rename = "T")]
    t: [[f64; 4]; 4],
}

impl From<RigidTransform> for TransformJson {
    fn from(x: RigidTransform) -> Self {
        let m = x.to_matrix4();
        let mut t = [[0.0; 4]; 4];
        for (r, row) in t.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        TransformJson { t }
    }
}

impl TryFrom<TransformJson> for RigidTransform {
    type Error = Error;

    fn try_from(j: TransformJson) -> Result<Self> {
        RigidTransform::from_matrix4(&Matrix4::from_fn(|r, c| j.t[r][c]))
    }
}

/// Tolerance for accepting user-supplied rotations before re-projection.
const ROTATION_INPUT_TOL: f64 = 1e-6;

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates that `rotation` is a proper rotation (to 1e-6) and snaps it
    /// onto SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entries".into()));
        }
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if defect > ROTATION_INPUT_TOL || (rotation.determinant() - 1.0).abs() > ROTATION_INPUT_TOL {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (defect {defect:.3e}, det {:.6})",
                rotation.determinant()
            )));
        }
        Ok(Self {
            rotation: orthonormalize(&rotation),
            translation,
        })
    }

    /// From an axis-angle vector (radians) and a translation.
    pub fn from_axis_angle(omega: &Vec3, translation: Vec3) -> Self {
        Self {
            rotation: exp_so3(omega),
            translation,
        }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidTransform(format!(
                "last row must be [0,0,0,1], got {bottom:?}"
            )));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Re-projects the rotation onto SO(3); use after long composition chains.
    pub fn orthonormalized(&self) -> RigidTransform {
        RigidTransform {
            rotation: orthonormalize(&self.rotation),
            translation: self.translation,
        }
    }
}

/// Nearest rotation in the Frobenius sense (polar factor via SVD).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map.
pub fn exp_so3(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-8 {
        // second-order series
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Angle of a rotation matrix in [0, π].
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let sin_axis = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * sin_axis.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Geodesic distance ‖log(R_gt⁻¹ R_est)‖ in radians.
pub fn rotation_error(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    rotation_angle(&(r_gt.transpose() * r_est))
}

pub fn translation_error(t_est: &Vec3, t_gt: &Vec3) -> f64 {
    (t_est - t_gt).norm()
}

/// Pinhole projection of a point given in the source frame of `pose`.
pub fn project(point: &Vec3, pose: &RigidTransform, k: &Intrinsics) -> Result<Pixel> {
    k.project_camera(&pose.apply(point))
}

/// Unit viewing ray `K⁻¹ũ / ‖K⁻¹ũ‖` in the camera frame.
pub fn backproject_ray(pixel: &Pixel, k: &Intrinsics) -> Vec3 {
    k.normalized(pixel).normalize()
}

/// A circle in space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle3D {
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
}

impl Circle3D {
    /// Normalizes `normal` and applies the sign convention of
    /// [`canonical_normal`].
    pub fn new(center: Vec3, normal: Vec3, radius: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::DegenerateEntity("circle normal has zero length"));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::NonCircleSolution(radius * radius));
        }
        if !center.iter().all(|x| x.is_finite()) {
            return Err(Error::DegenerateEntity("circle center is not finite"));
        }
        Ok(Self {
            center,
            normal: canonical_normal(&(normal / len)),
            radius,
        })
    }

    /// Point at angle `theta` measured in the in-plane basis of [`plane_basis`].
    pub fn point_at(&self, theta: f64) -> Vec3 {
        let (e1, e2) = plane_basis(&self.normal);
        self.center + self.radius * (theta.cos() * e1 + theta.sin() * e2)
    }

    /// Euclidean distance from `p` to the nearest point of the circle.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let q = p - self.center;
        let h = q.dot(&self.normal);
        let rho = (q - h * self.normal).norm();
        h.hypot(rho - self.radius)
    }

    pub fn transformed(&self, t: &RigidTransform) -> Circle3D {
        Circle3D {
            center: t.apply(&self.center),
            normal: canonical_normal(&(t.rotation * self.normal)),
            radius: self.radius,
        }
    }
}

/// Picks the sign of a unit normal: z ≥ 0, then y ≥ 0, then x ≥ 0 when the
/// earlier components vanish.
pub fn canonical_normal(n: &Vec3) -> Vec3 {
    const EPS: f64 = 1e-12;
    let flip = if n.z.abs() > EPS {
        n.z < 0.0
    } else if n.y.abs() > EPS {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        -n
    } else {
        *n
    }
}

/// Right-handed orthonormal pair spanning the plane orthogonal to `n`.
pub fn plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let n = n.normalize();
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}
