//! Conformal embedding of 3D points and the closed-form circle fit.
//!
//! Vectors of the conformal space are stored as five coefficients in the
//! basis `{e1, e2, e3, n0, n∞}` with `n0·n∞ = -1`. A circle is the pencil
//! spanned by a sphere and a plane; the fit finds that pencil as the
//! invariant subspace of the two smallest admissible eigenvalues of
//! `P = (1/n) D Dᵀ M`.

use nalgebra::{Matrix3, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geom::{skew, Circle3D, Vec3};

pub type Vector5 = SVector<f64, 5>;
pub type Matrix5 = SMatrix<f64, 5, 5>;

/// Relative tolerance for calling an eigenvalue real and nonnegative.
pub const EIG_TOL: f64 = 1e-9;

/// Inner product with metric `diag(1,1,1)` ⊕ `[[0,-1],[-1,0]]`.
pub fn inner(a: &Vector5, b: &Vector5) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] - a[3] * b[4] - a[4] * b[3]
}

/// Metric tensor `M` of the null basis.
pub fn metric() -> Matrix5 {
    let mut m = Matrix5::zeros();
    m[(0, 0)] = 1.0;
    m[(1, 1)] = 1.0;
    m[(2, 2)] = 1.0;
    m[(3, 4)] = -1.0;
    m[(4, 3)] = -1.0;
    m
}

/// Conformal image of a Euclidean point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalPoint {
    pub e: Vec3,
    pub n0: f64,
    pub ninf: f64,
}

impl ConformalPoint {
    pub fn coeffs(&self) -> Vector5 {
        Vector5::new(self.e.x, self.e.y, self.e.z, self.n0, self.ninf)
    }
}

/// `P = p + n0 + ½‖p‖² n∞`.
pub fn embed(p: &Vec3) -> ConformalPoint {
    ConformalPoint {
        e: *p,
        n0: 1.0,
        ninf: 0.5 * p.norm_squared(),
    }
}

/// Dual sphere `C - ½ρ² n∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereEntity(pub Vector5);

impl SphereEntity {
    pub fn new(center: &Vec3, radius: f64) -> Self {
        let c = embed(center).coeffs();
        SphereEntity(c - Vector5::new(0.0, 0.0, 0.0, 0.0, 0.5 * radius * radius))
    }

    /// Center, or `None` for a plane (zero `n0` coefficient).
    pub fn center(&self) -> Option<Vec3> {
        let w = self.0[3];
        (w != 0.0).then(|| Vec3::new(self.0[0], self.0[1], self.0[2]) / w)
    }

    /// Signed squared radius; negative for imaginary spheres.
    pub fn radius_squared(&self) -> Option<f64> {
        let w = self.0[3];
        (w != 0.0).then(|| inner(&self.0, &self.0) / (w * w))
    }
}

/// Dual plane `n + δ n∞`, i.e. `{x : x·n = δ}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneEntity(pub Vector5);

impl PlaneEntity {
    pub fn new(normal: &Vec3, offset: f64) -> Self {
        PlaneEntity(Vector5::new(normal.x, normal.y, normal.z, 0.0, offset))
    }
}

/// Sphere and plane whose intersection is `circle`; the sphere is centered on
/// the circle's center so the two entities are orthogonal.
pub fn circle_entities(circle: &Circle3D) -> (SphereEntity, PlaneEntity) {
    (
        SphereEntity::new(&circle.center, circle.radius),
        PlaneEntity::new(&circle.normal, circle.normal.dot(&circle.center)),
    )
}

/// Approximate squared point-to-circle distance
/// `(P·S)²/S² + (P·Π)²/Π²`.
pub fn point_circle_distance2(p: &ConformalPoint, sp: &SphereEntity, pl: &PlaneEntity) -> Result<f64> {
    let s2 = inner(&sp.0, &sp.0);
    let pl2 = inner(&pl.0, &pl.0);
    if s2 == 0.0 || !s2.is_finite() {
        return Err(Error::DegenerateEntity("sphere has zero square norm"));
    }
    if pl2 == 0.0 || !pl2.is_finite() {
        return Err(Error::DegenerateEntity("plane has zero square norm"));
    }
    let pc = p.coeffs();
    let a = inner(&pc, &sp.0);
    let b = inner(&pc, &pl.0);
    Ok(a * a / s2 + b * b / pl2)
}

/// Same quantity as [`point_circle_distance2`] evaluated directly from the
/// circle parameters.
pub fn circle_distance2(circle: &Circle3D, p: &Vec3) -> f64 {
    let q = p - circle.center;
    let r2 = circle.radius * circle.radius;
    let s = q.norm_squared() - r2;
    let h = q.dot(&circle.normal);
    s * s / (4.0 * r2) + h * h
}

/// Bivector coefficients in the basis
/// `{e12, e13, e23, e1∧n0, e2∧n0, e3∧n0, e1∧n∞, e2∧n∞, e3∧n∞, n0∧n∞}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleBivector(pub [f64; 10]);

const WEDGE_PAIRS: [(usize, usize); 10] = [
    (0, 1),
    (0, 2),
    (1, 2),
    (0, 3),
    (1, 3),
    (2, 3),
    (0, 4),
    (1, 4),
    (2, 4),
    (3, 4),
];

impl CircleBivector {
    pub fn wedge(v: &Vector5, u: &Vector5) -> Self {
        let mut e = [0.0; 10];
        for (k, &(i, j)) in WEDGE_PAIRS.iter().enumerate() {
            e[k] = v[i] * u[j] - v[j] * u[i];
        }
        CircleBivector(e)
    }

    /// Closed-form extraction:
    /// `n = E_{e∧n0}`, `c = K n / ‖n‖²` with `K = -E_{n0∧n∞} I + [w]ₓ`,
    /// `w = (E23, -E13, E12)`, and with `E` scaled to `‖n‖ = 1`,
    /// `r² = ‖c‖² - 2 n·E_{e∧n∞} - 2 (c·n)²`.
    pub fn to_circle(&self) -> Result<Circle3D> {
        let e = &self.0;
        let n = Vec3::new(e[3], e[4], e[5]);
        let scale = n.norm();
        let magnitude = e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !(scale > 1e-12 * magnitude) || !scale.is_finite() {
            return Err(Error::DegenerateConfiguration(
                "bivector has no finite circle (plane part vanishes)".into(),
            ));
        }
        let e: Vec<f64> = e.iter().map(|x| x / scale).collect();
        let n = n / scale;
        let w = Vec3::new(e[2], -e[1], e[0]);
        let k = -e[9] * Matrix3::identity() + skew(&w);
        let c = k * n;
        let e_inf = Vec3::new(e[6], e[7], e[8]);
        let cn = c.dot(&n);
        let r2 = c.norm_squared() - 2.0 * n.dot(&e_inf) - 2.0 * cn * cn;
        if !(r2 > 0.0) {
            return Err(Error::NonCircleSolution(r2));
        }
        Circle3D::new(c, n, r2.sqrt())
    }
}

/// Output of [`fit_circle_cga`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgaFitResult {
    pub circle: Circle3D,
    /// Mean of [`circle_distance2`] over the input points.
    pub mean_residual: f64,
    /// The two eigenvalues spanning the circle pencil, in squared input units.
    pub eigenvalues_used: (f64, f64),
}

/// Closed-form circle fit by eigen-decomposition of `P = (1/n) D Dᵀ M`.
///
/// Points are centered and scaled to unit RMS radius before `D` is built;
/// the fit is equivariant so this only affects conditioning.
pub fn fit_circle_cga(points: &[Vec3]) -> Result<CgaFitResult> {
    let n = points.len();
    if n < 5 {
        return Err(Error::InsufficientPoints { needed: 5, got: n });
    }
    if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(Error::DegenerateConfiguration("non-finite point".into()));
    }
    let mean = points.iter().sum::<Vec3>() / n as f64;
    let scale = (points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration("all points coincide".into()));
    }
    let q: Vec<Vec3> = points.iter().map(|p| (p - mean) / scale).collect();
    check_not_collinear(&q)?;

    let mut scatter = Matrix5::zeros();
    for p in &q {
        let d = embed(p).coeffs();
        scatter += d * d.transpose();
    }
    let pm = scatter * metric() / n as f64;
    let (lambda1, lambda2) = smallest_admissible_pair(&pm)?;
    let (v, u) = invariant_pair(&pm, lambda1, lambda2);
    let unit = CircleBivector::wedge(&v, &u).to_circle()?;
    let circle = Circle3D::new(mean + unit.center * scale, unit.normal, unit.radius * scale)?;
    let mean_residual = points.iter().map(|p| circle_distance2(&circle, p)).sum::<f64>() / n as f64;
    let s2 = scale * scale;
    Ok(CgaFitResult {
        circle,
        mean_residual,
        eigenvalues_used: (lambda1 * s2, lambda2 * s2),
    })
}

fn check_not_collinear(q: &[Vec3]) -> Result<()> {
    let cov = q.iter().fold(Matrix3::zeros(), |acc, p| acc + p * p.transpose());
    let mut s: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[1] <= 1e-20 * s[0] {
        return Err(Error::DegenerateConfiguration("points are collinear".into()));
    }
    Ok(())
}

/// The two smallest real eigenvalues with `λ ≥ -ε‖P‖_F`.
fn smallest_admissible_pair(pm: &Matrix5) -> Result<(f64, f64)> {
    let tol = EIG_TOL * pm.norm();
    let eig = pm.schur().complex_eigenvalues();
    let mut real: Vec<f64> = eig
        .iter()
        .filter(|z| z.im.abs() <= tol && z.re >= -tol)
        .map(|z| z.re)
        .collect();
    if real.len() < 2 {
        return Err(Error::DegenerateConfiguration(format!(
            "only {} admissible eigenvalues",
            real.len()
        )));
    }
    real.sort_by(f64::total_cmp);
    Ok((real[0], real[1]))
}

/// Basis of the invariant subspace of `pm` belonging to `λ1, λ2`, i.e. the
/// null space of `(P - λ1 I)(P - λ2 I)`. Works for repeated eigenvalues too.
fn invariant_pair(pm: &Matrix5, lambda1: f64, lambda2: f64) -> (Vector5, Vector5) {
    let id = Matrix5::identity();
    let w = (pm - id * lambda1) * (pm - id * lambda2);
    let svd = w.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    (v_t.row(order[0]).transpose(), v_t.row(order[1]).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn ring(c: &Circle3D, n: usize) -> Vec<Vec3> {
        (0..n).map(|i| c.point_at(i as f64 * std::f64::consts::TAU / n as f64)).collect()
    }

    #[test]
    fn embed_examples() {
        let p = embed(&Vec3::zeros());
        assert_eq!(p.coeffs(), Vector5::new(0.0, 0.0, 0.0, 1.0, 0.0));
        let p = embed(&Vec3::x());
        assert_eq!(p.coeffs(), Vector5::new(1.0, 0.0, 0.0, 1.0, 0.5));
    }

    #[test]
    fn null_property_and_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (p, q) = (rvec(&mut rng, 10.0), rvec(&mut rng, 10.0));
            let (a, b) = (embed(&p).coeffs(), embed(&q).coeffs());
            assert!(inner(&a, &a).abs() < 1e-12);
            assert!((inner(&a, &b) + 0.5 * (p - q).norm_squared()).abs() < 1e-10);
            // matrix form agrees
            assert!(((a.transpose() * metric() * b)[0] - inner(&a, &b)).abs() < 1e-10);
        }
    }

    #[test]
    fn sphere_entity_accessors() {
        let s = SphereEntity::new(&Vec3::new(1.0, 2.0, 3.0), 2.0);
        assert!((s.center().unwrap() - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-15);
        assert!((s.radius_squared().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn distance_on_circle_is_zero() {
        let c = Circle3D::new(Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.3, 0.2, 1.0), 1.7).unwrap();
        let (sp, pl) = circle_entities(&c);
        for i in 0..20 {
            let p = c.point_at(i as f64 * 0.3);
            assert!(point_circle_distance2(&embed(&p), &sp, &pl).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn distance_at_center_matches_formula() {
        // unit circle in z = 0: (P·S)²/S² = (r²/2)²/r² = 1/4
        let c = Circle3D::new(Vec3::zeros(), Vec3::z(), 1.0).unwrap();
        let (sp, pl) = circle_entities(&c);
        let d = point_circle_distance2(&embed(&Vec3::zeros()), &sp, &pl).unwrap();
        assert!((d - 0.25).abs() < 1e-15);
        assert!((d - circle_distance2(&c, &Vec3::zeros())).abs() < 1e-15);
    }

    #[test]
    fn distance_along_normal_plane_term() {
        let c = Circle3D::new(Vec3::new(0.5, 0.5, 0.5), Vec3::new(1.0, 1.0, 1.0), 2.0).unwrap();
        let (sp, pl) = circle_entities(&c);
        let h = 0.37;
        let p = c.point_at(0.4) + h * c.normal;
        let pc = embed(&p).coeffs();
        let plane_term = inner(&pc, &pl.0).powi(2) / inner(&pl.0, &pl.0);
        assert!((plane_term - h * h).abs() < 1e-10);
        assert!(point_circle_distance2(&embed(&p), &sp, &pl).unwrap() >= plane_term);
    }

    #[test]
    fn degenerate_entities_rejected() {
        let p = embed(&Vec3::x());
        let zero_sphere = SphereEntity(embed(&Vec3::zeros()).coeffs());
        let pl = PlaneEntity::new(&Vec3::z(), 0.0);
        assert!(point_circle_distance2(&p, &zero_sphere, &pl).is_err());
        let sp = SphereEntity::new(&Vec3::zeros(), 1.0);
        assert!(point_circle_distance2(&p, &sp, &PlaneEntity(Vector5::zeros())).is_err());
    }

    /// Independent route: plane = pencil member with no n0 part, sphere =
    /// member with unit n0 part, circle = their intersection.
    fn oracle_circle(v: &Vector5, u: &Vector5) -> (Vec3, Vec3, f64) {
        let plane = v * u[3] - u * v[3];
        let normal = Vec3::new(plane[0], plane[1], plane[2]);
        let delta = plane[4];
        let sphere = if v[3].abs() > u[3].abs() { v / v[3] } else { u / u[3] };
        let s = Vec3::new(sphere[0], sphere[1], sphere[2]);
        let rho2 = s.norm_squared() - 2.0 * sphere[4];
        let nn = normal.norm();
        let dist = (s.dot(&normal) - delta) / nn;
        let center = s - normal / nn * dist;
        (center, normal / nn, (rho2 - dist * dist).sqrt())
    }

    #[test]
    fn closed_form_extraction_matches_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let c = Circle3D::new(rvec(&mut rng, 3.0), rvec(&mut rng, 1.0), rng.random_range(0.5..4.0)).unwrap();
            let (sp, pl) = circle_entities(&c);
            // scramble the pencil basis
            let (a, b, cc, d) = (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let v = sp.0 * a + pl.0 * b;
            let u = sp.0 * cc + pl.0 * d;
            if (a * d - b * cc).abs() < 0.1 {
                continue;
            }
            let got = CircleBivector::wedge(&v, &u).to_circle().unwrap();
            let (oc, on, or) = oracle_circle(&v, &u);
            assert!((got.center - oc).norm() < 1e-9);
            assert!((got.center - c.center).norm() < 1e-9);
            assert!(got.normal.cross(&on).norm() < 1e-9);
            assert!((got.radius - or).abs() < 1e-9);
            assert!((got.radius - c.radius).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_exact_circle() {
        let truth = Circle3D::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(1.0, 1.0, 1.0), 2.0).unwrap();
        let fit = fit_circle_cga(&ring(&truth, 100)).unwrap();
        assert!((fit.circle.center - truth.center).norm() < 1e-8);
        assert!((fit.circle.normal - truth.normal).norm() < 1e-8);
        assert!((fit.circle.radius - truth.radius).abs() < 1e-8);
        assert!(fit.mean_residual <= 1e-16 * truth.radius * truth.radius);
    }

    #[test]
    fn fit_five_exact_points() {
        let truth = Circle3D::new(Vec3::new(-1.0, 0.5, 2.0), Vec3::new(0.2, -1.0, 0.4), 1.3).unwrap();
        let pts: Vec<Vec3> = [0.1, 1.2, 2.0, 3.9, 5.1].iter().map(|&t| truth.point_at(t)).collect();
        let fit = fit_circle_cga(&pts).unwrap();
        assert!(fit.mean_residual < 1e-10);
        assert!((fit.circle.center - truth.center).norm() < 1e-8);
    }

    #[test]
    fn fit_error_paths() {
        let pts = vec![Vec3::zeros(); 4];
        assert_eq!(fit_circle_cga(&pts), Err(Error::InsufficientPoints { needed: 5, got: 4 }));
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(fit_circle_cga(&line), Err(Error::DegenerateConfiguration(_))));
        assert!(fit_circle_cga(&[Vec3::new(1.0, 1.0, 1.0); 8]).is_err());
    }

    #[test]
    fn noisy_fit_residual_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truth = Circle3D::new(Vec3::zeros(), Vec3::z(), 2.0).unwrap();
        let pts: Vec<Vec3> = ring(&truth, 60).into_iter().map(|p| p + rvec(&mut rng, 0.05)).collect();
        let fit = fit_circle_cga(&pts).unwrap();
        assert!(fit.mean_residual > 0.0);
        assert!(fit.eigenvalues_used.0 <= fit.eigenvalues_used.1);
        assert!((fit.circle.center - truth.center).norm() < 0.05);
    }
}
