//! Shared inputs for the criterion benchmarks.

use std::f64::consts::TAU;

use circlecal_core::center::project_circle;
use circlecal_core::ellipse::Conic;
use circlecal_core::geom::exp_so3;
use circlecal_core::pnp::Correspondence;
use circlecal_core::synth::{add_noise, default_intrinsics, inject_outliers, sample_circle_gt};
use circlecal_core::{Circle3D, Pixel, RigidTransform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` noisy points on a random circle, with `outlier_fraction · n` outliers appended.
pub fn circle_cloud(n: usize, sigma: f64, outlier_fraction: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = sample_circle_gt(&mut rng);
    let mut pts: Vec<Vec3> = (0..n).map(|_| c.point_at(rng.random_range(0.0..TAU))).collect();
    add_noise(&mut pts, sigma, &mut rng);
    inject_outliers(pts, outlier_fraction, &c, &mut rng).0
}

/// Image of a 0.5 m circle at 3 m, tilted by `tilt` radians.
pub fn oblique_ellipse(tilt: f64) -> (Conic, Pixel) {
    let n = exp_so3(&Vec3::new(tilt, 0.0, 0.0)) * Vec3::new(0.0, 0.0, -1.0);
    let c = Circle3D::new(Vec3::new(0.2, -0.1, 3.0), n, 0.5).unwrap();
    project_circle(&c, &default_intrinsics()).unwrap()
}

/// Exact correspondences seen from a fixed pose, with a fraction of the
/// image points displaced far away.
pub fn correspondences(n: usize, outlier_fraction: f64, seed: u64) -> (RigidTransform, Vec<Correspondence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = default_intrinsics();
    let pose = RigidTransform::from_axis_angle(&Vec3::new(0.1, -0.2, 0.05), Vec3::new(0.1, 0.2, 5.0));
    let inv = pose.inverse();
    let n_out = (outlier_fraction * n as f64).round() as usize;
    let corr = (0..n)
        .map(|i| {
            let cam = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(3.0..9.0));
            let mut q = k.project_camera(&cam).unwrap();
            if i < n_out {
                q.u += rng.random_range(50.0..200.0);
            }
            Correspondence::new(inv.apply(&cam), q)
        })
        .collect();
    (pose, corr)
}
