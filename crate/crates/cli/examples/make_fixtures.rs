//! Regenerates the packaged fixtures under `crates/cli/fixtures`.
//!
//! Run with `cargo run -p circlecal-cli --example make_fixtures`. Output is
//! deterministic; ground truth for every fixture is written next to it.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use circlecal_core::cga::circle_distance2;
use circlecal_core::ellipse::{conic_to_params, EllipseInput};
use circlecal_core::geom::exp_so3;
use circlecal_core::synth::{add_noise, default_intrinsics, generate_view, observe_pair, PairLayout};
use circlecal_core::{Circle3D, RigidTransform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const CLOUD_GATE: f64 = 0.05 * 0.05;

fn write(path: &Path, text: String) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, text).unwrap();
}

fn write_json(path: &Path, v: &impl serde::Serialize) {
    write(path, serde_json::to_string_pretty(v).unwrap() + "\n");
}

fn csv(points: &[Vec3]) -> String {
    let mut s = String::from("x,y,z\n");
    for p in points {
        s += &format!("{},{},{}\n", p.x, p.y, p.z);
    }
    s
}

fn ply(points: &[Vec3]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property float intensity\nend_header\n",
        points.len()
    );
    for (i, p) in points.iter().enumerate() {
        s += &format!("{} {} {} {}\n", p.x, p.y, p.z, i % 7);
    }
    s
}

fn ring(circle: &Circle3D, n: usize) -> Vec<Vec3> {
    (0..n).map(|i| circle.point_at(TAU * i as f64 / n as f64)).collect()
}

fn clouds(dir: &Path, rng: &mut ChaCha8Rng) {
    let c = Circle3D::new(Vec3::new(1.2, -0.4, 2.0), Vec3::new(0.3, 0.2, 0.93), 0.75).unwrap();
    let pts = ring(&c, 64);
    write(&dir.join("ring.csv"), csv(&pts));
    write(&dir.join("ring.ply"), ply(&pts));
    write_json(&dir.join("ring_gt.json"), &c);
    write(&dir.join("empty.csv"), String::new());

    // inliers with small noise, outliers kept well outside the default gate
    let mut inl: Vec<Vec3> = (0..100).map(|_| c.point_at(rng.random_range(0.0..TAU))).collect();
    add_noise(&mut inl, 0.005, rng);
    assert!(inl.iter().all(|p| circle_distance2(&c, p) < 0.5 * CLOUD_GATE));
    let mut tagged: Vec<(Vec3, bool)> = inl.into_iter().map(|p| (p, true)).collect();
    while tagged.len() < 130 {
        let h = 2.0 * c.radius;
        let p = c.center + Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h));
        if circle_distance2(&c, &p) > 4.0 * CLOUD_GATE {
            let at = rng.random_range(0..=tagged.len());
            tagged.insert(at, (p, false));
        }
    }
    let (pts, mask): (Vec<Vec3>, Vec<bool>) = tagged.into_iter().unzip();
    write(&dir.join("ring_outliers.csv"), csv(&pts));
    write_json(
        &dir.join("ring_outliers_gt.json"),
        &json!({
            "circle": c,
            "inlier_count": mask.iter().filter(|m| **m).count(),
            "inlier_mask": mask,
        }),
    );
}

fn images(dir: &Path, rng: &mut ChaCha8Rng) {
    let k = default_intrinsics();
    write_json(&dir.join("intrinsics.json"), &json!({"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}));

    let n = exp_so3(&Vec3::new(0.9, 0.3, 0.0)) * Vec3::new(0.0, 0.0, -1.0);
    let (e1, _) = circlecal_core::geom::plane_basis(&n);
    let c1 = Vec3::new(0.3, -0.2, 2.5);
    let a = Circle3D::new(c1, n, 0.5).unwrap();
    let b = Circle3D::new(c1 + e1 * 1.0, n, 0.3).unwrap();
    let view = generate_view(&[a, b], &RigidTransform::identity(), &k, 0.5, rng).unwrap();
    write_json(&dir.join("oblique.json"), &EllipseInput::from_conic(&view.conics[0]));
    write_json(&dir.join("oblique_secondary.json"), &conic_to_params(&view.conics[1]).unwrap());
    write_json(
        &dir.join("oblique_gt.json"),
        &json!({"center": view.gt_centers[0], "radius": 0.5, "ratio": 0.5 / 0.3}),
    );

    let f = Circle3D::new(Vec3::new(0.0, 0.0, 3.0), Vec3::z(), 0.5).unwrap();
    let view = generate_view(&[f], &RigidTransform::identity(), &k, 0.0, rng).unwrap();
    write_json(&dir.join("fronto.json"), &conic_to_params(&view.conics[0]).unwrap());
    write_json(&dir.join("fronto_gt.json"), &json!({"center": view.gt_centers[0], "radius": 0.5}));
}

fn calibration(dir: &Path, rng: &mut ChaCha8Rng) {
    let k = default_intrinsics();
    write_json(&dir.join("intrinsics.json"), &json!({"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}));
    // LiDAR x forward, y left, z up; camera z forward, x right, y down
    let r = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let tilt = exp_so3(&Vec3::new(0.03, -0.05, 0.02));
    let gt = RigidTransform::new(tilt * r, Vec3::new(0.08, -0.12, 0.05)).unwrap();
    write_json(&dir.join("gt_pose.json"), &gt);
    let layout = PairLayout {
        depth: (3.0, 8.0),
        max_tilt: 50f64.to_radians(),
        radius: 0.5,
    };
    let mut frames = Vec::new();
    for f in 0..5 {
        let mut circles = Vec::new();
        let mut coplanar = Vec::new();
        for p in 0..2 {
            let obs = observe_pair(&layout, &gt, &k, 0.5, rng).unwrap();
            for (j, (circle, conic)) in [obs.primary, obs.secondary].iter().zip(&obs.view.conics).enumerate() {
                let name = format!("f{f}_c{}", 2 * p + j);
                let mut pts: Vec<Vec3> = (0..80).map(|_| circle.point_at(rng.random_range(0.0..TAU))).collect();
                add_noise(&mut pts, 0.005, rng);
                write(&dir.join(format!("{name}.csv")), csv(&pts));
                if j == 0 {
                    write_json(&dir.join(format!("{name}.json")), &EllipseInput::from_conic(conic));
                } else {
                    write_json(&dir.join(format!("{name}.json")), &conic_to_params(conic).unwrap());
                }
                circles.push(json!({"cloud": format!("{name}.csv"), "ellipse": format!("{name}.json"), "radius": circle.radius}));
            }
            coplanar.push(json!({"pair": [2 * p, 2 * p + 1]}));
        }
        frames.push(json!({"circles": circles, "coplanar": coplanar}));
    }
    write_json(
        &dir.join("job.json"),
        &json!({"intrinsics": "intrinsics.json", "frames": frames, "options": {"mode": "auto", "seed": 0, "subpixel": true}}),
    );
    let three: Vec<_> = frames[0]["circles"].as_array().unwrap()[..3].to_vec();
    write_json(
        &dir.join("job_three.json"),
        &json!({"intrinsics": "intrinsics.json", "frames": [{"circles": three}]}),
    );
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_917);
    clouds(&dir, &mut rng);
    images(&dir, &mut rng);
    calibration(&dir.join("calib"), &mut rng);
    println!("fixtures written to {}", dir.display());
}
