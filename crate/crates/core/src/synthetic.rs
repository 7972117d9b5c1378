//! Synthetic scenes: seeded random clouds and the bundled flag scene.

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::cloud_io::{sh_coeffs_per_channel, GaussianCloud, GaussianPoint, Mask, Vec3};
use crate::renderer::sh::SH_C0;

/// Random cloud with realistic attribute ranges.
pub fn random_cloud(n: usize, degree: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = sh_coeffs_per_channel(degree) * 3;
    let points = (0..n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            GaussianPoint {
                position: Vec3::from_fn(|_, _| rng.gen_range(-5.0..5.0)),
                rotation: q.map(|v| v / qn),
                scale: Vec3::from_fn(|_, _| rng.gen_range(-6.0f64..0.0).exp()),
                opacity: rng.gen_range(0.01..0.99),
                sh: (0..per).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    GaussianCloud::new(points, degree)
}

pub struct FlagScene {
    pub cloud: GaussianCloud,
    pub mask: Mask,
}

const POLE_POINTS: usize = 150;
const FLAG_COLS: usize = 50;
const FLAG_ROWS: usize = 37;

fn dc_for_rgb(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

/// A rippled, striped flag (dynamic) on a pole (static): 2,000 Gaussians.
pub fn flag_scene() -> FlagScene {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut points = Vec::with_capacity(POLE_POINTS + FLAG_COLS * FLAG_ROWS);
    let mut bits = Vec::with_capacity(points.capacity());

    for i in 0..POLE_POINTS {
        let t = i as f64 / (POLE_POINTS - 1) as f64;
        let angle = i as f64 * 2.399_963;
        let pos = Vec3::new(0.03 * angle.cos(), 3.1 * t, 0.03 * angle.sin());
        let mut p = GaussianPoint::new(pos, Vec3::new(0.03, 0.03, 0.03), 0.95, dc_for_rgb([0.55, 0.55, 0.6]));
        p.position += Vec3::from_fn(|_, _| rng.gen_range(-0.002..0.002));
        points.push(p);
        bits.push(false);
    }

    for row in 0..FLAG_ROWS {
        for col in 0..FLAG_COLS {
            let u = col as f64 / (FLAG_COLS - 1) as f64;
            let v = row as f64 / (FLAG_ROWS - 1) as f64;
            let x = 0.05 + 2.0 * u;
            let y = 1.8 + 1.2 * v;
            let z = 0.12 * u * (3.0 * std::f64::consts::PI * u + 1.5 * v).sin();
            let stripe = (v * 5.0).floor() as usize % 2;
            let rgb = if stripe == 0 { [0.8, 0.12, 0.1] } else { [0.92, 0.92, 0.9] };
            let mut p = GaussianPoint::new(
                Vec3::new(x, y, z) + Vec3::from_fn(|_, _| rng.gen_range(-0.004..0.004)),
                Vec3::new(0.028, 0.022, 0.012),
                0.9,
                dc_for_rgb(rgb),
            );
            let half = 0.5 * rng.gen_range(-0.2f64..0.2);
            p.rotation = [half.cos(), 0.0, 0.0, half.sin()];
            points.push(p);
            bits.push(true);
        }
    }
    FlagScene {
        cloud: GaussianCloud::new(points, 0),
        mask: Mask { bits },
    }
}

/// Camera-to-world matrix in the NeRF convention (camera looks down −z, +y up).
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix4<f64> {
    let back = (eye - target).normalize();
    let right = up.cross(&back).normalize();
    let true_up = back.cross(&right);
    let mut m = Matrix4::identity();
    for r in 0..3 {
        m[(r, 0)] = right[r];
        m[(r, 1)] = true_up[r];
        m[(r, 2)] = back[r];
        m[(r, 3)] = eye[r];
    }
    m
}

/// `transforms.json` contents with two views of the flag scene.
pub fn flag_cameras_json() -> String {
    let target = Vector3::new(1.0, 2.2, 0.0);
    let eyes = [Vector3::new(1.0, 2.3, 5.5), Vector3::new(3.8, 2.9, 4.2)];
    let frames: Vec<_> = eyes
        .iter()
        .enumerate()
        .map(|(i, eye)| {
            let m = look_at(*eye, target, Vector3::y());
            let rows: Vec<Vec<f64>> = (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect();
            json!({ "file_path": format!("./view_{i}"), "transform_matrix": rows })
        })
        .collect();
    serde_json::to_string_pretty(&json!({ "camera_angle_x": 0.6911112070083618, "frames": frames })).unwrap()
}

/// Pipeline config for the bundled scene; every tunable keeps its default.
pub fn flag_config_json() -> String {
    serde_json::to_string_pretty(&json!({
        "input_ply": "scene.ply",
        "mask_path": "mask.txt",
        "cameras_path": "transforms.json",
        "output_dir": "out"
    }))
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_scene_shape() {
        let s = flag_scene();
        assert_eq!(s.cloud.len(), 2000);
        assert_eq!(s.mask.count_set(), FLAG_COLS * FLAG_ROWS);
        assert_eq!(flag_scene().cloud, s.cloud);
    }

    #[test]
    fn look_at_points_minus_z_at_target() {
        let eye = Vector3::new(1.0, 2.0, 5.0);
        let target = Vector3::new(1.0, 2.0, 0.0);
        let m = look_at(eye, target, Vector3::y());
        let forward = -Vector3::new(m[(0, 2)], m[(1, 2)], m[(2, 2)]);
        assert!((forward - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }
}
