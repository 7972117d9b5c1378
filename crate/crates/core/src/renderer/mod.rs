//! CPU Gaussian splat renderer: EWA projection, SH color, depth-sorted
//! front-to-back α-blending.

mod camera;
pub mod sh;

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

pub use camera::{load_cameras, parse_cameras, Camera};
pub use sh::eval_sh;

use crate::cloud_io::{GaussianCloud, GaussianPoint};
use crate::error::{Error, Result};

pub const NEAR_PLANE: f64 = 0.01;
pub const COV_FLOOR: f64 = 0.3;
/// Splat support: Mahalanobis distance ≤ 3.
pub const EXTENT_SIGMA: f64 = 3.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
const TILE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl Splat2D {
    /// Squared Mahalanobis distance of a pixel-space point from the mean.
    pub fn mahalanobis2(&self, x: f64, y: f64) -> f64 {
        let d = Vector2::new(x - self.mean.x, y - self.mean.y);
        (d.transpose() * self.conic * d)[(0, 0)]
    }

    /// Half-widths of the axis-aligned box enclosing the 3σ ellipse.
    fn half_extent(&self) -> (f64, f64) {
        (
            EXTENT_SIGMA * self.cov2d[(0, 0)].sqrt(),
            EXTENT_SIGMA * self.cov2d[(1, 1)].sqrt(),
        )
    }
}

/// Projects one Gaussian; `None` when it lies in front of the near plane.
pub fn project_gaussian(point: &GaussianPoint, camera: &Camera, sh_degree: usize) -> Result<Option<Splat2D>> {
    let w = camera.world_to_camera();
    let center = camera.center();
    let t = w * (point.position - center);
    if t.z < NEAR_PLANE {
        return Ok(None);
    }
    let f = camera.focal();
    let (cx, cy) = camera.principal_point();
    let mean = Vector2::new(f * t.x / t.z + cx, f * t.y / t.z + cy);
    let j = Matrix2x3::new(
        f / t.z,
        0.0,
        -f * t.x / (t.z * t.z),
        0.0,
        f / t.z,
        -f * t.y / (t.z * t.z),
    );
    let cov_cam = w * point.covariance() * w.transpose();
    let mut cov2d = j * cov_cam * j.transpose();
    // exact symmetry keeps the conic symmetric
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += COV_FLOOR;
    cov2d[(1, 1)] += COV_FLOOR;
    let Some(conic) = cov2d.try_inverse() else {
        return Ok(None);
    };
    let dir = (point.position - center).normalize();
    let color = eval_sh(&point.sh, &dir, sh_degree)?;
    Ok(Some(Splat2D {
        mean,
        cov2d,
        conic,
        depth: t.z,
        color,
        opacity: point.opacity,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: (0..width * height).flat_map(|_| rgb).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Highest SH band used; capped by the cloud's own degree.
    pub sh_degree: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            sh_degree: 3,
        }
    }
}

/// Projected splats in blending order: ascending depth, ties by input index.
pub fn sorted_splats(cloud: &GaussianCloud, camera: &Camera, sh_degree: usize) -> Result<Vec<Splat2D>> {
    let degree = sh_degree.min(cloud.sh_degree);
    let projected: Vec<Option<Splat2D>> = cloud
        .points
        .par_iter()
        .map(|p| project_gaussian(p, camera, degree))
        .collect::<Result<_>>()?;
    let mut splats: Vec<(usize, Splat2D)> = projected
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .collect();
    splats.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));
    Ok(splats.into_iter().map(|(_, s)| s).collect())
}

pub fn render(cloud: &GaussianCloud, camera: &Camera, options: &RenderOptions) -> Result<Image> {
    let splats = sorted_splats(cloud, camera, options.sh_degree)?;
    Ok(render_splats(&splats, camera.width, camera.height, options.background, TILE))
}

/// Inclusive pixel range whose centers may fall inside [lo, hi].
fn pixel_span(lo: f64, hi: f64, size: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).floor().max(0.0);
    let last = (hi - 0.5).ceil().min(size as f64 - 1.0);
    (first <= last).then(|| (first as usize, last as usize))
}

fn render_splats(splats: &[Splat2D], width: usize, height: usize, background: [f64; 3], tile: usize) -> Image {
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        let (rx, ry) = s.half_extent();
        let (Some((x0, x1)), Some((y0, y1))) = (
            pixel_span(s.mean.x - rx, s.mean.x + rx, width),
            pixel_span(s.mean.y - ry, s.mean.y + ry, height),
        ) else {
            continue;
        };
        for ty in y0 / tile..=y1 / tile {
            for tx in x0 / tile..=x1 / tile {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let mut data = vec![0.0; 3 * width * height];
    data.par_chunks_mut(3 * width).enumerate().for_each(|(y, row)| {
        let py = y as f64 + 0.5;
        for x in 0..width {
            let px = x as f64 + 0.5;
            let mut color = [0.0; 3];
            let mut transmittance = 1.0;
            for &i in &bins[(y / tile) * tiles_x + x / tile] {
                let s = &splats[i as usize];
                let q = s.mahalanobis2(px, py);
                if q > EXTENT_SIGMA * EXTENT_SIGMA {
                    continue;
                }
                let alpha = s.opacity * (-0.5 * q).exp();
                for c in 0..3 {
                    color[c] += s.color[c] * alpha * transmittance;
                }
                transmittance *= 1.0 - alpha;
                if transmittance < MIN_TRANSMITTANCE {
                    break;
                }
            }
            for c in 0..3 {
                row[3 * x + c] = color[c] + transmittance * background[c];
            }
        }
    });
    Image { width, height, data }
}

/// 8-bit PNG, each channel quantized as round(255·clamp(v, 0, 1)).
pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buffer = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.to_rgb8())
        .ok_or_else(|| Error::invalid("image buffer length does not match its size"))?;
    buffer.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

pub fn render_file_name(view: usize, frame: usize) -> String {
    format!("view{view}_frame_{frame:04}.png")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud_io::Vec3;
    use crate::synthetic::{look_at, random_cloud};
    use nalgebra::{Matrix4, Vector3};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn front_camera(w: usize, h: usize) -> Camera {
        Camera::new(Matrix4::identity(), std::f64::consts::FRAC_PI_2, w, h).unwrap()
    }

    fn gray(pos: Vec3, s: f64, opacity: f64, rgb: [f64; 3]) -> GaussianPoint {
        GaussianPoint::new(pos, Vec3::repeat(s), opacity, rgb.map(|c| (c - 0.5) / sh::SH_C0))
    }

    #[test]
    fn on_axis_point_projects_to_center_with_isotropic_cov() {
        let cam = front_camera(64, 48);
        let p = gray(Vec3::new(0.0, 0.0, -4.0), 0.1, 1.0, [0.5; 3]);
        let s = project_gaussian(&p, &cam, 0).unwrap().unwrap();
        assert_eq!(s.mean, Vector2::new(32.0, 24.0));
        assert_eq!(s.depth, 4.0);
        // on-axis, J = diag(f/z, f/z, ·) restricted to x,y: σ_px² = (f·s/z)² + floor
        let f = cam.focal();
        let want = (f * 0.1 / 4.0).powi(2) + COV_FLOOR;
        assert!((s.cov2d[(0, 0)] - want).abs() < 1e-12 * want);
        assert!((s.cov2d[(1, 1)] - want).abs() < 1e-12 * want);
        assert!(s.cov2d[(0, 1)].abs() < 1e-6 * want);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = front_camera(8, 8);
        let p = gray(Vec3::new(0.0, 0.0, 2.0), 0.1, 1.0, [0.5; 3]);
        assert!(project_gaussian(&p, &cam, 0).unwrap().is_none());
        let near = gray(Vec3::new(0.0, 0.0, -0.005), 0.1, 1.0, [0.5; 3]);
        assert!(project_gaussian(&near, &cam, 0).unwrap().is_none());
    }

    #[test]
    fn empty_cloud_is_background() {
        let cam = front_camera(5, 4);
        let opts = RenderOptions {
            background: [0.2, 0.4, 0.6],
            sh_degree: 0,
        };
        let img = render(&GaussianCloud::empty(0), &cam, &opts).unwrap();
        assert_eq!(img, Image::filled(5, 4, [0.2, 0.4, 0.6]));
    }

    #[test]
    fn single_opaque_splat_at_pixel_center() {
        // 9×9 image so the principal point (4.5, 4.5) is pixel (4,4)'s center
        let cam = front_camera(9, 9);
        let p = gray(Vec3::new(0.0, 0.0, -3.0), 0.5, 1.0, [0.9, 0.3, 0.1]);
        let img = render(&GaussianCloud::new(vec![p], 0), &cam, &RenderOptions::default()).unwrap();
        let px = img.pixel(4, 4);
        for (got, want) in px.iter().zip([0.9, 0.3, 0.1]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    /// Direct Eq.-style evaluation: every splat, no binning, no early exit.
    fn brute_force(splats: &[Splat2D], w: usize, h: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut c = [0.0; 3];
                let mut t = 1.0;
                for s in splats {
                    let d = Vector2::new(px - s.mean.x, py - s.mean.y);
                    let q = d.dot(&(s.cov2d.try_inverse().unwrap() * d));
                    if q <= 9.0 {
                        let a = s.opacity * (-0.5 * q).exp();
                        for k in 0..3 {
                            c[k] += s.color[k] * a * t;
                        }
                        t *= 1.0 - a;
                    }
                }
                out.extend(c);
            }
        }
        out
    }

    fn small_scene(seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..10)
            .map(|_| {
                let pos = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-6.0..-2.0));
                let mut p = gray(pos, 0.0, rng.gen_range(0.05..0.9), [rng.gen(), rng.gen(), rng.gen()]);
                p.scale = Vec3::from_fn(|_, _| rng.gen_range(0.05..0.6));
                p
            })
            .collect();
        GaussianCloud::new(points, 0)
    }

    #[test]
    fn matches_brute_force_and_ignores_point_order() {
        let cam = front_camera(40, 32);
        for seed in 0..5 {
            let cloud = small_scene(seed);
            let img = render(&cloud, &cam, &RenderOptions::default()).unwrap();
            let oracle = brute_force(&sorted_splats(&cloud, &cam, 0).unwrap(), 40, 32);
            for (a, b) in img.data.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-5);
            }
            let mut shuffled = cloud.clone();
            shuffled.points.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 100));
            assert_eq!(render(&shuffled, &cam, &RenderOptions::default()).unwrap(), img);
        }
    }

    #[test]
    fn binning_does_not_change_output() {
        let cloud = random_cloud(300, 2, 4);
        let cam = Camera::new(
            look_at(Vector3::new(0.0, 0.0, 14.0), Vector3::zeros(), Vector3::y()),
            0.9,
            70,
            50,
        )
        .unwrap();
        let splats = sorted_splats(&cloud, &cam, 2).unwrap();
        let binned = render_splats(&splats, 70, 50, [0.1; 3], TILE);
        let single = render_splats(&splats, 70, 50, [0.1; 3], 70);
        assert_eq!(binned, single);
    }

    #[test]
    fn opacity_bounded_and_rigid_translation_invariant() {
        let cloud = random_cloud(200, 1, 8);
        let c2w = look_at(Vector3::new(2.0, 1.0, 12.0), Vector3::zeros(), Vector3::y());
        let cam = Camera::new(c2w, 0.8, 48, 40).unwrap();
        let white = RenderOptions {
            background: [1.0; 3],
            sh_degree: 1,
        };
        let black = RenderOptions {
            background: [0.0; 3],
            sh_degree: 1,
        };
        let on_white = render(&cloud, &cam, &white).unwrap();
        let on_black = render(&cloud, &cam, &black).unwrap();
        // difference is the final transmittance, which must be in [0, 1]
        for (w, b) in on_white.data.iter().zip(&on_black.data) {
            let t = w - b;
            assert!((-1e-12..=1.0 + 1e-12).contains(&t));
        }
        let shift = Vec3::new(3.0, -2.0, 0.5);
        let mut moved = cloud.clone();
        moved.points.iter_mut().for_each(|p| p.position += shift);
        let mut m = c2w;
        for r in 0..3 {
            m[(r, 3)] += shift[r];
        }
        let moved_cam = Camera::new(m, 0.8, 48, 40).unwrap();
        let img = render(&moved, &moved_cam, &black).unwrap();
        for (a, b) in img.data.iter().zip(&on_black.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn png_roundtrip_and_clamping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = Image::filled(3, 2, [0.0; 3]);
        write_image(&img, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert!(back.as_raw().iter().all(|&v| v == 0));

        img.data = vec![-0.5, 0.2, 0.5, 1.7, 1.0, 0.999, 0.0, 0.1, 0.3, 0.6, 0.8, 0.9, 0.25, 0.75, 0.05, 0.95, 0.33, 0.67];
        write_image(&img, &path).unwrap();
        let bytes = image::open(&path).unwrap().to_rgb8().into_raw();
        assert_eq!(bytes, img.to_rgb8());
        assert_eq!(&bytes[..6], &[0, 51, 128, 255, 255, 255]);
        let requant = Image {
            width: 3,
            height: 2,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        };
        assert_eq!(requant.to_rgb8(), bytes);
        assert!(write_image(&img, dir.path().join("missing/dir/x.png")).is_err());
    }
}
