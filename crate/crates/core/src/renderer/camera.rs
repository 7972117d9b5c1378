use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Pinhole camera. `c2w` follows the NeRF convention (−z forward, +y up).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub c2w: Matrix4<f64>,
    pub fov_x: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(c2w: Matrix4<f64>, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_x > 0.0 && fov_x < std::f64::consts::PI) {
            return Err(Error::Camera(format!("field of view {fov_x} outside (0, π)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Camera(format!("image size {width}×{height}")));
        }
        let r = c2w.fixed_view::<3, 3>(0, 0).into_owned();
        if !c2w.iter().all(|v| v.is_finite()) || r.determinant().abs() < 1e-9 {
            return Err(Error::Camera("transform matrix is not invertible".into()));
        }
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-4 {
            return Err(Error::Camera("rotation block is not orthonormal".into()));
        }
        Ok(Self {
            c2w,
            fov_x,
            width,
            height,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        self.c2w.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World-to-camera rotation in the x-right, y-down, z-forward frame.
    pub fn world_to_camera(&self) -> Matrix3<f64> {
        let r = self.c2w.fixed_view::<3, 3>(0, 0).into_owned();
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        (r * flip).transpose()
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_x).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }
}

#[derive(Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<FrameEntry>,
}

#[derive(Deserialize)]
struct FrameEntry {
    transform_matrix: Vec<Vec<f64>>,
}

pub fn parse_cameras(text: &str, width: usize, height: usize) -> Result<Vec<Camera>> {
    let file: TransformsFile = serde_json::from_str(text).map_err(|e| Error::Camera(e.to_string()))?;
    if file.frames.is_empty() {
        return Err(Error::Camera("no frames".into()));
    }
    file.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let rows = &f.transform_matrix;
            if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
                return Err(Error::Camera(format!("frame {i}: transform_matrix must be 4×4")));
            }
            let m = Matrix4::from_fn(|r, c| rows[r][c]);
            Camera::new(m, file.camera_angle_x, width, height).map_err(|e| Error::Camera(format!("frame {i}: {e}")))
        })
        .collect()
}

pub fn load_cameras(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_looks_down_minus_z() {
        let cams = parse_cameras(
            r#"{"camera_angle_x": 1.5707963267948966,
                "frames": [{"transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#,
            100,
            80,
        )
        .unwrap();
        let cam = &cams[0];
        assert_eq!(cam.center(), Vector3::zeros());
        let w = cam.world_to_camera();
        // world −z maps to camera +z (forward), world +y to camera −y (up)
        assert_eq!(w * Vector3::new(0.0, 0.0, -1.0), Vector3::z());
        assert_eq!(w * Vector3::y(), -Vector3::y());
        assert!((cam.focal() - 50.0).abs() < 1e-12);
        assert_eq!(cam.principal_point(), (50.0, 40.0));
    }

    #[test]
    fn order_preserved() {
        let frame = |x: f64| format!(r#"{{"transform_matrix": [[1,0,0,{x}],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}}"#);
        let text = format!(r#"{{"camera_angle_x": 0.7, "frames": [{}, {}, {}]}}"#, frame(1.0), frame(2.0), frame(3.0));
        let cams = parse_cameras(&text, 10, 10).unwrap();
        assert_eq!(cams.len(), 3);
        for (i, c) in cams.iter().enumerate() {
            assert_eq!(c.center().x, i as f64 + 1.0);
        }
    }

    #[test]
    fn structured_errors() {
        let bad_row = r#"{"camera_angle_x": 0.7, "frames": [{"transform_matrix": [[1,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#;
        assert!(matches!(parse_cameras(bad_row, 10, 10), Err(Error::Camera(m)) if m.contains("4×4")));
        let singular = r#"{"camera_angle_x": 0.7, "frames": [{"transform_matrix": [[0,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#;
        assert!(matches!(parse_cameras(singular, 10, 10), Err(Error::Camera(m)) if m.contains("invertible")));
        let missing = r#"{"frames": []}"#;
        assert!(matches!(parse_cameras(missing, 10, 10), Err(Error::Camera(m)) if m.contains("camera_angle_x")));
        assert!(load_cameras("/nonexistent/transforms.json", 1, 1).is_err());
    }
}
