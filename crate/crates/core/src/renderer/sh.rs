//! Real spherical-harmonics color evaluation (degrees 0–3).

use crate::cloud_io::{sh_coeffs_per_channel, Vec3};
use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values for `dir` up to `degree`, in coefficient order.
pub fn sh_basis(dir: &Vec3, degree: usize) -> Vec<f64> {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = vec![SH_C0];
    if degree >= 1 {
        b.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]);
    }
    b
}

/// RGB from interleaved coefficients `sh[k*3 + c]`, offset by 0.5 and clamped to [0, 1].
pub fn eval_sh(sh: &[f64], dir: &Vec3, degree: usize) -> Result<[f64; 3]> {
    if degree > 3 {
        return Err(Error::invalid(format!("SH degree {degree} not supported")));
    }
    let needed = sh_coeffs_per_channel(degree) * 3;
    if sh.len() < needed {
        return Err(Error::invalid(format!(
            "SH degree {degree} needs {needed} coefficients, point has {}",
            sh.len()
        )));
    }
    let basis = sh_basis(dir, degree);
    let mut rgb = [0.0; 3];
    for (k, b) in basis.iter().enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += b * sh[k * 3 + c];
        }
    }
    Ok(rgb.map(|v| (v + 0.5).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn dc_constant() {
        assert!((SH_C0 - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-15);
        let rgb = eval_sh(&[0.4, -0.2, 5.0], &Vec3::z(), 0).unwrap();
        assert!((rgb[0] - (0.5 + SH_C0 * 0.4)).abs() < 1e-15);
        assert!((rgb[1] - (0.5 - SH_C0 * 0.2)).abs() < 1e-15);
        assert_eq!(rgb[2], 1.0);
        assert_eq!(eval_sh(&[0.0; 3], &Vec3::x(), 0).unwrap(), [0.5; 3]);
    }

    #[test]
    fn view_dependence() {
        let mut sh = vec![0.0; 12];
        sh[3 * 3] = 0.5; // x-band, red channel
        let a = eval_sh(&sh, &Vec3::x(), 1).unwrap();
        let b = eval_sh(&sh, &-Vec3::x(), 1).unwrap();
        assert!((a[0] - b[0]).abs() > 0.1);
        assert_eq!(eval_sh(&sh, &Vec3::x(), 0).unwrap(), eval_sh(&sh, &-Vec3::x(), 0).unwrap());
    }

    #[test]
    fn basis_is_orthonormal() {
        // Monte-Carlo-free check via a Fibonacci sphere quadrature.
        let n = 20_000;
        let mut gram = vec![vec![0.0; 16]; 16];
        for i in 0..n {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * PI * (3.0 - 5f64.sqrt());
            let b = sh_basis(&Vec3::new(r * phi.cos(), r * phi.sin(), z), 3);
            for a in 0..16 {
                for c in 0..16 {
                    gram[a][c] += b[a] * b[c] * 4.0 * PI / n as f64;
                }
            }
        }
        for a in 0..16 {
            for c in 0..16 {
                let want = if a == c { 1.0 } else { 0.0 };
                assert!((gram[a][c] - want).abs() < 2e-3, "({a},{c}) = {}", gram[a][c]);
            }
        }
    }

    #[test]
    fn insufficient_coefficients() {
        assert!(eval_sh(&[0.0; 3], &Vec3::x(), 1).is_err());
        assert!(eval_sh(&[0.0; 64], &Vec3::x(), 4).is_err());
    }
}
