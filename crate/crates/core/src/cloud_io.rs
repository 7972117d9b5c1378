//! Gaussian point clouds: PLY I/O in the 3D-GS checkpoint layout, masks,
//! static/dynamic separation, bounding boxes and the eccentricity measure.
//!
//! Values are held post-activation in `f64`. The PLY file stores
//! pre-activation `f32` values (log-scale, logit-opacity), so a
//! `save -> load -> save` cycle reproduces the file bytes exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Number of SH coefficients per channel for a given degree.
pub fn sh_coeffs_per_channel(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    pub position: Vec3,
    /// Unit quaternion stored as (w, x, y, z).
    pub rotation: [f64; 4],
    /// Per-axis standard deviations, strictly positive.
    pub scale: Vec3,
    /// Opacity in [0, 1].
    pub opacity: f64,
    /// SH coefficients, coefficient-major: `sh[k * 3 + channel]`, `k = 0` is the DC band.
    pub sh: Vec<f64>,
}

impl GaussianPoint {
    pub fn new(position: Vec3, scale: Vec3, opacity: f64, dc: [f64; 3]) -> Self {
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale,
            opacity,
            sh: dc.to_vec(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix().into_inner()
    }

    /// Σ = R S Sᵀ Rᵀ.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let m = r * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }

    pub fn dc(&self) -> [f64; 3] {
        [self.sh[0], self.sh[1], self.sh[2]]
    }

    /// 1 − min²(s)/max²(s)
    pub fn eccentricity(&self) -> f64 {
        let lo = self.scale.min();
        let hi = self.scale.max();
        1.0 - (lo * lo) / (hi * hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub points: Vec<GaussianPoint>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(points: Vec<GaussianPoint>, sh_degree: usize) -> Self {
        Self { points, sh_degree }
    }

    pub fn empty(sh_degree: usize) -> Self {
        Self {
            points: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.position).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut bb = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            bb.min = bb.min.inf(p);
            bb.max = bb.max.sup(p);
        }
        Some(bb)
    }

    /// Side lengths h = max − min.
    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

pub fn bbox(cloud: &GaussianCloud) -> Result<Aabb> {
    Aabb::from_points(cloud.points.iter().map(|p| &p.position))
        .ok_or_else(|| Error::Empty("bounding box of an empty cloud".into()))
}

// ---------------------------------------------------------------------------
// PLY

const BASE_HEAD: [&str; 3] = ["x", "y", "z"];
const NORMALS: [&str; 3] = ["nx", "ny", "nz"];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expected_tail(n_rest: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..3).map(|i| format!("f_dc_{i}")).collect();
    names.extend((0..n_rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

struct Layout {
    count: usize,
    has_normals: bool,
    sh_degree: usize,
    n_props: usize,
}

fn ply_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Ply {
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Layout, usize)> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ply_err(start, "unterminated header line"))?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| ply_err(start, "header is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(ply_err(off, format!("bad magic {magic:?}, expected \"ply\"")));
    }

    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut saw_format = false;
    loop {
        let (off, line) = next_line(&mut pos)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => saw_format = true,
            ["format", other @ ..] => {
                return Err(ply_err(off, format!("unsupported format {:?}", other.join(" "))))
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(ply_err(off, "duplicate vertex element"));
                }
                count = Some(
                    n.parse()
                        .map_err(|_| ply_err(off, format!("bad vertex count {n:?}")))?,
                );
            }
            ["element", name, _] => {
                return Err(ply_err(off, format!("unsupported element {name:?}")))
            }
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(ply_err(off, "property before element vertex"));
                }
                if *ty != "float" && *ty != "float32" {
                    return Err(ply_err(off, format!("property {name} has type {ty}, expected float")));
                }
                props.push(name.to_string());
            }
            _ => return Err(ply_err(off, format!("unrecognized header line {line:?}"))),
        }
    }
    if !saw_format {
        return Err(ply_err(0, "missing format line"));
    }
    let count = count.ok_or_else(|| ply_err(0, "missing element vertex"))?;

    if props.len() < 3 || props[..3] != BASE_HEAD {
        return Err(ply_err(0, format!("unknown property set {props:?}")));
    }
    let has_normals = props.len() >= 6 && props[3..6] == NORMALS;
    let tail = &props[if has_normals { 6 } else { 3 }..];
    let sh_degree = (0..=3usize)
        .find(|&d| {
            let n_rest = 3 * (sh_coeffs_per_channel(d) - 1);
            tail == expected_tail(n_rest).as_slice()
        })
        .ok_or_else(|| ply_err(0, format!("unknown property set {props:?}")))?;

    Ok((
        Layout {
            count,
            has_normals,
            sh_degree,
            n_props: props.len(),
        },
        pos,
    ))
}

/// Parses a binary little-endian 3D-GS PLY held in memory.
pub fn parse_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let (layout, body) = parse_header(bytes)?;
    let stride = layout.n_props * 4;
    let need = layout.count * stride;
    if bytes.len() - body < need {
        return Err(ply_err(
            bytes.len(),
            format!(
                "truncated payload: {} vertices need {} bytes, found {}",
                layout.count,
                need,
                bytes.len() - body
            ),
        ));
    }
    if bytes.len() - body > need {
        return Err(ply_err(body + need, "trailing bytes after vertex data"));
    }

    let per_channel = sh_coeffs_per_channel(layout.sh_degree);
    let n_rest = per_channel - 1;
    let mut points = Vec::with_capacity(layout.count);
    let mut row = vec![0f32; layout.n_props];
    for i in 0..layout.count {
        let base = body + i * stride;
        for (j, v) in row.iter_mut().enumerate() {
            let o = base + j * 4;
            *v = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        }
        let f = |k: usize| row[k] as f64;
        let mut k = if layout.has_normals { 6 } else { 3 };

        let mut sh = vec![0.0; per_channel * 3];
        for c in 0..3 {
            sh[c] = f(k + c);
        }
        k += 3;
        for c in 0..3 {
            for r in 0..n_rest {
                sh[(r + 1) * 3 + c] = f(k + c * n_rest + r);
            }
        }
        k += 3 * n_rest;
        let opacity = sigmoid(f(k));
        k += 1;
        let scale = Vec3::new(f(k).exp(), f(k + 1).exp(), f(k + 2).exp());
        k += 3;
        let mut rotation = [f(k), f(k + 1), f(k + 2), f(k + 3)];
        let n2: f64 = rotation.iter().map(|v| v * v).sum();
        if n2 == 0.0 || !n2.is_finite() {
            return Err(ply_err(base + k * 4, format!("vertex {i} has a degenerate quaternion")));
        }
        // leave quaternions that are already unit to f32 precision untouched so
        // that save/load cycles stay bitwise stable
        if (n2 - 1.0).abs() > 1e-6 {
            let n = n2.sqrt();
            rotation.iter_mut().for_each(|v| *v /= n);
        }
        points.push(GaussianPoint {
            position: Vec3::new(f(0), f(1), f(2)),
            rotation,
            scale,
            opacity,
            sh,
        });
    }
    Ok(GaussianCloud {
        points,
        sh_degree: layout.sh_degree,
    })
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Serializes a cloud to PLY bytes, applying the inverse activations.
pub fn encode_ply(cloud: &GaussianCloud) -> Result<Vec<u8>> {
    let per_channel = sh_coeffs_per_channel(cloud.sh_degree);
    let n_rest = per_channel - 1;
    let mut names: Vec<String> = BASE_HEAD.iter().chain(NORMALS.iter()).map(|s| s.to_string()).collect();
    names.extend(expected_tail(3 * n_rest));

    let mut out = Vec::with_capacity(256 + cloud.len() * names.len() * 4);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.len()
    )
    .unwrap();
    for n in &names {
        writeln!(out, "property float {n}").unwrap();
    }
    out.extend_from_slice(b"end_header\n");

    let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for (i, p) in cloud.points.iter().enumerate() {
        if p.sh.len() != per_channel * 3 {
            return Err(Error::invalid(format!(
                "point {i} has {} SH coefficients, degree {} needs {}",
                p.sh.len(),
                cloud.sh_degree,
                per_channel * 3
            )));
        }
        p.position.iter().for_each(|&v| push(v));
        (0..3).for_each(|_| push(0.0));
        (0..3).for_each(|c| push(p.sh[c]));
        for c in 0..3 {
            for r in 0..n_rest {
                push(p.sh[(r + 1) * 3 + c]);
            }
        }
        push(logit(p.opacity));
        p.scale.iter().for_each(|&s| push(s.ln()));
        p.rotation.iter().for_each(|&q| push(q));
    }
    Ok(out)
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if cloud.is_empty() {
        return Err(Error::Empty("refusing to save an empty cloud".into()));
    }
    let bytes = encode_ply(cloud)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// masks and separation

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_text(&self) -> String {
        self.bits.iter().map(|&b| if b { "1\n" } else { "0\n" }).collect()
    }
}

pub fn parse_mask(text: &str, n: usize) -> Result<Mask> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let tokens: Vec<&str> = if body.is_empty() { Vec::new() } else { body.split('\n').collect() };
    if tokens.len() != n {
        return Err(Error::Mask(format!(
            "mask has {} entries but the cloud has {n} points",
            tokens.len()
        )));
    }
    let bits = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| match t.trim_end_matches('\r') {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Mask(format!("line {}: expected 0 or 1, got {other:?}", i + 1))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Mask { bits })
}

pub fn load_mask(path: impl AsRef<Path>, n: usize) -> Result<Mask> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mask(&text, n)
}

/// Original indices of the dynamic and static partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub dynamic: Vec<usize>,
    pub fixed: Vec<usize>,
}

impl IndexMap {
    pub fn total(&self) -> usize {
        self.dynamic.len() + self.fixed.len()
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub dynamic: GaussianCloud,
    pub fixed: GaussianCloud,
    pub index_map: IndexMap,
}

pub fn split(cloud: &GaussianCloud, mask: &Mask) -> Result<Split> {
    if mask.len() != cloud.len() {
        return Err(Error::Dimension {
            expected: cloud.len(),
            actual: mask.len(),
        });
    }
    let mut dynamic = GaussianCloud::empty(cloud.sh_degree);
    let mut fixed = GaussianCloud::empty(cloud.sh_degree);
    let mut map = IndexMap {
        dynamic: Vec::new(),
        fixed: Vec::new(),
    };
    for (i, (p, &m)) in cloud.points.iter().zip(&mask.bits).enumerate() {
        if m {
            dynamic.points.push(p.clone());
            map.dynamic.push(i);
        } else {
            fixed.points.push(p.clone());
            map.fixed.push(i);
        }
    }
    Ok(Split {
        dynamic,
        fixed,
        index_map: map,
    })
}

/// Inverse of [`split`].
pub fn recompose(dynamic: &GaussianCloud, fixed: &GaussianCloud, map: &IndexMap) -> Result<GaussianCloud> {
    if dynamic.len() != map.dynamic.len() || fixed.len() != map.fixed.len() {
        return Err(Error::invalid("index map does not match partition sizes"));
    }
    let n = map.total();
    let mut slots: Vec<Option<GaussianPoint>> = vec![None; n];
    for (p, &i) in dynamic.points.iter().zip(&map.dynamic).chain(fixed.points.iter().zip(&map.fixed)) {
        let slot = slots
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("index {i} out of range {n}")))?;
        if slot.is_some() {
            return Err(Error::invalid(format!("index {i} appears twice")));
        }
        *slot = Some(p.clone());
    }
    Ok(GaussianCloud {
        points: slots.into_iter().map(|p| p.expect("partition covers all indices")).collect(),
        sh_degree: dynamic.sh_degree.max(fixed.sh_degree),
    })
}

// ---------------------------------------------------------------------------
// eccentricity

pub fn eccentricity_loss(cloud: &GaussianCloud) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::Empty("eccentricity of an empty cloud".into()));
    }
    let mut sum = 0.0;
    for (i, p) in cloud.points.iter().enumerate() {
        if p.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("point {i} has non-positive scale {:?}", p.scale)));
        }
        sum += p.eccentricity();
    }
    Ok(sum / cloud.len() as f64)
}

/// Raises every axis below `ratio_min · max(s)` to that value.
pub fn clamp_eccentricity(cloud: &GaussianCloud, ratio_min: f64) -> Result<GaussianCloud> {
    if !(ratio_min > 0.0 && ratio_min <= 1.0) {
        return Err(Error::invalid(format!("ratio_min must lie in (0, 1], got {ratio_min}")));
    }
    let mut out = cloud.clone();
    for p in &mut out.points {
        let floor = ratio_min * p.scale.max();
        p.scale.iter_mut().for_each(|s| {
            if *s < floor {
                *s = floor;
            }
        });
    }
    Ok(out)
}
