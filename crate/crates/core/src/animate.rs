//! Loop-closed animation: Euler integration through the motion field in both
//! time directions, blended so the last frame returns to the first.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cloud_io::{recompose, save_ply, GaussianCloud, Split, Vec3};
use crate::error::{Error, Result};
use crate::motionfield::MotionField;

/// Anything that maps a position to a velocity.
pub trait VelocityField: Sync {
    fn velocity(&self, p: &Vec3) -> Vec3;

    fn velocities(&self, ps: &[Vec3]) -> Vec<Vec3> {
        ps.iter().map(|p| self.velocity(p)).collect()
    }
}

impl VelocityField for MotionField {
    fn velocity(&self, p: &Vec3) -> Vec3 {
        self.query(p)
    }

    fn velocities(&self, ps: &[Vec3]) -> Vec<Vec3> {
        self.query_batch(ps)
    }
}

impl<F: Fn(&Vec3) -> Vec3 + Sync> VelocityField for F {
    fn velocity(&self, p: &Vec3) -> Vec3 {
        self(p)
    }
}

/// ψ = (ω/T)·e^{−h}, componentwise.
pub fn psi(omega: f64, frames: usize, h: &Vec3) -> Result<Vec3> {
    if !(omega > 0.0) {
        return Err(Error::invalid(format!("omega must be positive, got {omega}")));
    }
    if frames < 2 {
        return Err(Error::invalid(format!("need at least 2 frames, got {frames}")));
    }
    Ok(h.map(|v| omega / frames as f64 * (-v).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub omega: f64,
    pub frames: usize,
    pub psi: Vec3,
}

impl LoopConfig {
    pub fn new(omega: f64, frames: usize, h: &Vec3) -> Result<Self> {
        Ok(Self {
            omega,
            frames,
            psi: psi(omega, frames, h)?,
        })
    }
}

fn check_finite(v: &Vec3, point: usize, step: usize, at: &Vec3) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "field returned {v:?} for point {point} at step {step} (position {at:?})"
        )))
    }
}

/// Positions after `0..=steps` Euler steps; `sign` is +1 forward, −1 backward.
fn trajectories(field: &dyn VelocityField, start: &[Vec3], psi: &Vec3, steps: usize, sign: f64) -> Result<Vec<Vec<Vec3>>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(start.to_vec());
    for step in 0..steps {
        let cur = out.last().unwrap();
        let v = field.velocities(cur);
        let mut next = Vec::with_capacity(cur.len());
        for (i, (p, v)) in cur.iter().zip(&v).enumerate() {
            check_finite(v, i, step, p)?;
            next.push(p + sign * psi.component_mul(v));
        }
        out.push(next);
    }
    Ok(out)
}

/// p(τ) = p(τ−1) + ψ ⊙ E(p(τ−1)), iterated `steps` times.
pub fn integrate_forward(field: &dyn VelocityField, p0: &Vec3, psi: &Vec3, steps: usize) -> Result<Vec3> {
    Ok(trajectories(field, &[*p0], psi, steps, 1.0)?.pop().unwrap()[0])
}

/// p(τ−1) = p(τ) − ψ ⊙ E(p(τ)), iterated `steps` times.
pub fn integrate_backward(field: &dyn VelocityField, p0: &Vec3, psi: &Vec3, steps: usize) -> Result<Vec3> {
    Ok(trajectories(field, &[*p0], psi, steps, -1.0)?.pop().unwrap()[0])
}

#[derive(Debug, Clone)]
pub struct FrameSequence {
    /// Full clouds (dynamic and static) for t = 0..T−1.
    pub frames: Vec<GaussianCloud>,
    /// Blended dynamic positions p̂(t) for t = 0..=T; entry T is the closing frame.
    pub dynamic_positions: Vec<Vec<Vec3>>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// max ‖p̂(T) − p̂(0)‖ over dynamic points.
    pub fn loop_closure_error(&self) -> f64 {
        let first = &self.dynamic_positions[0];
        let last = self.dynamic_positions.last().unwrap();
        first.iter().zip(last).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Mean over consecutive frame pairs (closing frame included) and points of ‖p̂(t) − p̂(t−1)‖.
    pub fn mean_frame_displacement(&self) -> f64 {
        let pairs = self.dynamic_positions.windows(2);
        let n = pairs.len() * self.dynamic_positions[0].len();
        let total: f64 = pairs
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).norm()).sum::<f64>())
            .sum();
        total / n as f64
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let path = dir.join(frame_file_name(t));
                save_ply(f, &path)?;
                Ok(path)
            })
            .collect()
    }
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:04}.ply")
}

const CHUNK: usize = 256;

/// Blended positions p̂(t) = α·p(t) + (1−α)·p(t−T), α = 1 − t/T, for t = 0..=T.
pub fn blended_positions(field: &dyn VelocityField, start: &[Vec3], config: &LoopConfig) -> Result<Vec<Vec<Vec3>>> {
    let t_max = config.frames;
    let chunks: Vec<&[Vec3]> = start.chunks(CHUNK).collect();
    let per_chunk = chunks
        .par_iter()
        .map(|chunk| {
            let fwd = trajectories(field, chunk, &config.psi, t_max, 1.0)?;
            let bwd = trajectories(field, chunk, &config.psi, t_max, -1.0)?;
            Ok((0..=t_max)
                .map(|t| {
                    let alpha = 1.0 - t as f64 / t_max as f64;
                    fwd[t]
                        .iter()
                        .zip(&bwd[t_max - t])
                        .map(|(f, b)| if f == b { *f } else { alpha * f + (1.0 - alpha) * b })
                        .collect::<Vec<Vec3>>()
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..=t_max)
        .map(|t| per_chunk.iter().flat_map(|c| c[t].iter().copied()).collect())
        .collect())
}

pub fn loop_frames(split: &Split, field: &dyn VelocityField, config: &LoopConfig) -> Result<FrameSequence> {
    if split.dynamic.is_empty() {
        return Err(Error::Empty("no dynamic points to animate".into()));
    }
    if config.frames < 2 {
        return Err(Error::invalid("need at least 2 frames"));
    }
    let start = split.dynamic.positions();
    let dynamic_positions = blended_positions(field, &start, config)?;
    let frames = dynamic_positions[..config.frames]
        .iter()
        .map(|positions| {
            let mut dynamic = split.dynamic.clone();
            for (p, pos) in dynamic.points.iter_mut().zip(positions) {
                p.position = *pos;
            }
            recompose(&dynamic, &split.fixed, &split.index_map)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence {
        frames,
        dynamic_positions,
    })
}
