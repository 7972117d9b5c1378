use serde::{Deserialize, Serialize};

use super::VelocitySamples;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalVariogram {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl SphericalVariogram {
    pub fn new(nugget: f64, sill: f64, range: f64) -> Result<Self> {
        if !(nugget >= 0.0 && sill >= nugget && range > 0.0) {
            return Err(Error::invalid(format!(
                "invalid spherical variogram nugget={nugget} sill={sill} range={range}"
            )));
        }
        Ok(Self { nugget, sill, range })
    }

    /// γ(0) = 0; the nugget only applies for d > 0.
    pub fn gamma(&self, d: f64) -> f64 {
        if d <= 0.0 {
            0.0
        } else if d <= self.range {
            self.nugget + (self.sill - self.nugget) * spherical_shape(d / self.range)
        } else {
            self.sill
        }
    }
}

fn spherical_shape(r: f64) -> f64 {
    if r >= 1.0 {
        1.0
    } else {
        1.5 * r - 0.5 * r * r * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    X,
    Y,
    Z,
    /// Average of the three per-axis semivariances.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalVariogram {
    /// Mean pair distance in each non-empty bin.
    pub lags: Vec<f64>,
    pub gamma: Vec<f64>,
    pub counts: Vec<usize>,
    pub max_distance: f64,
}

pub fn empirical_variogram(samples: &VelocitySamples, component: Component, bins: usize) -> Result<EmpiricalVariogram> {
    let k = samples.len();
    if k < 3 {
        return Err(Error::invalid(format!("variogram fitting needs at least 3 samples, got {k}")));
    }
    if bins < 4 {
        return Err(Error::invalid(format!("variogram fitting needs at least 4 bins, got {bins}")));
    }
    let p = &samples.positions;
    let v = &samples.velocities;
    let mut max_d = 0.0f64;
    for i in 0..k {
        for j in i + 1..k {
            max_d = max_d.max((p[i] - p[j]).norm());
        }
    }
    if max_d == 0.0 {
        return Err(Error::invalid("all sample positions coincide"));
    }
    let width = max_d / bins as f64;
    let mut sum_d = vec![0.0; bins];
    let mut sum_g = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for i in 0..k {
        for j in i + 1..k {
            let d = (p[i] - p[j]).norm();
            if d == 0.0 {
                continue;
            }
            let diff = v[i] - v[j];
            let g = match component {
                Component::X => 0.5 * diff.x * diff.x,
                Component::Y => 0.5 * diff.y * diff.y,
                Component::Z => 0.5 * diff.z * diff.z,
                Component::Mean => 0.5 * diff.norm_squared() / 3.0,
            };
            let b = ((d / width) as usize).min(bins - 1);
            sum_d[b] += d;
            sum_g[b] += g;
            counts[b] += 1;
        }
    }
    let mut out = EmpiricalVariogram {
        lags: Vec::new(),
        gamma: Vec::new(),
        counts: Vec::new(),
        max_distance: max_d,
    };
    for b in 0..bins {
        if counts[b] > 0 {
            out.lags.push(sum_d[b] / counts[b] as f64);
            out.gamma.push(sum_g[b] / counts[b] as f64);
            out.counts.push(counts[b]);
        }
    }
    Ok(out)
}

/// Best non-negative (nugget, partial sill) for a fixed range and its
/// pair-count-weighted squared error.
fn fit_linear(emp: &EmpiricalVariogram, range: f64) -> (f64, f64, f64) {
    let g: Vec<f64> = emp.lags.iter().map(|d| spherical_shape(d / range)).collect();
    let y = &emp.gamma;
    let w: Vec<f64> = emp.counts.iter().map(|&c| c as f64).collect();
    let sse = |nug: f64, c: f64| -> f64 {
        g.iter().zip(y).zip(&w).map(|((gi, yi), wi)| wi * (nug + c * gi - yi).powi(2)).sum()
    };

    let mut candidates = Vec::with_capacity(4);
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&w).map(|((x, y), wi)| wi * x * y).sum() };
    let ones = vec![1.0; g.len()];
    let (n, sg, sy) = (w.iter().sum::<f64>(), dot(&g, &ones), dot(y, &ones));
    let (sgg, sgy) = (dot(&g, &g), dot(&g, y));
    let det = n * sgg - sg * sg;
    if det.abs() > 1e-12 * n * sgg.max(1e-300) {
        let c = (n * sgy - sg * sy) / det;
        let nug = (sy - c * sg) / n;
        if c >= 0.0 && nug >= 0.0 {
            candidates.push((nug, c));
        }
    }
    if sgg > 0.0 {
        candidates.push((0.0, (sgy / sgg).max(0.0)));
    }
    candidates.push(((sy / n).max(0.0), 0.0));
    candidates.push((0.0, 0.0));
    candidates
        .into_iter()
        .map(|(nug, c)| (nug, c, sse(nug, c)))
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .unwrap()
}

/// Pair-count-weighted least-squares spherical fit: coarse grid over the range, golden-section
/// refinement around the best grid cell, closed-form nugget and sill.
pub fn fit_spherical(emp: &EmpiricalVariogram) -> SphericalVariogram {
    const COARSE: usize = 100;
    let upper = 2.0 * emp.max_distance;
    let step = upper / COARSE as f64;
    let mut best = (1usize, f64::INFINITY);
    for i in 1..=COARSE {
        let sse = fit_linear(emp, step * i as f64).2;
        if sse < best.1 {
            best = (i, sse);
        }
    }
    let mut lo = step * (best.0 as f64 - 1.0).max(1e-3);
    let mut hi = (step * (best.0 + 1) as f64).min(upper);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = fit_linear(emp, x1).2;
    let mut f2 = fit_linear(emp, x2).2;
    for _ in 0..60 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = fit_linear(emp, x1).2;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = fit_linear(emp, x2).2;
        }
    }
    let refined = 0.5 * (lo + hi);
    let coarse_range = step * best.0 as f64;
    let range = if fit_linear(emp, refined).2 <= best.1 { refined } else { coarse_range };
    let (nugget, c, _) = fit_linear(emp, range);
    SphericalVariogram {
        nugget,
        sill: nugget + c,
        range,
    }
}

pub fn fit_variogram(samples: &VelocitySamples, component: Component, bins: usize) -> Result<SphericalVariogram> {
    Ok(fit_spherical(&empirical_variogram(samples, component, bins)?))
}
