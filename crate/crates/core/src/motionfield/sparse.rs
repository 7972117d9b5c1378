use nalgebra::DMatrix;

use super::VelocitySamples;
use crate::cloud_io::Vec3;
use crate::error::{Error, Result};

/// Cosine similarity between pooled cluster features (no absolute value).
pub fn similarity_matrix(features: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = features.len();
    if k < 2 {
        return Err(Error::invalid(format!(
            "similarity needs at least two clusters, got {k}"
        )));
    }
    let norms: Vec<f64> = features
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(Error::invalid(format!("cluster feature {i} has zero norm")));
    }
    let mut s = DMatrix::identity(k, k);
    for i in 0..k {
        for j in i + 1..k {
            let dot: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum();
            let v = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Index of the most similar other cluster per row, ties to the lower index.
pub fn most_similar(s: &DMatrix<f64>) -> Vec<usize> {
    (0..s.nrows())
        .map(|i| {
            let mut best: Option<(f64, usize)> = None;
            for j in (0..s.ncols()).filter(|&j| j != i) {
                if best.map_or(true, |(b, _)| s[(i, j)] > b) {
                    best = Some((s[(i, j)], j));
                }
            }
            best.expect("at least two clusters").1
        })
        .collect()
}

/// Moves every cluster center toward its most similar cluster's center.
pub fn sparse_velocity(centers: &[Vec3], s: &DMatrix<f64>) -> Result<VelocitySamples> {
    let k = centers.len();
    if k < 2 {
        return Err(Error::invalid("sparse velocities need at least two clusters"));
    }
    if s.shape() != (k, k) {
        return Err(Error::Dimension {
            expected: k,
            actual: s.nrows(),
        });
    }
    let targets = most_similar(s);
    Ok(VelocitySamples {
        positions: centers.to_vec(),
        velocities: centers
            .iter()
            .zip(&targets)
            .map(|(c, &j)| centers[j] - c)
            .collect(),
    })
}
