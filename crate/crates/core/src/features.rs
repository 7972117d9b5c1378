//! Per-Gaussian feature vectors for clustering and cluster similarity.
//!
//! The learned backend is a per-point autoencoder over a 14-value attribute
//! vector (normalized position, standardized log-scale, quaternion, opacity,
//! DC color). The handcrafted backend uses the attribute vector directly.

use std::path::Path;

use log::debug;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::cloud_io::{bbox, Aabb, GaussianCloud, GaussianPoint};
use crate::error::{Error, Result};
use crate::neural::{Activation, Mlp, TrainConfig, TrainReport};
use crate::renderer::sh::SH_C0;

pub const ATTRIBUTE_DIM: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureBackend {
    Autoencoder,
    Handcrafted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.u32(self.vectors.len() as u32);
        w.u32(self.dim as u32);
        for v in &self.vectors {
            v.iter().for_each(|&x| w.f32(x as f32));
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(&data, path);
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(r.err("feature dimension is zero"));
        }
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let v = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(r.err("non-finite feature value"));
            }
            vectors.push(v);
        }
        r.finish()?;
        Ok(Self { dim, vectors })
    }
}

/// Normalization constants derived from the cloud the features are built for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCtx {
    pub bbox: Aabb,
    pub log_scale_mean: [f64; 3],
    pub log_scale_std: [f64; 3],
}

impl NormCtx {
    pub fn from_cloud(cloud: &GaussianCloud) -> Result<Self> {
        let bbox = bbox(cloud)?;
        let n = cloud.len() as f64;
        let mut mean = [0.0; 3];
        for p in &cloud.points {
            for a in 0..3 {
                mean[a] += p.scale[a].ln() / n;
            }
        }
        let mut var = [0.0; 3];
        for p in &cloud.points {
            for a in 0..3 {
                var[a] += (p.scale[a].ln() - mean[a]).powi(2) / n;
            }
        }
        Ok(Self {
            bbox,
            log_scale_mean: mean,
            log_scale_std: var.map(f64::sqrt),
        })
    }
}

pub fn attribute_vector(point: &GaussianPoint, ctx: &NormCtx) -> [f64; ATTRIBUTE_DIM] {
    let mut v = [0.0; ATTRIBUTE_DIM];
    let h = ctx.bbox.extent();
    for a in 0..3 {
        v[a] = if h[a] > 0.0 {
            2.0 * (point.position[a] - ctx.bbox.min[a]) / h[a] - 1.0
        } else {
            0.0
        };
        let std = if ctx.log_scale_std[a] > 0.0 { ctx.log_scale_std[a] } else { 1.0 };
        v[3 + a] = (point.scale[a].ln() - ctx.log_scale_mean[a]) / std;
    }
    // q and -q are the same rotation
    let sign = if point.rotation[0] < 0.0 { -1.0 } else { 1.0 };
    for k in 0..4 {
        v[6 + k] = sign * point.rotation[k];
    }
    v[10] = point.opacity;
    for c in 0..3 {
        v[11 + c] = 0.5 + SH_C0 * point.sh[c];
    }
    v
}

fn finalize(mut vectors: Vec<Vec<f64>>, dim: usize) -> Result<FeatureSet> {
    for (i, v) in vectors.iter_mut().enumerate() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("feature {i} is not finite")));
        }
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1e-8;
        }
    }
    Ok(FeatureSet { dim, vectors })
}

pub fn handcrafted_features(cloud: &GaussianCloud) -> Result<FeatureSet> {
    let ctx = NormCtx::from_cloud(cloud)?;
    let vectors = cloud.points.iter().map(|p| attribute_vector(p, &ctx).to_vec()).collect();
    finalize(vectors, ATTRIBUTE_DIM)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub norm_ctx: NormCtx,
}

impl Autoencoder {
    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn reconstruction_mse(&self, cloud: &GaussianCloud) -> f64 {
        let x = attribute_matrix(cloud, &self.norm_ctx);
        let y = self.decoder.forward_batch(&self.encoder.forward_batch(&x));
        (y - &x).norm_squared() / x.len() as f64
    }
}

fn attribute_matrix(cloud: &GaussianCloud, ctx: &NormCtx) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(ATTRIBUTE_DIM, cloud.len());
    for (j, p) in cloud.points.iter().enumerate() {
        x.column_mut(j).copy_from_slice(&attribute_vector(p, ctx));
    }
    x
}

/// Mean per-component variance of the attribute vectors: the reconstruction
/// error of the best constant predictor.
pub fn attribute_variance(cloud: &GaussianCloud) -> Result<f64> {
    let ctx = NormCtx::from_cloud(cloud)?;
    let x = attribute_matrix(cloud, &ctx);
    let n = x.ncols() as f64;
    let mut total = 0.0;
    for row in x.row_iter() {
        let mean = row.sum() / n;
        total += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total / ATTRIBUTE_DIM as f64)
}

/// Trains encoder `14 → 64 → 32 → feature_dim` jointly with its mirrored decoder.
pub fn train_autoencoder(
    cloud: &GaussianCloud,
    feature_dim: usize,
    config: &TrainConfig,
) -> Result<(Autoencoder, TrainReport)> {
    if cloud.is_empty() {
        return Err(Error::Empty("cannot train an autoencoder on an empty cloud".into()));
    }
    if feature_dim < 2 {
        return Err(Error::invalid(format!("feature_dim must be >= 2, got {feature_dim}")));
    }
    let ctx = NormCtx::from_cloud(cloud)?;
    let x = attribute_matrix(cloud, &ctx);
    use Activation::{Identity, Relu};
    let sizes = [ATTRIBUTE_DIM, 64, 32, feature_dim, 32, 64, ATTRIBUTE_DIM];
    let mut net = Mlp::with_activations(&sizes, vec![Relu, Relu, Identity, Relu, Relu, Identity], config.seed)?;
    let report = net.train_matrix(&x, &x, config)?;
    debug!(
        "autoencoder: mse {:.4e} -> {:.4e} over {} epochs",
        report.initial_mse,
        report.final_mse,
        report.epoch_mse.len()
    );
    let (encoder, decoder) = net.split_at(3);
    Ok((
        Autoencoder {
            encoder,
            decoder,
            norm_ctx: ctx,
        },
        report,
    ))
}

pub fn encode(ae: &Autoencoder, cloud: &GaussianCloud) -> Result<FeatureSet> {
    let x = attribute_matrix(cloud, &ae.norm_ctx);
    let y = ae.encoder.forward_batch(&x);
    let vectors = y.column_iter().map(|c| c.iter().copied().collect()).collect();
    finalize(vectors, ae.feature_dim())
}
