//! Two-stage Eulerian motion-field estimation.
//!
//! Sparse velocities come from cluster self-similarity: each cluster center
//! moves toward the center of the cluster whose pooled feature is most similar.
//! Ordinary Kriging with a fitted spherical variogram densifies those samples
//! onto every dynamic Gaussian, and an MLP trained on both sets becomes the
//! queryable field.

mod field;
mod kriging;
mod sparse;
mod variogram;

use std::path::Path;

use log::info;

pub use field::{train_field_mlp, MotionField};
pub use kriging::{krige, OrdinaryKriging};
pub use sparse::{most_similar, similarity_matrix, sparse_velocity};
pub use variogram::{
    empirical_variogram, fit_spherical, fit_variogram, Component, EmpiricalVariogram, SphericalVariogram,
    DEFAULT_BINS,
};

use crate::binio::{read_file, Reader, Writer};
use crate::cloud_io::{Aabb, Vec3};
use crate::error::Result;
use crate::features::FeatureSet;
use crate::neural::{TrainConfig, TrainReport};
use crate::supergaussian::{cluster_summary, ClusterSummary, Clustering};

/// Positions with one velocity each. Used for both the sparse (cluster
/// center) and dense (per-Gaussian) fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VelocitySamples {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

pub type SparseVelocityField = VelocitySamples;
pub type DenseVelocityField = VelocitySamples;

impl VelocitySamples {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `count: u32`, then positions and velocities as `count × 3` f32 each.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.u32(self.len() as u32);
        for v in self.positions.iter().chain(&self.velocities) {
            v.iter().for_each(|&c| w.f32(c as f32));
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(&data, path);
        let n = r.u32()? as usize;
        let read = |r: &mut Reader<'_>| -> Result<Vec<Vec3>> {
            (0..n)
                .map(|_| Ok(Vec3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64)))
                .collect()
        };
        let positions = read(&mut r)?;
        let velocities = read(&mut r)?;
        r.finish()?;
        Ok(Self { positions, velocities })
    }
}

#[derive(Debug, Clone)]
pub struct FieldSettings {
    pub hidden: Vec<usize>,
    pub frequencies: usize,
    pub bins: usize,
    pub train: TrainConfig,
}

pub struct FieldEstimate {
    pub summary: ClusterSummary,
    pub sparse: VelocitySamples,
    pub variogram: SphericalVariogram,
    pub dense: VelocitySamples,
    pub field: MotionField,
    pub report: TrainReport,
}

/// Runs the whole estimation from a clustering of the dynamic Gaussians.
pub fn estimate(
    positions: &[Vec3],
    features: &FeatureSet,
    clustering: &Clustering,
    bbox: Aabb,
    settings: &FieldSettings,
) -> Result<FieldEstimate> {
    let summary = cluster_summary(positions, features, clustering)?;
    let s = similarity_matrix(&summary.features)?;
    let sparse = sparse_velocity(&summary.centers, &s)?;
    let variogram = fit_variogram(&sparse, Component::Mean, settings.bins)?;
    info!(
        "variogram: nugget {:.4e} sill {:.4e} range {:.4}",
        variogram.nugget, variogram.sill, variogram.range
    );
    let dense = krige(&sparse, positions, &variogram)?;
    let (field, report) = train_field_mlp(
        &sparse,
        &dense,
        bbox,
        &settings.hidden,
        settings.frequencies,
        &settings.train,
    )?;
    info!("field mlp: mse {:.4e} -> {:.4e}", report.initial_mse, report.final_mse);
    Ok(FieldEstimate {
        summary,
        sparse,
        variogram,
        dense,
        field,
        report,
    })
}
