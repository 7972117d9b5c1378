//! Cacheable stages: features → cluster → field → animate → render.
//!
//! Every stage reads its upstream artifacts from disk, so a full pipeline run
//! and a stage-by-stage run produce identical bytes. A stage is skipped when
//! its manifest key (inputs, upstream artifacts and relevant config) matches
//! and its recorded outputs are intact.

pub mod cache;
pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;
use serde_json::json;

pub use cache::{Manifest, OutputLock};
pub use config::{PipelineConfig, Seeds};

use crate::animate::{loop_frames, LoopConfig};
use crate::cloud_io::{bbox, eccentricity_loss, load_mask, load_ply, split, Aabb, GaussianCloud, Split, Vec3};
use crate::error::{Error, Result};
use crate::features::{encode, handcrafted_features, train_autoencoder, FeatureBackend, FeatureSet};
use crate::motionfield::{estimate, FieldSettings, MotionField};
use crate::renderer::{load_cameras, render, render_file_name, write_image, RenderOptions};
use crate::supergaussian::{cluster, voxelize, ClusterParams, Clustering};
use cache::{read_manifest, KeyBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Features,
    Cluster,
    Field,
    Animate,
    Render,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Features, Stage::Cluster, Stage::Field, Stage::Animate, Stage::Render];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Features => "features",
            Stage::Cluster => "cluster",
            Stage::Field => "field",
            Stage::Animate => "animate",
            Stage::Render => "render",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Features => &[],
            Stage::Cluster => &[Stage::Features],
            Stage::Field => &[Stage::Features, Stage::Cluster],
            Stage::Animate => &[Stage::Field],
            Stage::Render => &[Stage::Animate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageStatus {
    Cached,
    Ran(Duration),
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageStatus::Cached => f.write_str("cached"),
            StageStatus::Ran(d) => write!(f, "done in {:.2}s", d.as_secs_f64()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Error,
    },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Stage { .. } => 3,
        }
    }

    fn at(stage: Stage) -> impl FnOnce(Error) -> Failure {
        move |source| match source {
            Error::Config(_) => Failure::Config(source),
            source => Failure::Stage { stage, source },
        }
    }
}

/// The input cloud, its mask split and the full-scene box.
struct Scene {
    split: Split,
    scene_box: Aabb,
}

impl Scene {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        let cloud = load_ply(&cfg.input_ply)?;
        let mask = load_mask(cfg.mask_path()?, cloud.len())?;
        let scene_box = bbox(&cloud)?;
        let split = split(&cloud, &mask)?;
        if split.dynamic.is_empty() {
            return Err(Error::Empty("mask selects no dynamic points".into()));
        }
        Ok(Self { split, scene_box })
    }

    fn h(&self) -> Vec3 {
        self.scene_box.extent()
    }

    fn resolution(&self, lambda: f64) -> f64 {
        lambda * self.h().max()
    }

    fn dynamic_positions(&self) -> Vec<Vec3> {
        self.split.dynamic.positions()
    }
}

fn cache_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("cache")
}

fn features_path(cfg: &PipelineConfig) -> PathBuf {
    cache_dir(cfg).join("features.bin")
}

fn clustering_path(cfg: &PipelineConfig) -> PathBuf {
    cache_dir(cfg).join("clustering.bin")
}

fn field_path(cfg: &PipelineConfig) -> PathBuf {
    cache_dir(cfg).join("field.bin")
}

fn frames_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("frames")
}

fn renders_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("renders")
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn recreate_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    mkdir(dir)
}

/// Verified upstream manifests, or an error naming the missing prerequisite.
fn upstream_manifests(stage: Stage, cfg: &PipelineConfig) -> Result<Vec<Manifest>> {
    stage
        .upstream()
        .iter()
        .map(|up| {
            read_manifest(&cfg.output_dir, up.name())
                .filter(|m| m.outputs_intact(&cfg.output_dir))
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "missing or invalid `{up}` artifacts in {}; run the `{up}` stage before `{stage}`",
                        cfg.output_dir.display()
                    ))
                })
        })
        .collect()
}

fn stage_key(stage: Stage, cfg: &PipelineConfig, upstream: &[Manifest]) -> Result<String> {
    let mut key = KeyBuilder::default().text("stage", stage.name());
    for m in upstream {
        key = key.json(&m.stage, &m.outputs);
    }
    key = match stage {
        Stage::Features => key
            .file("input", &cfg.input_ply)?
            .file("mask", cfg.mask_path()?)?
            .json(
                "config",
                &json!([cfg.feature_backend, cfg.feature_dim, cfg.autoencoder_train, cfg.seeds.features]),
            ),
        Stage::Cluster => key
            .file("input", &cfg.input_ply)?
            .file("mask", cfg.mask_path()?)?
            .json("config", &json!([cfg.lambda, cfg.mu, cfg.cluster_iterations, cfg.seeds.cluster])),
        Stage::Field => key.file("input", &cfg.input_ply)?.file("mask", cfg.mask_path()?)?.json(
            "config",
            &json!([cfg.hidden, cfg.pe_frequencies, cfg.variogram_bins, cfg.field_train, cfg.seeds.field]),
        ),
        Stage::Animate => key
            .file("input", &cfg.input_ply)?
            .file("mask", cfg.mask_path()?)?
            .json("config", &json!([cfg.omega, cfg.frames, cfg.psi_override])),
        Stage::Render => key
            .file("cameras", cfg.cameras_path()?)?
            .json("config", &json!([cfg.resolution, cfg.sh_degree_render, cfg.background])),
    };
    Ok(key.finish())
}

fn run_features(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let scene = Scene::load(cfg)?;
    let dynamic = &scene.split.dynamic;
    let features = match cfg.feature_backend {
        FeatureBackend::Handcrafted => handcrafted_features(dynamic)?,
        FeatureBackend::Autoencoder => {
            let train = crate::neural::TrainConfig {
                seed: cfg.seeds.features,
                ..cfg.autoencoder_train
            };
            let (ae, report) = train_autoencoder(dynamic, cfg.feature_dim, &train)?;
            info!(
                "autoencoder reconstruction mse {:.4e} -> {:.4e}",
                report.initial_mse, report.final_mse
            );
            encode(&ae, dynamic)?
        }
    };
    let path = features_path(cfg);
    features.save(&path)?;
    Ok(vec![path])
}

fn run_cluster(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let scene = Scene::load(cfg)?;
    let features = FeatureSet::load(&features_path(cfg))?;
    let params = ClusterParams {
        resolution: scene.resolution(cfg.lambda),
        mu: cfg.mu,
        iterations: cfg.cluster_iterations,
        seed: cfg.seeds.cluster,
    };
    let clustering = cluster(&scene.dynamic_positions(), &features, &params)?;
    info!("{} SuperGaussians at R = {:.4}", clustering.k, params.resolution);
    let path = clustering_path(cfg);
    clustering.save(&path)?;
    Ok(vec![path])
}

fn run_field(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let scene = Scene::load(cfg)?;
    let positions = scene.dynamic_positions();
    let features = FeatureSet::load(&features_path(cfg))?;
    let clustering = Clustering::load(&clustering_path(cfg))?;
    let dynamic_box = bbox(&scene.split.dynamic)?;
    let settings = FieldSettings {
        hidden: cfg.hidden.clone(),
        frequencies: cfg.pe_frequencies,
        bins: cfg.variogram_bins,
        train: crate::neural::TrainConfig {
            seed: cfg.seeds.field,
            ..cfg.field_train
        },
    };
    let est = estimate(&positions, &features, &clustering, dynamic_box, &settings)?;
    let dir = cache_dir(cfg);
    let paths = [
        dir.join("sparse.bin"),
        dir.join("dense.bin"),
        dir.join("variogram.json"),
        field_path(cfg),
    ];
    est.sparse.save(&paths[0])?;
    est.dense.save(&paths[1])?;
    let vg = serde_json::to_string_pretty(&est.variogram).expect("variogram serializes");
    fs::write(&paths[2], vg).map_err(|e| Error::io(&paths[2], e))?;
    est.field.save(&paths[3])?;
    Ok(paths.to_vec())
}

fn loop_config(cfg: &PipelineConfig, scene: &Scene) -> Result<LoopConfig> {
    cfg.warn_overrides();
    let mut lc = LoopConfig::new(cfg.omega, cfg.frames, &scene.h())?;
    if let Some(psi) = cfg.psi_override {
        lc.psi = Vec3::from(psi);
    }
    info!("psi = ({:.4e}, {:.4e}, {:.4e})", lc.psi.x, lc.psi.y, lc.psi.z);
    Ok(lc)
}

fn run_animate(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let scene = Scene::load(cfg)?;
    let field = MotionField::load(&field_path(cfg))?;
    let lc = loop_config(cfg, &scene)?;
    let seq = loop_frames(&scene.split, &field, &lc)?;
    info!(
        "loop closure error {:.3e}, mean frame displacement {:.4e}",
        seq.loop_closure_error(),
        seq.mean_frame_displacement()
    );
    let dir = frames_dir(cfg);
    recreate_dir(&dir)?;
    seq.save(&dir)
}

fn run_render(cfg: &PipelineConfig, animate: &Manifest) -> Result<Vec<PathBuf>> {
    let [width, height] = cfg.resolution;
    let cameras = load_cameras(cfg.cameras_path()?, width, height)?;
    let frames = animate.paths(&cfg.output_dir);
    let options = RenderOptions {
        background: cfg.background,
        sh_degree: cfg.sh_degree_render,
    };
    let dir = renders_dir(cfg);
    recreate_dir(&dir)?;
    let mut out = Vec::with_capacity(frames.len() * cameras.len());
    for (t, frame) in frames.iter().enumerate() {
        let cloud = load_ply(frame)?;
        for (v, camera) in cameras.iter().enumerate() {
            let path = dir.join(render_file_name(v, t));
            write_image(&render(&cloud, camera, &options)?, &path)?;
            out.push(path);
        }
    }
    Ok(out)
}

fn execute(stage: Stage, cfg: &PipelineConfig) -> Result<StageStatus> {
    let upstream = upstream_manifests(stage, cfg)?;
    let key = stage_key(stage, cfg, &upstream)?;
    let previous = read_manifest(&cfg.output_dir, stage.name());
    if let Some(m) = &previous {
        if m.key == key && m.outputs_intact(&cfg.output_dir) {
            return Ok(StageStatus::Cached);
        }
        m.remove(&cfg.output_dir);
    }
    let start = Instant::now();
    mkdir(&cache_dir(cfg))?;
    let outputs = match stage {
        Stage::Features => run_features(cfg)?,
        Stage::Cluster => run_cluster(cfg)?,
        Stage::Field => run_field(cfg)?,
        Stage::Animate => run_animate(cfg)?,
        Stage::Render => run_render(cfg, &upstream[0])?,
    };
    Manifest::build(&cfg.output_dir, stage.name(), key, &outputs)?.write(&cfg.output_dir)?;
    Ok(StageStatus::Ran(start.elapsed()))
}

/// Runs one stage; its upstream artifacts must already exist.
pub fn cmd_stage(stage: Stage, cfg: &PipelineConfig) -> std::result::Result<StageStatus, Failure> {
    cfg.validate().map_err(Failure::Config)?;
    let _lock = OutputLock::acquire(&cfg.output_dir).map_err(Failure::at(stage))?;
    let status = execute(stage, cfg).map_err(Failure::at(stage))?;
    info!("{stage}: {status}");
    Ok(status)
}

/// Runs every stage in order, skipping those whose cache is valid.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> std::result::Result<Vec<(Stage, StageStatus)>, Failure> {
    cfg.validate().map_err(Failure::Config)?;
    let _lock = OutputLock::acquire(&cfg.output_dir).map_err(Failure::at(Stage::Features))?;
    Stage::ALL
        .iter()
        .map(|&stage| {
            let status = execute(stage, cfg).map_err(Failure::at(stage))?;
            info!("{stage}: {status}");
            Ok((stage, status))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub points: usize,
    pub h: Vec3,
    pub eccentricity_loss: f64,
    pub dynamic_points: usize,
    pub mask_coverage: f64,
    pub lambda: f64,
    pub resolution: f64,
    pub voxels: usize,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "points:            {}", self.points)?;
        writeln!(f, "bbox h:            ({:.6}, {:.6}, {:.6})", self.h.x, self.h.y, self.h.z)?;
        writeln!(f, "eccentricity loss: {:.6}", self.eccentricity_loss)?;
        writeln!(
            f,
            "mask coverage:     {:.4} ({} dynamic)",
            self.mask_coverage, self.dynamic_points
        )?;
        write!(
            f,
            "voxels:            {} non-empty at R = {} * max(h) = {:.6}",
            self.voxels, self.lambda, self.resolution
        )
    }
}

pub fn check_scene(cloud: &GaussianCloud, mask_bits: &[bool], lambda: f64) -> Result<CheckReport> {
    let h = bbox(cloud)?.extent();
    let resolution = lambda * h.max();
    let dynamic: Vec<Vec3> = cloud
        .points
        .iter()
        .zip(mask_bits)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p.position)
        .collect();
    let voxels = if dynamic.is_empty() {
        0
    } else {
        voxelize(&dynamic, resolution)?.non_empty()
    };
    Ok(CheckReport {
        points: cloud.len(),
        h,
        eccentricity_loss: eccentricity_loss(cloud)?,
        dynamic_points: dynamic.len(),
        mask_coverage: dynamic.len() as f64 / cloud.len() as f64,
        lambda,
        resolution,
        voxels,
    })
}

pub fn cmd_check(cfg: &PipelineConfig) -> std::result::Result<CheckReport, Failure> {
    cfg.validate().map_err(Failure::Config)?;
    let mask_path = cfg.mask_path().map_err(Failure::Config)?;
    let run = || -> Result<CheckReport> {
        let cloud = load_ply(&cfg.input_ply)?;
        let mask = load_mask(mask_path, cloud.len())?;
        check_scene(&cloud, &mask.bits, cfg.lambda)
    };
    run().map_err(|source| Failure::Stage {
        stage: Stage::Features,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_graph() {
        assert_eq!(Stage::ALL.map(|s| s.name()), ["features", "cluster", "field", "animate", "render"]);
        for (i, s) in Stage::ALL.iter().enumerate() {
            assert!(s.upstream().iter().all(|u| Stage::ALL[..i].contains(u)));
        }
    }

    #[test]
    fn failure_exit_codes() {
        assert_eq!(Failure::Config(Error::Config("x".into())).exit_code(), 2);
        let f = Failure::at(Stage::Render)(Error::invalid("boom"));
        assert_eq!(f.exit_code(), 3);
        assert!(f.to_string().contains("render"));
        assert_eq!(Failure::at(Stage::Cluster)(Error::Config("m".into())).exit_code(), 2);
    }

    #[test]
    fn check_report_fields() {
        let cloud = crate::synthetic::random_cloud(50, 0, 3);
        let bits: Vec<bool> = (0..50).map(|i| i < 20).collect();
        let r = check_scene(&cloud, &bits, 0.04).unwrap();
        assert_eq!(r.points, 50);
        assert_eq!(r.dynamic_points, 20);
        assert!((r.mask_coverage - 0.4).abs() < 1e-15);
        assert_eq!(r.resolution, 0.04 * r.h.max());
        assert!(r.voxels >= 1 && r.voxels <= 20);
        assert!((0.0..1.0).contains(&r.eccentricity_loss));
        let text = r.to_string();
        for field in ["points", "bbox h", "eccentricity", "mask coverage", "voxels"] {
            assert!(text.contains(field));
        }
    }
}
