use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBackend;
use crate::motionfield::DEFAULT_BINS;
use crate::neural::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub features: u64,
    pub cluster: u64,
    pub field: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            features: 7,
            cluster: 11,
            field: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_ply: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub cameras_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Voxel resolution factor: R = λ·max(h).
    pub lambda: f64,
    /// Spatial weight of the clustering metric.
    pub mu: f64,
    /// Motion amplitude.
    pub omega: f64,
    /// Loop length in frames.
    pub frames: usize,
    pub feature_backend: FeatureBackend,
    pub feature_dim: usize,
    pub pe_frequencies: usize,
    pub hidden: Vec<usize>,
    pub cluster_iterations: usize,
    pub variogram_bins: usize,
    pub seeds: Seeds,
    pub autoencoder_train: TrainConfig,
    pub field_train: TrainConfig,
    pub sh_degree_render: usize,
    /// Output image size as [width, height].
    pub resolution: [usize; 2],
    pub background: [f64; 3],
    /// Replaces ψ = (ω/T)·e^{−h} with a fixed vector.
    pub psi_override: Option<[f64; 3]>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_ply: PathBuf::from("scene.ply"),
            mask_path: None,
            cameras_path: None,
            output_dir: PathBuf::from("out"),
            lambda: 0.04,
            mu: 0.5,
            omega: 1.2,
            frames: 48,
            feature_backend: FeatureBackend::Autoencoder,
            feature_dim: 16,
            pe_frequencies: 6,
            hidden: vec![128, 64],
            cluster_iterations: 5,
            variogram_bins: DEFAULT_BINS,
            seeds: Seeds::default(),
            autoencoder_train: TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
            field_train: TrainConfig::default(),
            sh_degree_render: 3,
            resolution: [900, 900],
            background: [0.0; 3],
            psi_override: None,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.input_ply);
        join(&mut self.output_dir);
        if let Some(p) = self.mask_path.as_mut() {
            join(p);
        }
        if let Some(p) = self.cameras_path.as_mut() {
            join(p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(self.lambda > 0.0, || format!("lambda must be > 0, got {}", self.lambda))?;
        check(self.mu >= 0.0, || format!("mu must be >= 0, got {}", self.mu))?;
        check(self.omega > 0.0, || format!("omega must be > 0, got {}", self.omega))?;
        check(self.frames >= 2, || format!("frames must be >= 2, got {}", self.frames))?;
        check(self.feature_dim >= 2, || "feature_dim must be >= 2".into())?;
        check(!self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0), || {
            "hidden sizes must be non-empty and positive".into()
        })?;
        check(self.cluster_iterations >= 1, || "cluster_iterations must be >= 1".into())?;
        check(self.variogram_bins >= 4, || "variogram_bins must be >= 4".into())?;
        check(self.sh_degree_render <= 3, || "sh_degree_render must be in 0..=3".into())?;
        check(self.resolution.iter().all(|&r| r > 0), || "resolution must be positive".into())?;
        for (name, t) in [("autoencoder_train", &self.autoencoder_train), ("field_train", &self.field_train)] {
            check(t.epochs >= 1 && t.learning_rate > 0.0, || format!("{name}: epochs and learning_rate must be positive"))?;
            check(t.lr_decay > 0.0 && t.lr_decay <= 1.0, || format!("{name}: lr_decay must be in (0, 1]"))?;
        }
        if let Some(psi) = self.psi_override {
            check(psi.iter().all(|v| v.is_finite()), || "psi_override must be finite".into())?;
        }
        Ok(())
    }

    pub fn mask_path(&self) -> Result<&Path> {
        self.mask_path
            .as_deref()
            .ok_or_else(|| Error::Config("mask required: set mask_path in the config or pass --mask".into()))
    }

    pub fn cameras_path(&self) -> Result<&Path> {
        self.cameras_path
            .as_deref()
            .ok_or_else(|| Error::Config("cameras required: set cameras_path in the config or pass --cameras".into()))
    }

    pub fn warn_overrides(&self) {
        if let Some(psi) = self.psi_override {
            warn!("!!! psi_override {psi:?} in effect: the amplitude formula psi = (omega/T)*exp(-h) is BYPASSED !!!");
        }
    }
}
