//! The single TOML configuration file shared by every subcommand. Every
//! field has a desk-scale default; a run writes its effective config next
//! to its outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, MisalignMode};
use crate::dataset::SimProtocol;
use crate::error::{CbctError, Result};
use crate::geometry::{ConeBeamGeometry, DetectorSpec};
use crate::models::{ModelKind, ModelSpec};
use crate::training::TrainConfig;
use crate::volume::VolumeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing_mm: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nx: 64,
            ny: 64,
            nz: 48,
            spacing_mm: [1.5, 1.5, 1.5],
        }
    }
}

impl GridConfig {
    pub fn to_grid(&self) -> VolumeGrid {
        VolumeGrid::centered(self.nx, self.ny, self.nz, self.spacing_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch_mm: [f64; 2],
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            sid_mm: 750.0,
            sdd_mm: 1200.0,
            detector_rows: 96,
            detector_cols: 96,
            pixel_pitch_mm: [2.0, 2.0],
        }
    }
}

impl GeometryConfig {
    pub fn to_geometry(&self) -> ConeBeamGeometry {
        ConeBeamGeometry {
            sid_mm: self.sid_mm,
            sdd_mm: self.sdd_mm,
            detector: DetectorSpec {
                rows: self.detector_rows,
                cols: self.detector_cols,
                pixel_pitch_u_mm: self.pixel_pitch_mm[0],
                pixel_pitch_v_mm: self.pixel_pitch_mm[1],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_cases: usize,
    pub n_sparse_views: usize,
    pub n_dense_views: usize,
    pub grid: GridConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_cases: 18,
            n_sparse_views: 13,
            n_dense_views: 180,
            grid: GridConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub kind: ModelKind,
    pub mode: MisalignMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub n_scales: usize,
    pub base_channels: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            kind: ModelKind::PriorSegNet,
            mode: MisalignMode::Mis,
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            lambda: 1e-3,
            n_scales: 3,
            base_channels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub rot_max_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub misalign_max_deg: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            rot_max_deg: 10.0,
            scale_lo: 0.9,
            scale_hi: 1.1,
            misalign_max_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub alpha_min_deg: f64,
    pub alpha_max_deg: f64,
    pub alpha_step_deg: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            alpha_min_deg: -6.0,
            alpha_max_deg: 6.0,
            alpha_step_deg: 0.5,
        }
    }
}

impl SweepSection {
    pub fn alphas(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let n = ((self.alpha_max_deg - self.alpha_min_deg) / self.alpha_step_deg).round() as i64;
        for k in 0..=n {
            out.push(self.alpha_min_deg + k as f64 * self.alpha_step_deg);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub geometry: GeometryConfig,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub sweep: SweepSection,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CbctError::Config(format!("{}: {e}", path.display())))?;
        let config: AppConfig = toml::from_str(&text)
            .map_err(|e| CbctError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset
            .grid
            .to_grid()
            .validate()
            .map_err(|e| CbctError::Config(e.to_string()))?;
        self.geometry
            .to_geometry()
            .validate()
            .map_err(|e| CbctError::Config(e.to_string()))?;
        if self.dataset.n_cases == 0 {
            return Err(CbctError::Config("n_cases must be >= 1".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(CbctError::Config(
                "seed must fit a TOML integer (<= 2^63 - 1)".into(),
            ));
        }
        if self.dataset.n_sparse_views == 0 || self.dataset.n_dense_views == 0 {
            return Err(CbctError::Config("view counts must be >= 1".into()));
        }
        if !(self.sweep.alpha_step_deg > 0.0) {
            return Err(CbctError::Config("sweep step must be positive".into()));
        }
        self.to_train_config().validate()?;
        Ok(())
    }

    pub fn to_protocol(&self) -> SimProtocol {
        SimProtocol {
            geometry: self.geometry.to_geometry(),
            n_sparse_views: self.dataset.n_sparse_views,
            n_dense_views: self.dataset.n_dense_views,
        }
    }

    pub fn to_model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.train.kind,
            n_scales: self.train.n_scales,
            base_channels: self.train.base_channels,
            input_size: self.dataset.grid.nx,
            seed: self.seed,
        }
    }

    pub fn to_augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            rot_max_deg: self.augment.rot_max_deg,
            scale_lo: self.augment.scale_lo,
            scale_hi: self.augment.scale_hi,
            misalign_max_deg: self.augment.misalign_max_deg,
            mode: self.train.mode,
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            lambda: self.train.lambda,
            augment: self.to_augment_config(),
            seed: self.seed,
        }
    }

    /// Misalignment range recorded in logs: `[0, 0]` in no-mis mode.
    pub fn misalign_range(&self) -> [f64; 2] {
        match self.train.mode {
            MisalignMode::Mis => [-self.augment.misalign_max_deg, self.augment.misalign_max_deg],
            MisalignMode::NoMis => [0.0, 0.0],
        }
    }

    /// Write the effective configuration beside a run's outputs.
    pub fn write_frozen(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CbctError::Config(format!("serialize config: {e}")))?;
        let path = dir.join("effective-config.toml");
        fs::write(&path, text).map_err(|e| CbctError::io(&path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn default_sweep_has_25_alphas() {
        let alphas = SweepSection::default().alphas();
        assert_eq!(alphas.len(), 25);
        assert_eq!(alphas[0], -6.0);
        assert_eq!(*alphas.last().unwrap(), 6.0);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let text = r#"
seed = 7
[train]
kind = "prior_net"
mode = "no-mis"
epochs = 3
"#;
        let config: AppConfig = toml::from_str(text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.train.kind, ModelKind::PriorNet);
        assert_eq!(config.train.mode, MisalignMode::NoMis);
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.train.batch_size, 8); // default
        assert_eq!(config.misalign_range(), [0.0, 0.0]);
    }

    #[test]
    fn frozen_copy_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let config = AppConfig::default();
        config.write_frozen(dir.path()).unwrap();
        let back = AppConfig::load(&dir.path().join("effective-config.toml")).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn bad_config_is_a_config_error() {
        let text = "seed = \"not a number\"";
        let err = toml::from_str::<AppConfig>(text);
        assert!(err.is_err());
        let mut config = AppConfig::default();
        config.dataset.n_cases = 0;
        assert!(matches!(
            config.validate().unwrap_err(),
            CbctError::Config(_)
        ));
    }
}
