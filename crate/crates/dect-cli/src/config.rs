//! Pipeline configuration and the named scale profiles.

use serde::{Deserialize, Serialize};
use std::path::Path;

use dect_core::error::{Error, Result};
use dect_core::geometry::FanBeamGeometry;
use dect_core::recon::FilterSpec;
use dect_nn::models::{DenoiseNetConfig, SinoNetConfig};
use dect_nn::train::TrainConfig;

/// Ranges for the per-case phantom structure draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomRanges {
    pub fibro_blobs: (usize, usize),
    pub calc_specks: (usize, usize),
    pub calc_radius_px: (f64, f64),
    pub body_radius_fraction: f64,
    pub antialias: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: String,
    /// Square image side in pixels.
    pub image_size: usize,
    pub pixel_size_mm: f64,
    pub n_detector_bins: usize,
    pub views_per_kvp: usize,
    /// Cases per split: (train, val, test).
    pub splits: (usize, usize, usize),
    pub phantom: PhantomRanges,
    pub seed: u64,
    pub filter: FilterSpec,
    pub sinonet: SinoNetConfig,
    pub denoisenet: DenoiseNetConfig,
    pub train: TrainConfig,
    /// Stage-two inputs from ground-truth sinograms instead of stage-one
    /// predictions (ablation switch).
    pub stage2_inputs_from_gt: bool,
}

impl PipelineConfig {
    pub fn geometry(&self) -> FanBeamGeometry {
        FanBeamGeometry::with_defaults(
            (self.image_size, self.image_size),
            self.pixel_size_mm,
            self.n_detector_bins,
            self.views_per_kvp,
        )
    }

    /// Normalization constant for material sinogram values: no line integral
    /// of a fraction map can exceed the inscribed-circle diameter.
    pub fn gt_sino_scale_mm(&self) -> f64 {
        self.image_size as f64 * self.pixel_size_mm
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.0 == 0 && self.splits.1 == 0 && self.splits.2 == 0 {
            return Err(Error::Config("empty dataset: all split sizes are zero".into()));
        }
        if self.splits.0 == 0 || self.splits.1 == 0 {
            return Err(Error::Config("training and validation splits must be nonempty".into()));
        }
        self.geometry().validate()?;
        self.sinonet.validate()?;
        self.sinonet
            .check_input(2 * self.views_per_kvp, self.n_detector_bins)?;
        self.denoisenet.validate()?;
        self.train.validate()?;
        self.filter.validate()?;
        let (lo, hi) = self.phantom.calc_radius_px;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("calc radius range is empty".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.span().map(|s| text[..s.start].lines().count()).unwrap_or(0),
                msg: e.message().to_string(),
            })?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Desk-scale profile: runs the full pipeline on CPU in minutes to hours.
pub fn desk_profile() -> PipelineConfig {
    let mut train = TrainConfig {
        augment: true,
        patience: 10,
        micro_batch: 2,
        seed: 0,
        ..TrainConfig::default()
    };
    train.sinonet.max_epochs = 30;
    train.denoisenet.max_epochs = 14;
    PipelineConfig {
        profile: "desk".into(),
        image_size: 128,
        pixel_size_mm: 0.8,
        n_detector_bins: 256,
        views_per_kvp: 128,
        splits: (100, 5, 10),
        phantom: PhantomRanges {
            fibro_blobs: (3, 7),
            calc_specks: (2, 10),
            calc_radius_px: (1.0, 3.0),
            body_radius_fraction: 0.9,
            antialias: false,
        },
        seed: 0,
        filter: FilterSpec::default(),
        sinonet: SinoNetConfig::desk(),
        denoisenet: DenoiseNetConfig::desk(),
        train,
        stage2_inputs_from_gt: false,
    }
}

/// Full-scale profile mirroring the reference setup (512x512 images,
/// 1024-bin detector, depth-7 encoder, 16 residual blocks, 1000/10/100
/// cases). Supported by configuration; far beyond desk-CPU budgets.
pub fn paper_profile() -> PipelineConfig {
    PipelineConfig {
        profile: "paper".into(),
        image_size: 512,
        pixel_size_mm: 0.4,
        n_detector_bins: 1024,
        views_per_kvp: 256,
        splits: (1000, 10, 100),
        phantom: PhantomRanges {
            fibro_blobs: (4, 9),
            calc_specks: (3, 14),
            calc_radius_px: (1.5, 4.0),
            body_radius_fraction: 0.9,
            antialias: false,
        },
        seed: 0,
        filter: FilterSpec::default(),
        sinonet: SinoNetConfig::full(),
        denoisenet: DenoiseNetConfig::full(),
        train: TrainConfig::default(),
        stage2_inputs_from_gt: false,
    }
}

/// Miniature profile for fast end-to-end and determinism tests.
pub fn tiny_profile() -> PipelineConfig {
    let mut cfg = desk_profile();
    cfg.profile = "tiny".into();
    cfg.image_size = 32;
    cfg.pixel_size_mm = 2.0;
    cfg.n_detector_bins = 48;
    cfg.views_per_kvp = 16;
    cfg.splits = (3, 1, 2);
    cfg.phantom.fibro_blobs = (2, 3);
    cfg.phantom.calc_specks = (1, 3);
    cfg.sinonet = SinoNetConfig {
        depth: 2,
        base_channels: 4,
        ..SinoNetConfig::desk()
    };
    cfg.denoisenet = DenoiseNetConfig {
        n_blocks: 2,
        channel_schedule: vec![8, 8],
        ..DenoiseNetConfig::desk()
    };
    cfg.train.sinonet.max_epochs = 2;
    cfg.train.sinonet.batch_size = 2;
    cfg.train.denoisenet.max_epochs = 2;
    cfg.train.denoisenet.batch_size = 2;
    // The coarsest default MS-SSIM sigma needs >= 16 px; tiny images use a
    // reduced pyramid.
    cfg.train.loss.msssim_sigmas = vec![0.5, 1.0, 2.0];
    cfg
}

pub fn profile_by_name(name: &str) -> Result<PipelineConfig> {
    match name {
        "desk" => Ok(desk_profile()),
        "paper" => Ok(paper_profile()),
        "tiny" => Ok(tiny_profile()),
        other => Err(Error::Config(format!(
            "unknown profile {other:?} (expected desk, paper or tiny)"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aamd,
    Rfast,
    SinonetFbp,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aamd" => Ok(Method::Aamd),
            "rfast" => Ok(Method::Rfast),
            "sinonet-fbp" => Ok(Method::SinonetFbp),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected aamd, rfast or sinonet-fbp)"
            ))),
        }
    }

    pub fn dir_name(&self) -> &'static str {
        match self {
            Method::Aamd => "aamd",
            Method::Rfast => "rfast",
            Method::SinonetFbp => "sinonet_fbp",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        desk_profile().validate().unwrap();
        paper_profile().validate().unwrap();
        tiny_profile().validate().unwrap();
    }

    #[test]
    fn desk_profile_hyperparameters() {
        let cfg = desk_profile();
        assert_eq!(cfg.train.sinonet.lr, 1e-3);
        assert_eq!(cfg.train.sinonet.batch_size, 8);
        assert_eq!(cfg.train.denoisenet.lr, 1e-2);
        assert_eq!(cfg.train.denoisenet.batch_size, 16);
        assert_eq!(cfg.train.loss.alpha, 0.5);
        assert_eq!(cfg.train.loss.beta, 0.25);
        assert_eq!(cfg.train.loss.mode, dect_core::metrics::LossMode::Combination);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, serde_json::to_string_pretty(&desk_profile()).unwrap()).unwrap();
        let cfg = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(cfg.image_size, 128);
        let toml_path = dir.path().join("cfg.toml");
        std::fs::write(&toml_path, toml::to_string(&tiny_profile()).unwrap()).unwrap();
        let cfg = PipelineConfig::from_file(&toml_path).unwrap();
        assert_eq!(cfg.profile, "tiny");
    }
}
