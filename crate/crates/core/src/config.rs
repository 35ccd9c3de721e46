//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "camera": {"kind": "pinhole", "fx": 200, "fy": 200, "cx": 128, "cy": 32},
//!   "grid": {"size": 128, "beta": 0.546875},
//!   "primitives": {"n_p": 3},
//!   "loss": {"alpha": 10, "d": 5.0, "lambda1": 0, "negatives": 4},
//!   "search_range": 20.0
//! }
//! ```
//!
//! Missing grid origins centre the camera on cell (size/2, size/2).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraModel};
use crate::losses::LossConfig;
use crate::primitives::PrimitiveParams;
use crate::renderer::RenderSettings;

pub const DEFAULT_CAM_HEIGHT: f64 = 1.65;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub size: usize,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_z: Option<f64>,
}

impl GridConfig {
    pub fn spec(&self) -> Result<BevGridSpec> {
        let centred = BevGridSpec::centered(self.size, self.beta)?;
        BevGridSpec::new(
            self.size,
            self.beta,
            self.origin_x.unwrap_or(centred.origin_x),
            self.origin_z.unwrap_or(centred.origin_z),
        )
    }
}

impl From<BevGridSpec> for GridConfig {
    fn from(g: BevGridSpec) -> Self {
        Self {
            size: g.size,
            beta: g.beta,
            origin_x: Some(g.origin_x),
            origin_z: Some(g.origin_z),
        }
    }
}

fn default_cam_height() -> f64 {
    DEFAULT_CAM_HEIGHT
}

fn default_search_range() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub camera: Option<CameraModel>,
    pub grid: GridConfig,
    #[serde(default)]
    pub primitives: PrimitiveParams,
    #[serde(default)]
    pub render: RenderSettings,
    #[serde(default)]
    pub loss: LossConfig,
    /// Half-width of the translation search in metres.
    #[serde(default = "default_search_range")]
    pub search_range: f64,
    #[serde(default = "default_cam_height")]
    pub cam_height: f64,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { offset: 0, source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.camera {
            c.validate()?;
        }
        self.grid.spec()?;
        self.primitives.validate()?;
        self.render.validate()?;
        self.loss.validate()?;
        if !(self.search_range > 0.0) {
            return Err(Error::Config(format!("search_range must be positive, got {}", self.search_range)));
        }
        if !(self.cam_height > 0.0) {
            return Err(Error::Config(format!("cam_height must be positive, got {}", self.cam_height)));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<BevGridSpec> {
        self.grid.spec()
    }

    pub fn camera(&self) -> Result<CameraModel> {
        self.camera.ok_or_else(|| Error::Config("configuration has no camera".into()))
    }

    /// Search radius in cells: `⌈search_range / β⌉`.
    pub fn radius_cells(&self) -> usize {
        (self.search_range / self.grid.beta).ceil() as usize
    }
}
