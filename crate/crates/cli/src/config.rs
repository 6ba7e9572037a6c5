//! Run configuration documents and the built-in presets.

use std::path::{Path, PathBuf};

use lsirt_core::geometry::{make_cone_geometry, make_parallel_geometry};
use lsirt_core::lsirt::{LrSchedule, LsirtConfig, Variant};
use lsirt_core::phantoms::NoiseLevel;
use lsirt_core::{Geometry, GridSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dims: Vec<usize>,
    #[serde(default = "one")]
    pub pitch: f64,
}

fn one() -> f64 {
    1.0
}

impl GridConfig {
    pub fn build(&self) -> Result<GridSpec, CliError> {
        Ok(GridSpec::new(&self.dims, self.pitch)?)
    }
}

/// Acquisition geometry with equispaced full-orbit angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    Parallel {
        n_angles: usize,
        n_det: usize,
        #[serde(default = "one")]
        det_pitch: f64,
    },
    Cone {
        n_angles: usize,
        det_rows: usize,
        det_cols: usize,
        #[serde(default = "one")]
        det_pitch: f64,
        #[serde(default = "default_sad")]
        sad: f64,
        #[serde(default = "default_sdd")]
        sdd: f64,
    },
}

fn default_sad() -> f64 {
    1000.0
}

fn default_sdd() -> f64 {
    1500.0
}

impl GeometryConfig {
    pub fn build(&self) -> Result<Geometry, CliError> {
        Ok(match *self {
            GeometryConfig::Parallel { n_angles, n_det, det_pitch } => {
                make_parallel_geometry(n_angles, n_det, det_pitch)?.into()
            }
            GeometryConfig::Cone { n_angles, det_rows, det_cols, det_pitch, sad, sdd } => {
                make_cone_geometry(n_angles, det_rows, det_cols, det_pitch, sad, sdd)?.into()
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// A named regime (`none`, `low`, `medium`, `high`) or a standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseConfig {
    Named(String),
    Sigma(f64),
}

impl NoiseConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        if NoiseLevel::named(text).is_some() {
            return Ok(NoiseConfig::Named(text.to_string()));
        }
        text.parse::<f64>()
            .map(NoiseConfig::Sigma)
            .map_err(|_| CliError::Config(format!("noise must be none/low/medium/high or a sigma, got {text:?}")))
    }

    pub fn level(&self) -> Result<NoiseLevel, CliError> {
        match self {
            NoiseConfig::Named(n) => {
                NoiseLevel::named(n).ok_or_else(|| CliError::Config(format!("unknown noise regime {n:?}")))
            }
            NoiseConfig::Sigma(s) => Ok(NoiseLevel::from_sigma(*s)?),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Triangles,
    Ellipsoids,
    /// Every `.tvol` file in `dir`.
    Volumes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Multiply loaded volumes by 10⁻³ (files holding Hounsfield units).
    #[serde(default)]
    pub hu_scale: bool,
    pub noise: NoiseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Steps between checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub geometry: GeometryConfig,
    pub data: DataConfig,
    pub lsirt: LsirtConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let grid = self.grid.build()?;
        let geo = self.geometry.build()?;
        if grid.ndim() != geo.ndim() {
            return Err(CliError::Config(format!(
                "{}D grid with a {}D geometry",
                grid.ndim(),
                geo.ndim()
            )));
        }
        self.data.noise.level()?;
        if self.data.source == SourceKind::Volumes && self.data.dir.is_none() {
            return Err(CliError::Config("data source `volumes` needs `dir`".into()));
        }
        self.lsirt.validate()?;
        Ok(())
    }
}

pub const PRESETS: &[&str] = &[
    "desk-2d",
    "paper-2d-triangles-low",
    "paper-2d-triangles-medium",
    "paper-2d-triangles-high",
    "paper-2d-lung-low",
    "paper-2d-lung-medium",
    "paper-2d-lung-high",
    "paper-3d-128-low",
    "paper-3d-128-medium",
    "paper-3d-128-high",
    "paper-3d-256-low",
    "paper-3d-256-medium",
    "paper-3d-256-high",
];

pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    let unknown = || CliError::Config(format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")));
    let output = OutputConfig { dir: PathBuf::from("runs").join(name), checkpoint_every: 1000 };
    if name == "desk-2d" {
        return Ok(RunConfig {
            seed: 1,
            grid: GridConfig { dims: vec![64, 64], pitch: 1.0 },
            geometry: GeometryConfig::Parallel { n_angles: 20, n_det: 93, det_pitch: 1.0 },
            data: DataConfig { source: SourceKind::Triangles, dir: None, hu_scale: false, noise: NoiseConfig::Named("low".into()) },
            lsirt: LsirtConfig { n_s: 20, n_tot: 40, batch: 4, n_iter: 2000, ..Default::default() },
            output: OutputConfig { checkpoint_every: 500, ..output },
        });
    }
    let (family, noise) = name.strip_prefix("paper-").and_then(|r| r.rsplit_once('-')).ok_or_else(unknown)?;
    if NoiseLevel::named(noise).is_none() || noise == "none" {
        return Err(unknown());
    }
    let noise = NoiseConfig::Named(noise.into());
    let lsirt = LsirtConfig::default();
    let cfg = match family {
        "2d-triangles" => RunConfig {
            seed: 1,
            grid: GridConfig { dims: vec![128, 128], pitch: 1.0 },
            geometry: GeometryConfig::Parallel { n_angles: 30, n_det: 185, det_pitch: 1.0 },
            data: DataConfig { source: SourceKind::Triangles, dir: None, hu_scale: false, noise },
            lsirt,
            output,
        },
        "2d-lung" => RunConfig {
            seed: 1,
            grid: GridConfig { dims: vec![512, 512], pitch: 1.0 },
            geometry: GeometryConfig::Parallel { n_angles: 120, n_det: 742, det_pitch: 1.0 },
            data: DataConfig { source: SourceKind::Volumes, dir: None, hu_scale: true, noise },
            lsirt,
            output,
        },
        "3d-128" => RunConfig {
            seed: 1,
            grid: GridConfig { dims: vec![128, 128, 128], pitch: 1.0 },
            geometry: GeometryConfig::Cone { n_angles: 30, det_rows: 185, det_cols: 185, det_pitch: 1.0, sad: 1000.0, sdd: 1500.0 },
            data: DataConfig { source: SourceKind::Ellipsoids, dir: None, hu_scale: false, noise },
            lsirt,
            output,
        },
        "3d-256" => RunConfig {
            seed: 1,
            grid: GridConfig { dims: vec![256, 256, 256], pitch: 1.0 },
            geometry: GeometryConfig::Cone { n_angles: 60, det_rows: 371, det_cols: 371, det_pitch: 1.0, sad: 1000.0, sdd: 1500.0 },
            data: DataConfig { source: SourceKind::Ellipsoids, dir: None, hu_scale: false, noise },
            lsirt: LsirtConfig {
                n_iter: 50_000,
                lr: LrSchedule::PAPER_3D_256,
                patch: Some([128, 128, 128]),
                ..lsirt
            },
            output,
        },
        _ => return Err(unknown()),
    };
    Ok(cfg)
}

pub fn parse_variant(text: &str) -> Result<Variant, CliError> {
    match text {
        "lsirt" => Ok(Variant::Lsirt),
        "lsirt-star" | "lsirt_star" => Ok(Variant::LsirtStar),
        _ => Err(CliError::Config(format!("unknown variant {text:?}"))),
    }
}
