//! Reconstruction grids and acquisition geometries.
//!
//! Conventions used throughout the crate:
//!
//! * lengths are millimetres, angles radians;
//! * grids are centered on the rotation axis, voxel `i` along an axis of
//!   length `n` sits at `(i - (n - 1) / 2) * pitch`;
//! * arrays are stored x-fastest, then y, then z;
//! * a parallel ray at angle `θ` travels along `(cos θ, sin θ)` and its
//!   detector coordinate runs along `(-sin θ, cos θ)`;
//! * the cone-beam source sits at `sad * (cos β, sin β, 0)`, the flat panel is
//!   perpendicular to the central ray at distance `sdd` from the source, its
//!   column axis is `(-sin β, cos β, 0)` and its row axis is `+z`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridDoc", into = "GridDoc")]
pub struct GridSpec {
    shape: [usize; 3],
    ndim: usize,
    pitch: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    dims: Vec<usize>,
    pitch: f64,
}

impl TryFrom<GridDoc> for GridSpec {
    type Error = Error;

    fn try_from(doc: GridDoc) -> Result<Self> {
        GridSpec::new(&doc.dims, doc.pitch)
    }
}

impl From<GridSpec> for GridDoc {
    fn from(grid: GridSpec) -> Self {
        GridDoc { dims: grid.dims().to_vec(), pitch: grid.pitch }
    }
}

impl GridSpec {
    /// `dims` lists voxel counts as `[nx, ny]` or `[nx, ny, nz]`.
    pub fn new(dims: &[usize], pitch: f64) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidGeometry(format!(
                "grid must be 2D or 3D, got {} axes",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidGeometry(format!("grid dims must be positive: {dims:?}")));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::InvalidGeometry(format!("grid pitch must be positive: {pitch}")));
        }
        let mut shape = [1; 3];
        shape[..dims.len()].copy_from_slice(dims);
        Ok(GridSpec { shape, ndim: dims.len(), pitch })
    }

    pub fn new_2d(nx: usize, ny: usize, pitch: f64) -> Result<Self> {
        Self::new(&[nx, ny], pitch)
    }

    pub fn new_3d(nx: usize, ny: usize, nz: usize, pitch: f64) -> Result<Self> {
        Self::new(&[nx, ny, nz], pitch)
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.shape[..self.ndim]
    }

    /// `[nx, ny, nz]`, with `nz = 1` for 2D grids.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.shape[axis] as f64 * self.pitch
    }

    /// Coordinate of voxel center `i` along `axis`.
    #[inline]
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        (i as f64 - (self.shape[axis] as f64 - 1.0) * 0.5) * self.pitch
    }

    /// Coordinate of the first voxel center along `axis`.
    #[inline]
    pub fn first_center(&self, axis: usize) -> f64 {
        -(self.shape[axis] as f64 - 1.0) * 0.5 * self.pitch
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[0] + x
    }
}

/// Equispaced full-circle sampling, `angle_k = 2πk / n`.
pub fn full_circle_angles(n_angles: usize) -> Vec<f64> {
    (0..n_angles).map(|k| 2.0 * PI * k as f64 / n_angles as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelGeometry2D {
    pub n_det: usize,
    pub det_pitch: f64,
    pub angles: Vec<f64>,
}

impl ParallelGeometry2D {
    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    /// Detector coordinate of bin `b` (element center).
    #[inline]
    pub fn det_coord(&self, b: usize) -> f64 {
        (b as f64 - (self.n_det as f64 - 1.0) * 0.5) * self.det_pitch
    }

    pub fn sinogram_len(&self) -> usize {
        self.n_angles() * self.n_det
    }

    fn validate(&self) -> Result<()> {
        if self.angles.is_empty() || self.n_det == 0 {
            return Err(Error::InvalidGeometry(
                "parallel geometry needs at least one angle and one detector".into(),
            ));
        }
        if !(self.det_pitch > 0.0 && self.det_pitch.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "detector pitch must be positive: {}",
                self.det_pitch
            )));
        }
        check_angles(&self.angles)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeBeamGeometry {
    pub sad: f64,
    pub sdd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pitch: f64,
    pub angles: Vec<f64>,
}

impl ConeBeamGeometry {
    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn magnification(&self) -> f64 {
        self.sdd / self.sad
    }

    /// Panel coordinate of column `c` along the u axis.
    #[inline]
    pub fn col_coord(&self, c: usize) -> f64 {
        (c as f64 - (self.det_cols as f64 - 1.0) * 0.5) * self.det_pitch
    }

    /// Panel coordinate of row `r` along the v (rotation) axis.
    #[inline]
    pub fn row_coord(&self, r: usize) -> f64 {
        (r as f64 - (self.det_rows as f64 - 1.0) * 0.5) * self.det_pitch
    }

    pub fn sinogram_len(&self) -> usize {
        self.n_angles() * self.det_rows * self.det_cols
    }

    fn validate(&self) -> Result<()> {
        if self.angles.is_empty() || self.det_rows == 0 || self.det_cols == 0 {
            return Err(Error::InvalidGeometry(
                "cone-beam geometry needs at least one angle and a non-empty panel".into(),
            ));
        }
        if !(self.det_pitch > 0.0 && self.det_pitch.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "detector pitch must be positive: {}",
                self.det_pitch
            )));
        }
        if !(self.sad > 0.0 && self.sad < self.sdd && self.sdd.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "need 0 < sad < sdd, got sad = {}, sdd = {}",
                self.sad, self.sdd
            )));
        }
        check_angles(&self.angles)
    }
}

fn check_angles(angles: &[f64]) -> Result<()> {
    if angles.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidGeometry("angles must be finite".into()));
    }
    if angles.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGeometry("angles must be strictly increasing".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Parallel(ParallelGeometry2D),
    Cone(ConeBeamGeometry),
}

impl Geometry {
    pub fn ndim(&self) -> usize {
        match self {
            Geometry::Parallel(_) => 2,
            Geometry::Cone(_) => 3,
        }
    }

    pub fn n_angles(&self) -> usize {
        match self {
            Geometry::Parallel(g) => g.n_angles(),
            Geometry::Cone(g) => g.n_angles(),
        }
    }

    /// `[n_angles, n_det]` or `[n_angles, det_rows, det_cols]`.
    pub fn sinogram_shape(&self) -> Vec<usize> {
        match self {
            Geometry::Parallel(g) => vec![g.n_angles(), g.n_det],
            Geometry::Cone(g) => vec![g.n_angles(), g.det_rows, g.det_cols],
        }
    }

    pub fn sinogram_len(&self) -> usize {
        match self {
            Geometry::Parallel(g) => g.sinogram_len(),
            Geometry::Cone(g) => g.sinogram_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Geometry::Parallel(g) => g.validate(),
            Geometry::Cone(g) => g.validate(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let geo: Geometry = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        geo.validate()?;
        Ok(geo)
    }
}

impl From<ParallelGeometry2D> for Geometry {
    fn from(g: ParallelGeometry2D) -> Self {
        Geometry::Parallel(g)
    }
}

impl From<ConeBeamGeometry> for Geometry {
    fn from(g: ConeBeamGeometry) -> Self {
        Geometry::Cone(g)
    }
}

pub fn make_parallel_geometry(
    n_angles: usize,
    n_det: usize,
    det_pitch: f64,
) -> Result<ParallelGeometry2D> {
    let geo = ParallelGeometry2D { n_det, det_pitch, angles: full_circle_angles(n_angles) };
    geo.validate()?;
    Ok(geo)
}

pub fn make_cone_geometry(
    n_angles: usize,
    det_rows: usize,
    det_cols: usize,
    det_pitch: f64,
    sad: f64,
    sdd: f64,
) -> Result<ConeBeamGeometry> {
    let geo = ConeBeamGeometry {
        sad,
        sdd,
        det_rows,
        det_cols,
        det_pitch,
        angles: full_circle_angles(n_angles),
    };
    geo.validate()?;
    Ok(geo)
}

pub fn magnification(geo: &ConeBeamGeometry) -> f64 {
    geo.magnification()
}

pub const DEFAULT_SAD: f64 = 1000.0;
pub const DEFAULT_SDD: f64 = 1500.0;
pub const DEFAULT_DET_PITCH: f64 = 1.0;
