//! Dense image and projection-data containers.

use crate::error::{Error, Result};
use crate::geometry::{Geometry, GridSpec};

/// Attenuation values on a reconstruction grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        Volume { grid, data: vec![0.0; n] }
    }

    pub fn from_data(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("volume contains non-finite values".into()));
        }
        Ok(Volume { grid, data })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = grid.shape();
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume { grid, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn same_shape(&self, other: &Volume) -> Result<()> {
        if self.grid.dims() != other.grid.dims() {
            return Err(Error::Shape(format!(
                "volume dims {:?} vs {:?}",
                self.grid.dims(),
                other.grid.dims()
            )));
        }
        Ok(())
    }
}

/// Projection data, angle-major: `[angle][det]` or `[angle][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub geometry: Geometry,
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.sinogram_len();
        Sinogram { geometry, data: vec![0.0; n] }
    }

    pub fn from_data(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.sinogram_len() {
            return Err(Error::Shape(format!(
                "sinogram data has {} values, geometry needs {:?}",
                data.len(),
                geometry.sinogram_shape()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("sinogram contains non-finite values".into()));
        }
        Ok(Sinogram { geometry, data })
    }

    /// Values of projection `k`.
    pub fn view(&self, k: usize) -> &[f64] {
        let per = self.data.len() / self.geometry.n_angles();
        &self.data[k * per..(k + 1) * per]
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
