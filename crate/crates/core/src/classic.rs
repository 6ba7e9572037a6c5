//! Non-learned baselines: filtered backprojection (2D parallel FBP and
//! full-circle FDK) and SIRT with a fixed step or with the row/column-sum
//! preconditioners.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, Geometry, GridSpec, ParallelGeometry2D};
use crate::projector::{Projector, ResidualNorms, SirtScaling};
use crate::volume::{Sinogram, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Plain backprojection, no filtering.
    None,
    Ramp,
    /// Ramp apodized by a Hann window reaching zero at `cutoff · Nyquist`.
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub cutoff: f64,
}

impl FilterSpec {
    pub const RAMP: FilterSpec = FilterSpec { kind: FilterKind::Ramp, cutoff: 1.0 };

    pub fn new(kind: FilterKind, cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(Error::InvalidArgument(format!("filter cutoff must be in (0, 1], got {cutoff}")));
        }
        Ok(FilterSpec { kind, cutoff })
    }

    pub fn hann(cutoff: f64) -> Result<Self> {
        Self::new(FilterKind::Hann, cutoff)
    }
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self::RAMP
    }
}

/// Row filter applied by FFT convolution with zero padding to the next power
/// of two at least twice the row length.
struct RowFilter {
    len: usize,
    padded: usize,
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    kind: FilterKind,
}

impl RowFilter {
    /// `spacing` is the sample spacing of the rows in mm.
    fn new(len: usize, spacing: f64, spec: FilterSpec) -> Self {
        let padded = (2 * len).next_power_of_two().max(2);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);
        // Band-limited ramp from its spatial kernel, which keeps the DC
        // term consistent with the discrete convolution.
        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        for (i, k) in kernel.iter_mut().enumerate() {
            let n = if i <= padded / 2 { i as i64 } else { i as i64 - padded as i64 };
            let h = if n == 0 {
                1.0 / (4.0 * spacing * spacing)
            } else if n % 2 != 0 {
                -1.0 / (PI * n as f64 * spacing).powi(2)
            } else {
                0.0
            };
            *k = Complex::new(h * spacing, 0.0);
        }
        fft.process(&mut kernel);
        let response = kernel
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let f = if i <= padded / 2 { i } else { padded - i } as f64 / padded as f64;
                let window = match spec.kind {
                    FilterKind::Hann => {
                        let edge = spec.cutoff * 0.5;
                        if f <= edge { 0.5 * (1.0 + (PI * f / edge).cos()) } else { 0.0 }
                    }
                    _ => 1.0,
                };
                h.re * window
            })
            .collect();
        RowFilter { len, padded, response, fft, ifft, kind: spec.kind }
    }

    fn apply(&self, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.len);
        if self.kind == FilterKind::None {
            return;
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        self.fft.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= *h;
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        for (v, b) in row.iter_mut().zip(&buf) {
            *v = b.re * scale;
        }
    }
}

#[inline]
fn lerp_row(row: &[f64], pos: f64) -> f64 {
    let i = pos.floor();
    let f = pos - i;
    let i = i as isize;
    let at = |k: isize| if k >= 0 && (k as usize) < row.len() { row[k as usize] } else { 0.0 };
    (1.0 - f) * at(i) + f * at(i + 1)
}

pub fn fbp_2d(
    y: &Sinogram,
    geo: &ParallelGeometry2D,
    grid: &GridSpec,
    filter: FilterSpec,
) -> Result<Volume> {
    if grid.ndim() != 2 {
        return Err(Error::Shape(format!("FBP needs a 2D grid, got {}D", grid.ndim())));
    }
    let expected: Geometry = geo.clone().into();
    if y.geometry.sinogram_shape() != expected.sinogram_shape() {
        return Err(Error::Shape("sinogram does not match the parallel geometry".into()));
    }
    let rf = RowFilter::new(geo.n_det, geo.det_pitch, filter);
    let mut filtered = y.data.clone();
    filtered.par_chunks_mut(geo.n_det).for_each(|row| rf.apply(row));

    let half = (geo.n_det as f64 - 1.0) * 0.5;
    let trig: Vec<(f64, f64)> = geo.angles.iter().map(|a| a.sin_cos()).collect();
    let weight = PI / geo.n_angles() as f64;
    let [nx, _, _] = grid.shape();
    let mut out = Volume::zeros(grid.clone());
    out.data.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
        let yc = grid.center(1, j);
        for (i, v) in row.iter_mut().enumerate() {
            let xc = grid.center(0, i);
            let mut acc = 0.0;
            for (k, &(s, c)) in trig.iter().enumerate() {
                let u = -s * xc + c * yc;
                acc += lerp_row(&filtered[k * geo.n_det..(k + 1) * geo.n_det], u / geo.det_pitch + half);
            }
            *v = acc * weight;
        }
    });
    Ok(out)
}

/// Feldkamp-Davis-Kress reconstruction for a full circular orbit.
pub fn fdk_3d(
    y: &Sinogram,
    geo: &ConeBeamGeometry,
    grid: &GridSpec,
    filter: FilterSpec,
) -> Result<Volume> {
    if grid.ndim() != 3 {
        return Err(Error::Shape(format!("FDK needs a 3D grid, got {}D", grid.ndim())));
    }
    let expected: Geometry = geo.clone().into();
    if y.geometry.sinogram_shape() != expected.sinogram_shape() {
        return Err(Error::Shape("sinogram does not match the cone-beam geometry".into()));
    }
    // Work on the virtual detector through the rotation axis.
    let demag = geo.sad / geo.sdd;
    let pitch_v = geo.det_pitch * demag;
    let (rows, cols) = (geo.det_rows, geo.det_cols);
    let rf = RowFilter::new(cols, pitch_v, filter);
    let mut filtered = y.data.clone();
    filtered.par_chunks_mut(cols).enumerate().for_each(|(line, row)| {
        let r = line % rows;
        let v = geo.row_coord(r) * demag;
        for (c, val) in row.iter_mut().enumerate() {
            let u = geo.col_coord(c) * demag;
            *val *= geo.sad / (geo.sad * geo.sad + u * u + v * v).sqrt();
        }
        rf.apply(row);
    });

    let half_c = (cols as f64 - 1.0) * 0.5;
    let half_r = (rows as f64 - 1.0) * 0.5;
    let trig: Vec<(f64, f64)> = geo.angles.iter().map(|a| a.sin_cos()).collect();
    let weight = PI / geo.n_angles() as f64;
    let [nx, ny, _] = grid.shape();
    let panel = rows * cols;
    let mut out = Volume::zeros(grid.clone());
    out.data.par_chunks_mut(nx).enumerate().for_each(|(line, row)| {
        let yc = grid.center(1, line % ny);
        let zc = grid.center(2, line / ny);
        for (i, val) in row.iter_mut().enumerate() {
            let xc = grid.center(0, i);
            let mut acc = 0.0;
            for (k, &(s, c)) in trig.iter().enumerate() {
                let depth = geo.sad - (xc * c + yc * s);
                let mag = geo.sad / depth;
                let u = (-xc * s + yc * c) * mag;
                let v = zc * mag;
                let fu = u / pitch_v + half_c;
                let fv = v / pitch_v + half_r;
                let r0 = fv.floor();
                let wr = fv - r0;
                let r0 = r0 as isize;
                let proj = &filtered[k * panel..(k + 1) * panel];
                let mut sample = 0.0;
                for (r, w) in [(r0, 1.0 - wr), (r0 + 1, wr)] {
                    if r >= 0 && (r as usize) < rows && w != 0.0 {
                        let start = r as usize * cols;
                        sample += w * lerp_row(&proj[start..start + cols], fu);
                    }
                }
                acc += mag * mag * sample;
            }
            *val = acc * weight;
        }
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum SirtVariant {
    /// `x ← x + λ Aᵀ(y − Ax)`; `None` picks `1.8 / ‖A‖²`.
    FixedStep { lambda: Option<f64> },
    /// `x ← x + C Aᵀ R (y − Ax)`.
    Scaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirtConfig {
    pub variant: SirtVariant,
    pub n_iter: usize,
}

impl SirtConfig {
    pub fn scaled(n_iter: usize) -> Self {
        SirtConfig { variant: SirtVariant::Scaled, n_iter }
    }

    pub fn fixed_step(n_iter: usize, lambda: Option<f64>) -> Self {
        SirtConfig { variant: SirtVariant::FixedStep { lambda }, n_iter }
    }

    fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::InvalidArgument("SIRT needs at least one iteration".into()));
        }
        if let SirtVariant::FixedStep { lambda: Some(l) } = self.variant {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!("SIRT step must be positive, got {l}")));
            }
        }
        Ok(())
    }
}

/// Power iterations used for the default fixed step.
pub const POWER_ITERATIONS: usize = 30;

pub fn default_step(op: &Projector) -> f64 {
    1.8 / op.norm_squared_estimate(POWER_ITERATIONS)
}

/// The divergence guard fires when the residual grows more than this factor
/// over `DIVERGENCE_WINDOW` iterations.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_WINDOW: usize = 10;

pub fn sirt(y: &Sinogram, geo: &Geometry, grid: &GridSpec, cfg: SirtConfig) -> Result<Volume> {
    let op = Projector::new(grid.clone(), geo.clone())?;
    sirt_with_monitor(y, &op, cfg, |_, _, _| {})
}

/// SIRT from `x⁽⁰⁾ = 0`. `monitor(k, x, norms)` is called after every
/// iteration with the residual norms of the iterate the step started from.
pub fn sirt_with_monitor(
    y: &Sinogram,
    op: &Projector,
    cfg: SirtConfig,
    mut monitor: impl FnMut(usize, &[f64], ResidualNorms),
) -> Result<Volume> {
    cfg.validate()?;
    op.check_sinogram(y)?;
    let mut x = vec![0.0; op.volume_len()];
    let mut residual = vec![0.0; op.sinogram_len()];
    let mut update = vec![0.0; op.volume_len()];
    let mut history: Vec<f64> = Vec::with_capacity(cfg.n_iter);
    let (scaling, lambda) = match cfg.variant {
        SirtVariant::Scaled => (op.scalings(), 1.0),
        SirtVariant::FixedStep { lambda } => {
            let ones = SirtScaling {
                col_inv: vec![1.0; op.volume_len()],
                row_inv: vec![1.0; op.sinogram_len()],
            };
            (ones, lambda.unwrap_or_else(|| default_step(op)))
        }
    };
    for k in 0..cfg.n_iter {
        let norms = op.scaled_gradient_into(&x, &y.data, &scaling, &mut residual, &mut update);
        history.push(norms.plain);
        if k >= DIVERGENCE_WINDOW {
            let before = history[k - DIVERGENCE_WINDOW];
            if norms.plain > DIVERGENCE_FACTOR * before || !norms.plain.is_finite() {
                return Err(Error::Divergence { iteration: k, from: before, to: norms.plain });
            }
        }
        if lambda == 1.0 {
            x.iter_mut().zip(&update).for_each(|(xi, u)| *xi += u);
        } else {
            x.iter_mut().zip(&update).for_each(|(xi, u)| *xi += lambda * u);
        }
        monitor(k, &x, norms);
    }
    Ok(Volume { grid: op.grid().clone(), data: x })
}
