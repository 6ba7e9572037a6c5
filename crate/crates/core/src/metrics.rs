//! Image-quality measures: PSNR, SSIM, contrast-to-noise ratio, edge
//! resolution (FWHM of the fitted line-spread function) and Fourier slices.

use std::f64::consts::{PI, SQRT_2};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Data range of HU-scaled images: 2000 HU × 10⁻³.
pub const HU_DATA_RANGE: f64 = 2.0;
/// `FWHM = FWHM_PER_SIGMA · σ` for a Gaussian line-spread function.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_4;
pub const POLAR_ANGLE_STEP_DEG: f64 = 1.0;
pub const POLAR_RADIAL_STEP_MM: f64 = 0.25;
const FIT_MAX_ITERATIONS: usize = 200;

fn check_pair(x: &Volume, reference: &Volume, range: f64) -> Result<()> {
    x.same_shape(reference)?;
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {range}")));
    }
    Ok(())
}

/// `max − min` of the reference, the range used for phantoms.
pub fn reference_range(reference: &Volume) -> f64 {
    reference.max() - reference.min()
}

/// `10 log₁₀(range² / MSE)`; identical inputs give `+∞`.
pub fn psnr(x: &Volume, reference: &Volume, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    let mse = x.data.iter().zip(&reference.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Sums over every full window of `w` voxels along `axis` (valid positions only).
fn box_sum(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - w;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let base = (z * dims[1] + y) * dims[0] + x;
                out.push((0..w).map(|k| data[base + k * stride]).sum());
            }
        }
    }
    (out, out_dims)
}

fn window_means(data: &[f64], dims: [usize; 3], ndim: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut d = dims;
    for axis in 0..ndim {
        let (next, nd) = box_sum(&cur, d, axis, SSIM_WINDOW);
        cur = next;
        d = nd;
    }
    let n = SSIM_WINDOW.pow(ndim as u32) as f64;
    cur.iter_mut().for_each(|v| *v /= n);
    cur
}

/// Mean structural similarity over all full 7-wide (7×7 or 7×7×7) uniform
/// windows, with `C₁ = (0.01·range)²`, `C₂ = (0.03·range)²` and sample
/// (n − 1) variances.
pub fn ssim(x: &Volume, reference: &Volume, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    let ndim = x.grid.ndim();
    let dims = x.grid.shape();
    if x.grid.dims().iter().any(|&n| n < SSIM_WINDOW) {
        return Err(Error::Shape(format!(
            "image {:?} is smaller than the {SSIM_WINDOW}-voxel window",
            x.grid.dims()
        )));
    }
    let a = &x.data;
    let b = &reference.data;
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let ma = window_means(a, dims, ndim);
    let mb = window_means(b, dims, ndim);
    let maa = window_means(&prod(a, a), dims, ndim);
    let mbb = window_means(&prod(b, b), dims, ndim);
    let mab = window_means(&prod(a, b), dims, ndim);
    let n = SSIM_WINDOW.pow(ndim as u32) as f64;
    let corr = n / (n - 1.0);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..ma.len() {
        let va = corr * (maa[i] - ma[i] * ma[i]);
        let vb = corr * (mbb[i] - mb[i] * mb[i]);
        let cov = corr * (mab[i] - ma[i] * mb[i]);
        let num = (2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2);
        let den = (ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / ma.len() as f64)
}

/// Region of interest in mm coordinates. In 2D the z components are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoiSpec {
    /// Cylinder of `radius` around `axis` through `center`, `half_length`
    /// along the axis; a disk in 2D.
    Cylinder { center: [f64; 3], radius: f64, half_length: f64, axis: [f64; 3] },
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

impl RoiSpec {
    pub fn disk(cx: f64, cy: f64, radius: f64) -> Self {
        RoiSpec::Cylinder { center: [cx, cy, 0.0], radius, half_length: f64::INFINITY, axis: [0.0, 0.0, 1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            RoiSpec::Cylinder { radius, half_length, axis, .. } => {
                let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
                *radius > 0.0 && *half_length > 0.0 && (n - 1.0).abs() < 1e-6
            }
            RoiSpec::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid ROI {self:?}")))
        }
    }

    pub fn contains(&self, p: [f64; 3], ndim: usize) -> bool {
        let flat = |v: [f64; 3]| if ndim == 2 { [v[0], v[1], 0.0] } else { v };
        match self {
            RoiSpec::Cylinder { center, radius, half_length, axis } => {
                let c = flat(*center);
                let d = [p[0] - c[0], p[1] - c[1], if ndim == 2 { 0.0 } else { p[2] - c[2] }];
                let ax = if ndim == 2 { [0.0, 0.0, 1.0] } else { *axis };
                let along = d[0] * ax[0] + d[1] * ax[1] + d[2] * ax[2];
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - along * along;
                r2 <= radius * radius && along.abs() <= *half_length
            }
            RoiSpec::Box { center, half_extents } => {
                (0..ndim).all(|a| (p[a] - center[a]).abs() <= half_extents[a])
            }
        }
    }

    /// Flat indices of the voxels whose centers lie inside the region.
    pub fn voxels(&self, grid: &GridSpec) -> Vec<usize> {
        let [nx, ny, nz] = grid.shape();
        let ndim = grid.ndim();
        let mut out = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let zc = if ndim == 3 { grid.center(2, z) } else { 0.0 };
                    if self.contains([grid.center(0, x), grid.center(1, y), zc], ndim) {
                        out.push(grid.index(x, y, z));
                    }
                }
            }
        }
        out
    }
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = if n > 1 { values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    (mean, var, n)
}

/// `|μᵢ − μₛ| / √(σᵢ² + σₛ²)` with the surround statistics pooled over all
/// surround regions.
pub fn cnr(vol: &Volume, insert: &RoiSpec, surround: &[RoiSpec]) -> Result<f64> {
    insert.validate()?;
    let inside = insert.voxels(&vol.grid);
    let mut outside: Vec<usize> = Vec::new();
    for r in surround {
        r.validate()?;
        outside.extend(r.voxels(&vol.grid));
    }
    outside.sort_unstable();
    outside.dedup();
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::InvalidArgument("CNR regions contain no voxels".into()));
    }
    if inside.iter().any(|i| outside.binary_search(i).is_ok()) {
        return Err(Error::InvalidArgument("insert and surround regions overlap".into()));
    }
    let (mi, vi, _) = mean_var(inside.iter().map(|&i| vol.data[i]));
    let (ms, vs, _) = mean_var(outside.iter().map(|&i| vol.data[i]));
    let noise = (vi + vs).sqrt();
    // Rounding in the means leaves residue on flat regions.
    let floor = 64.0 * f64::EPSILON * mi.abs().max(ms.abs());
    if noise <= floor {
        return Ok(if (mi - ms).abs() <= floor { 0.0 } else { f64::INFINITY });
    }
    Ok((mi - ms).abs() / noise)
}

/// Cumulative-normal edge `low + (high − low)·Φ((μ − r)/σ)` fitted to a
/// radial profile; `high` is the level inside radius `μ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EdgeFit {
    pub mu: f64,
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
    pub residual: f64,
}

impl EdgeFit {
    pub fn fwhm(&self) -> f64 {
        FWHM_PER_SIGMA * self.sigma
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.low + (self.high - self.low) * normal_cdf((self.mu - r) / self.sigma)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Bilinear interpolation in the axial slice `z` at mm position `(px, py)`;
/// `None` outside the grid.
fn bilinear(vol: &Volume, z: usize, px: f64, py: f64) -> Option<f64> {
    let g = &vol.grid;
    let [nx, ny, _] = g.shape();
    let fx = (px - g.first_center(0)) / g.pitch();
    let fy = (py - g.first_center(1)) / g.pitch();
    if fx < 0.0 || fy < 0.0 || fx > (nx - 1) as f64 || fy > (ny - 1) as f64 {
        return None;
    }
    let (ix, iy) = ((fx.floor() as usize).min(nx - 2), (fy.floor() as usize).min(ny - 2));
    let (tx, ty) = (fx - ix as f64, fy - iy as f64);
    let v = |x: usize, y: usize| vol.get(x, y, z);
    Some(
        (1.0 - ty) * ((1.0 - tx) * v(ix, iy) + tx * v(ix + 1, iy))
            + ty * ((1.0 - tx) * v(ix, iy + 1) + tx * v(ix + 1, iy + 1)),
    )
}

/// Angle-averaged radial profile about `center` (mm) over the part of `roi`
/// inside the grid: `(radius, mean value)` pairs at 0.25 mm spacing, each
/// averaged over 1° angular samples. 3D volumes use the axial slice nearest
/// `center[2]`.
pub fn radial_profile(vol: &Volume, roi: &RoiSpec, center: [f64; 3]) -> Result<Vec<(f64, f64)>> {
    roi.validate()?;
    let g = &vol.grid;
    if g.dims()[0] < 2 || g.dims()[1] < 2 {
        return Err(Error::Shape("radial profile needs at least 2×2 voxels in-plane".into()));
    }
    let ndim = g.ndim();
    let z = if ndim == 3 {
        let f = ((center[2] - g.first_center(2)) / g.pitch()).round();
        if f < 0.0 || f as usize >= g.shape()[2] {
            return Err(Error::InvalidArgument(format!("profile center z = {} is outside the grid", center[2])));
        }
        f as usize
    } else {
        0
    };
    let zc = if ndim == 3 { g.center(2, z) } else { 0.0 };
    let r_max = 0.5 * (g.extent(0).powi(2) + g.extent(1).powi(2)).sqrt()
        + (center[0].powi(2) + center[1].powi(2)).sqrt();
    let n_r = (r_max / POLAR_RADIAL_STEP_MM).ceil() as usize + 1;
    let n_a = (360.0 / POLAR_ANGLE_STEP_DEG).round() as usize;
    let mut out = Vec::new();
    for ir in 0..n_r {
        let r = ir as f64 * POLAR_RADIAL_STEP_MM;
        let (mut sum, mut count) = (0.0, 0usize);
        for ia in 0..n_a {
            let a = (ia as f64 * POLAR_ANGLE_STEP_DEG).to_radians();
            let (px, py) = (center[0] + r * a.cos(), center[1] + r * a.sin());
            if !roi.contains([px, py, zc], ndim) {
                continue;
            }
            if let Some(v) = bilinear(vol, z, px, py) {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            out.push((r, sum / count as f64));
        }
    }
    Ok(out)
}

/// Least-squares cumulative-normal fit by damped Gauss-Newton with an
/// analytic Jacobian, started from the 10 % / 90 % crossings.
pub fn fit_edge(profile: &[(f64, f64)]) -> Result<EdgeFit> {
    if profile.len() < 5 {
        return Err(Error::Fit { iterations: 0, residual: f64::NAN });
    }
    let k = (profile.len() / 10).max(1);
    let first = profile[..k].iter().map(|p| p.1).sum::<f64>() / k as f64;
    let last = profile[profile.len() - k..].iter().map(|p| p.1).sum::<f64>() / k as f64;
    let crossing = |level: f64| -> f64 {
        let target = last + level * (first - last);
        profile
            .windows(2)
            .find(|w| (w[0].1 - target) * (w[1].1 - target) <= 0.0 && w[0].1 != w[1].1)
            .map(|w| w[0].0 + (target - w[0].1) / (w[1].1 - w[0].1) * (w[1].0 - w[0].0))
            .unwrap_or(0.5 * (profile[0].0 + profile[profile.len() - 1].0))
    };
    let (r90, r10) = (crossing(0.9), crossing(0.1));
    let mut p = [
        0.5 * (r90 + r10),
        ((r10 - r90).abs() / 2.563).max(POLAR_RADIAL_STEP_MM),
        last,
        first,
    ];
    let cost = |p: &[f64; 4]| -> f64 {
        let f = EdgeFit { mu: p[0], sigma: p[1], low: p[2], high: p[3], residual: 0.0 };
        profile.iter().map(|&(r, v)| (f.eval(r) - v).powi(2)).sum()
    };
    let mut c = cost(&p);
    for it in 0..FIT_MAX_ITERATIONS {
        // Normal equations JᵀJ δ = −Jᵀr.
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for &(r, v) in profile {
            let s = (p[0] - r) / p[1];
            let (phi, pdf) = (normal_cdf(s), normal_pdf(s));
            let amp = p[3] - p[2];
            let res = p[2] + amp * phi - v;
            let j = nalgebra::Vector4::new(amp * pdf / p[1], -amp * pdf * s / p[1], 1.0 - phi, phi);
            jtj += j * j.transpose();
            jtr += j * res;
        }
        let Some(delta) = jtj.lu().solve(&(-jtr)) else {
            return Err(Error::Fit { iterations: it, residual: c });
        };
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-6 {
            let q = [
                p[0] + step * delta[0],
                p[1] + step * delta[1],
                p[2] + step * delta[2],
                p[3] + step * delta[3],
            ];
            if q[1] > 0.0 {
                let cq = cost(&q);
                if cq <= c {
                    accepted = Some((q, cq));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((q, cq)) = accepted else {
            return finish(p, c);
        };
        let change = (0..4).map(|i| (q[i] - p[i]).abs()).fold(0.0, f64::max);
        p = q;
        let done = c - cq <= 1e-14 * c.max(1e-300) || change <= 1e-12 * (1.0 + p[0].abs());
        c = cq;
        if done {
            return finish(p, c);
        }
    }
    Err(Error::Fit { iterations: FIT_MAX_ITERATIONS, residual: c })
}

fn finish(p: [f64; 4], c: f64) -> Result<EdgeFit> {
    if !(p.iter().all(|v| v.is_finite()) && p[1] > 0.0) {
        return Err(Error::Fit { iterations: 0, residual: c });
    }
    Ok(EdgeFit { mu: p[0], sigma: p[1], low: p[2], high: p[3], residual: c })
}

/// Edge fit of the radial profile about `center` inside `roi`, and the
/// FWHM of the corresponding Gaussian line-spread function in mm.
pub fn edge_fwhm(vol: &Volume, roi: &RoiSpec, center: [f64; 3]) -> Result<(EdgeFit, f64)> {
    let fit = fit_edge(&radial_profile(vol, roi, center)?)?;
    Ok((fit, fit.fwhm()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    /// Fixed z; image axes (x, y).
    Axial,
    /// Fixed y; image axes (x, z).
    Coronal,
    /// Fixed x; image axes (y, z).
    Sagittal,
}

impl std::str::FromStr for Plane {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            _ => Err(Error::InvalidArgument(format!("unknown plane {s:?}"))),
        }
    }
}

/// The 2D slice `index` of `plane` as a 2D volume with the volume's pitch.
pub fn slice(vol: &Volume, plane: Plane, index: usize) -> Result<Volume> {
    let [nx, ny, nz] = vol.grid.shape();
    let (w, h, limit) = match plane {
        Plane::Axial => (nx, ny, nz),
        Plane::Coronal => (nx, nz, ny),
        Plane::Sagittal => (ny, nz, nx),
    };
    if index >= limit {
        return Err(Error::InvalidArgument(format!("slice {index} is out of range 0..{limit}")));
    }
    if h == 1 || w == 1 {
        return Err(Error::InvalidArgument(format!("{plane:?} slice of a {:?} grid is one-dimensional", vol.grid.dims())));
    }
    let grid = GridSpec::new_2d(w, h, vol.grid.pitch())?;
    Ok(Volume::from_fn(grid, |i, j, _| match plane {
        Plane::Axial => vol.get(i, j, index),
        Plane::Coronal => vol.get(i, index, j),
        Plane::Sagittal => vol.get(index, i, j),
    }))
}

fn dft2(img: &Volume) -> Vec<Complex<f64>> {
    let [w, h, _] = img.grid.shape();
    let mut data: Vec<Complex<f64>> = img.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
    data
}

/// `|DFT|` of a 2D image with the zero frequency moved to `(w/2, h/2)`.
fn centered_magnitude(img: &Volume) -> Vec<f64> {
    let [w, h, _] = img.grid.shape();
    let f = dft2(img);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = ((x + w / 2) % w, (y + h / 2) % h);
            out[sy * w + sx] = f[y * w + x].norm();
        }
    }
    out
}

/// `log(1 + |DFT|)` of a slice, zero frequency centered at `(w/2, h/2)`.
pub fn dft_magnitude_slice(vol: &Volume, plane: Plane, index: usize) -> Result<Volume> {
    let img = slice(vol, plane, index)?;
    let mag = centered_magnitude(&img);
    Ok(Volume { grid: img.grid.clone(), data: mag.into_iter().map(|m| m.ln_1p()).collect() })
}

/// Share of the non-DC spectral energy `|DFT|²` of a slice lying in the
/// double wedge around the second image axis (the axial frequency axis for
/// coronal and sagittal slices): frequencies with `|k₁| ≤ |k₂|·tan(half_angle)`.
pub fn wedge_energy_ratio(vol: &Volume, plane: Plane, index: usize, half_angle: f64) -> Result<f64> {
    if !(half_angle > 0.0 && half_angle < PI / 2.0) {
        return Err(Error::InvalidArgument(format!("wedge half-angle must lie in (0, π/2), got {half_angle}")));
    }
    let img = slice(vol, plane, index)?;
    let [w, h, _] = img.grid.shape();
    let mag = centered_magnitude(&img);
    let tan = half_angle.tan();
    let (mut wedge, mut total) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            // Frequencies in cycles per sample, so non-square slices compare fairly.
            let k1 = (x as f64 - (w / 2) as f64) / w as f64;
            let k2 = (y as f64 - (h / 2) as f64) / h as f64;
            if k1 == 0.0 && k2 == 0.0 {
                continue;
            }
            let e = mag[y * w + x].powi(2);
            total += e;
            if k1.abs() <= k2.abs() * tan {
                wedge += e;
            }
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(wedge / total)
}
