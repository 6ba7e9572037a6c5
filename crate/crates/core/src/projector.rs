//! Discrete forward projection `A`, its exact adjoint `Aᵀ`, and the diagonal
//! row/column-sum preconditioners used by SIRT.
//!
//! Both geometries use interpolating ray models:
//!
//! * 2D parallel beam: Joseph's method. Each ray is sampled once per pixel
//!   column (or row, whichever axis the ray is closer to), the image is
//!   linearly interpolated across the other axis and each sample carries the
//!   ray length `pitch / |cos|` spent in that column. For rays through pixel
//!   centers this is the exact intersection length.
//! * 3D cone beam: samples at `t = k * Δ` from the source, `Δ = pitch / 2`,
//!   with trilinear interpolation and weight `Δ`.
//!
//! The 2D matrix is small enough to build once: the projector stores it and
//! its transpose in compressed rows. In 3D the adjoint is computed
//! voxel-driven: every voxel gathers the rays that touch it and re-evaluates
//! the forward weight with the same arithmetic. Either way `back_project` is
//! the true transpose of `forward_project`. Forward work is split by detector
//! row and adjoint work by voxel, neither shares accumulators, so the results
//! do not depend on the thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, Geometry, GridSpec, ParallelGeometry2D};
use crate::volume::{Sinogram, Volume};

/// Cone-beam sampling interval relative to the voxel pitch.
pub const CONE_STEP_FRACTION: f64 = 0.5;

/// A validated grid/geometry pair; applies `A` and `Aᵀ` on flat slices.
#[derive(Clone, Debug)]
pub struct Projector {
    grid: GridSpec,
    geometry: Geometry,
    matrix: Option<Arc<ParallelMatrix>>,
}

impl Projector {
    pub fn new(grid: GridSpec, geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        if grid.ndim() != geometry.ndim() {
            return Err(Error::Shape(format!(
                "{}D grid cannot be used with a {}D geometry",
                grid.ndim(),
                geometry.ndim()
            )));
        }
        if let Geometry::Cone(g) = &geometry {
            // Every voxel support must stay in front of the source.
            let rx = grid.extent(0) * 0.5 + grid.pitch();
            let ry = grid.extent(1) * 0.5 + grid.pitch();
            if (rx * rx + ry * ry).sqrt() >= g.sad {
                return Err(Error::InvalidGeometry(format!(
                    "grid half-diagonal {:.3} mm reaches the source orbit (sad = {})",
                    (rx * rx + ry * ry).sqrt(),
                    g.sad
                )));
            }
        }
        let matrix = match &geometry {
            Geometry::Parallel(g) => Some(Arc::new(ParallelMatrix::new(&grid, g))),
            Geometry::Cone(_) => None,
        };
        Ok(Projector { grid, geometry, matrix })
    }

    fn matrix(&self) -> &ParallelMatrix {
        self.matrix.as_deref().expect("parallel geometry has a matrix")
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn volume_len(&self) -> usize {
        self.grid.len()
    }

    pub fn sinogram_len(&self) -> usize {
        self.geometry.sinogram_len()
    }

    /// `out = A x`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.volume_len(), "volume length");
        assert_eq!(out.len(), self.sinogram_len(), "sinogram length");
        match &self.geometry {
            Geometry::Parallel(_) => self.matrix().a.apply(x, out),
            Geometry::Cone(g) => cone_forward(&self.grid, g, x, out),
        }
    }

    /// `out = Aᵀ s`.
    pub fn adjoint_into(&self, s: &[f64], out: &mut [f64]) {
        assert_eq!(s.len(), self.sinogram_len(), "sinogram length");
        assert_eq!(out.len(), self.volume_len(), "volume length");
        match &self.geometry {
            Geometry::Parallel(_) => self.matrix().at.apply(s, out),
            Geometry::Cone(g) => cone_adjoint(&self.grid, g, s, out),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.sinogram_len()];
        self.forward_into(x, &mut out);
        out
    }

    pub fn adjoint(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.volume_len()];
        self.adjoint_into(s, &mut out);
        out
    }

    pub fn project(&self, x: &Volume) -> Result<Sinogram> {
        self.check_volume(x)?;
        Ok(Sinogram { geometry: self.geometry.clone(), data: self.forward(&x.data) })
    }

    pub fn back_project(&self, s: &Sinogram) -> Result<Volume> {
        self.check_sinogram(s)?;
        Ok(Volume { grid: self.grid.clone(), data: self.adjoint(&s.data) })
    }

    pub fn check_volume(&self, x: &Volume) -> Result<()> {
        if x.grid.dims() != self.grid.dims() || x.data.len() != self.volume_len() {
            return Err(Error::Shape(format!(
                "volume dims {:?} do not match projector grid {:?}",
                x.grid.dims(),
                self.grid.dims()
            )));
        }
        Ok(())
    }

    pub fn check_sinogram(&self, s: &Sinogram) -> Result<()> {
        if s.geometry.sinogram_shape() != self.geometry.sinogram_shape()
            || s.data.len() != self.sinogram_len()
        {
            return Err(Error::Shape(format!(
                "sinogram shape {:?} does not match geometry {:?}",
                s.geometry.sinogram_shape(),
                self.geometry.sinogram_shape()
            )));
        }
        Ok(())
    }

    pub fn scalings(&self) -> SirtScaling {
        let row_sums = self.forward(&vec![1.0; self.volume_len()]);
        let col_sums = self.adjoint(&vec![1.0; self.sinogram_len()]);
        SirtScaling { col_inv: reciprocal_or_zero(&col_sums), row_inv: reciprocal_or_zero(&row_sums) }
    }

    /// `out = C Aᵀ R (y − A x)`, the preconditioned descent direction.
    /// `residual` is scratch space of sinogram length; returns the residual
    /// norms of the input iterate.
    pub fn scaled_gradient_into(
        &self,
        x: &[f64],
        y: &[f64],
        sc: &SirtScaling,
        residual: &mut [f64],
        out: &mut [f64],
    ) -> ResidualNorms {
        self.forward_into(x, residual);
        let mut plain = 0.0;
        let mut weighted = 0.0;
        for ((r, yi), w) in residual.iter_mut().zip(y).zip(&sc.row_inv) {
            let d = yi - *r;
            plain += d * d;
            weighted += w * d * d;
            *r = d * w;
        }
        self.adjoint_into(residual, out);
        for (o, c) in out.iter_mut().zip(&sc.col_inv) {
            *o *= c;
        }
        ResidualNorms { plain: plain.sqrt(), weighted: weighted.sqrt() }
    }

    /// Largest eigenvalue of `AᵀA` by power iteration from the all-ones vector.
    pub fn norm_squared_estimate(&self, iterations: usize) -> f64 {
        let mut v = vec![1.0; self.volume_len()];
        let mut estimate = 0.0;
        for _ in 0..iterations {
            let n = crate::volume::l2_norm(&v);
            if n == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|x| *x /= n);
            let w = self.adjoint(&self.forward(&v));
            estimate = crate::volume::dot(&v, &w);
            v = w;
        }
        estimate
    }
}

/// `‖y − Ax‖₂` and the `R`-weighted `‖y − Ax‖_R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualNorms {
    pub plain: f64,
    pub weighted: f64,
}

fn reciprocal_or_zero(sums: &[f64]) -> Vec<f64> {
    sums.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect()
}

/// Diagonals of the SIRT preconditioners: `col_inv = 1 / Aᵀ1`, `row_inv = 1 / A1`,
/// with zero sums mapped to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SirtScaling {
    pub col_inv: Vec<f64>,
    pub row_inv: Vec<f64>,
}

pub fn forward_project(x: &Volume, geo: &Geometry) -> Result<Sinogram> {
    Projector::new(x.grid.clone(), geo.clone())?.project(x)
}

pub fn back_project(s: &Sinogram, grid: &GridSpec) -> Result<Volume> {
    Projector::new(grid.clone(), s.geometry.clone())?.back_project(s)
}

pub fn sirt_scalings(geo: &Geometry, grid: &GridSpec) -> Result<SirtScaling> {
    Ok(Projector::new(grid.clone(), geo.clone())?.scalings())
}

pub fn apply_scaled_gradient(
    x: &Volume,
    y: &Sinogram,
    sc: &SirtScaling,
    geo: &Geometry,
) -> Result<Volume> {
    let op = Projector::new(x.grid.clone(), geo.clone())?;
    op.check_volume(x)?;
    op.check_sinogram(y)?;
    if sc.col_inv.len() != op.volume_len() || sc.row_inv.len() != op.sinogram_len() {
        return Err(Error::Shape("scaling does not match grid/geometry".into()));
    }
    let mut residual = vec![0.0; op.sinogram_len()];
    let mut out = vec![0.0; op.volume_len()];
    op.scaled_gradient_into(&x.data, &y.data, sc, &mut residual, &mut out);
    Ok(Volume { grid: x.grid.clone(), data: out })
}

// ---------------------------------------------------------------------------
// 2D parallel beam (Joseph)

#[derive(Clone, Copy)]
struct ParallelView {
    cos: f64,
    sin: f64,
    /// Ray is sampled per column (x) when true, per row (y) otherwise.
    along_x: bool,
    /// Ray length per sample.
    weight: f64,
}

impl ParallelView {
    fn new(angle: f64, pitch: f64) -> Self {
        let (sin, cos) = angle.sin_cos();
        let along_x = cos.abs() >= sin.abs();
        let weight = if along_x { pitch / cos.abs() } else { pitch / sin.abs() };
        ParallelView { cos, sin, along_x, weight }
    }

    /// Position along the interpolation axis where ray `u` crosses the
    /// sampling line at coordinate `coord` on the stepping axis.
    #[inline]
    fn crossing(&self, u: f64, coord: f64) -> f64 {
        if self.along_x {
            (u + self.sin * coord) / self.cos
        } else {
            (self.cos * coord - u) / self.sin
        }
    }
}

/// Split a continuous index into `(floor, fraction)`.
#[inline]
fn split_index(f: f64) -> (isize, f64) {
    let i = f.floor();
    (i as isize, f - i)
}

/// Compressed sparse rows: `cols[start[r]..start[r + 1]]` with matching `vals`.
#[derive(Clone, Debug)]
struct Csr {
    start: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.par_chunks_mut(256).enumerate().for_each(|(c, chunk)| {
            for (k, o) in chunk.iter_mut().enumerate() {
                let r = c * 256 + k;
                let (a, b) = (self.start[r], self.start[r + 1]);
                *o = self.cols[a..b].iter().zip(&self.vals[a..b]).map(|(&j, w)| w * x[j as usize]).sum();
            }
        });
    }

    /// Transpose by counting sort; entries of each new row keep the order of
    /// their old rows.
    fn transpose(&self, n_cols: usize) -> Csr {
        let mut count = vec![0usize; n_cols + 1];
        for &j in &self.cols {
            count[j as usize + 1] += 1;
        }
        for j in 0..n_cols {
            count[j + 1] += count[j];
        }
        let start = count.clone();
        let mut fill = count;
        let mut cols = vec![0u32; self.cols.len()];
        let mut vals = vec![0.0; self.vals.len()];
        for r in 0..self.start.len() - 1 {
            for e in self.start[r]..self.start[r + 1] {
                let j = self.cols[e] as usize;
                cols[fill[j]] = r as u32;
                vals[fill[j]] = self.vals[e];
                fill[j] += 1;
            }
        }
        Csr { start, cols, vals }
    }
}

/// The 2D system matrix and its transpose, built once per projector.
#[derive(Clone, Debug)]
struct ParallelMatrix {
    a: Csr,
    at: Csr,
}

impl ParallelMatrix {
    fn new(grid: &GridSpec, geo: &ParallelGeometry2D) -> Self {
        let [nx, ny, _] = grid.shape();
        let pitch = grid.pitch();
        let x0 = grid.first_center(0);
        let y0 = grid.first_center(1);
        let mut start = Vec::with_capacity(geo.sinogram_len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        start.push(0);
        for &angle in &geo.angles {
            let view = ParallelView::new(angle, pitch);
            let (n_step, n_interp, step0, interp0) =
                if view.along_x { (nx, ny, x0, y0) } else { (ny, nx, y0, x0) };
            for b in 0..geo.n_det {
                let u = geo.det_coord(b);
                for i in 0..n_step {
                    let coord = step0 + i as f64 * pitch;
                    let pos = view.crossing(u, coord);
                    let (j0, f) = split_index((pos - interp0) / pitch);
                    for (j, w) in [(j0, 1.0 - f), (j0 + 1, f)] {
                        if j < 0 || j as usize >= n_interp || w == 0.0 {
                            continue;
                        }
                        let j = j as usize;
                        let voxel = if view.along_x { j * nx + i } else { i * nx + j };
                        cols.push(voxel as u32);
                        vals.push(w * view.weight);
                    }
                }
                start.push(cols.len());
            }
        }
        let a = Csr { start, cols, vals };
        let at = a.transpose(nx * ny);
        ParallelMatrix { a, at }
    }
}

// ---------------------------------------------------------------------------
// 3D cone beam

#[derive(Clone, Copy)]
struct ConeView {
    /// Unit vector from the rotation axis toward the source.
    e: [f64; 3],
    /// Panel column axis.
    u: [f64; 3],
    source: [f64; 3],
}

impl ConeView {
    fn new(angle: f64, sad: f64) -> Self {
        let (sin, cos) = angle.sin_cos();
        ConeView {
            e: [cos, sin, 0.0],
            u: [-sin, cos, 0.0],
            source: [sad * cos, sad * sin, 0.0],
        }
    }

    /// Unit direction of the ray from the source through panel point `(u, v)`.
    #[inline]
    fn direction(&self, sdd: f64, u: f64, v: f64) -> [f64; 3] {
        let d = [
            -sdd * self.e[0] + u * self.u[0],
            -sdd * self.e[1] + u * self.u[1],
            v,
        ];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }

    #[inline]
    fn point(&self, dir: &[f64; 3], t: f64) -> [f64; 3] {
        [
            self.source[0] + t * dir[0],
            self.source[1] + t * dir[1],
            self.source[2] + t * dir[2],
        ]
    }

    /// Panel coordinates where the ray through `p` lands.
    #[inline]
    fn project_point(&self, sad: f64, sdd: f64, p: [f64; 3]) -> (f64, f64) {
        let depth = sad - (p[0] * self.e[0] + p[1] * self.e[1]);
        let scale = sdd / depth;
        ((p[0] * self.u[0] + p[1] * self.u[1]) * scale, p[2] * scale)
    }
}

/// Parametric interval `[t0, t1]` of the ray inside the axis-aligned box.
#[inline]
fn clip_to_box(
    origin: &[f64; 3],
    dir: &[f64; 3],
    lo: &[f64; 3],
    hi: &[f64; 3],
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] <= lo[a] || origin[a] >= hi[a] {
                return None;
            }
        } else {
            let ta = (lo[a] - origin[a]) / dir[a];
            let tb = (hi[a] - origin[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    (t0 < t1).then_some((t0, t1))
}

struct ConeSetup {
    delta: f64,
    origin: [f64; 3],
    pitch: f64,
    shape: [usize; 3],
}

impl ConeSetup {
    fn new(grid: &GridSpec) -> Self {
        ConeSetup {
            delta: CONE_STEP_FRACTION * grid.pitch(),
            origin: [grid.first_center(0), grid.first_center(1), grid.first_center(2)],
            pitch: grid.pitch(),
            shape: grid.shape(),
        }
    }

    #[inline]
    fn fractional(&self, p: &[f64; 3]) -> [(isize, f64); 3] {
        [
            split_index((p[0] - self.origin[0]) / self.pitch),
            split_index((p[1] - self.origin[1]) / self.pitch),
            split_index((p[2] - self.origin[2]) / self.pitch),
        ]
    }

    #[inline]
    fn sample_range(&self, t0: f64, t1: f64) -> (i64, i64) {
        ((t0 / self.delta).ceil() as i64, (t1 / self.delta).floor() as i64)
    }
}

#[inline]
fn axis_weight(idx: (isize, f64), target: usize) -> f64 {
    let (i0, f) = idx;
    if i0 == target as isize {
        1.0 - f
    } else if i0 + 1 == target as isize {
        f
    } else {
        0.0
    }
}

fn cone_forward(grid: &GridSpec, geo: &ConeBeamGeometry, x: &[f64], out: &mut [f64]) {
    let setup = ConeSetup::new(grid);
    let [nx, ny, nz] = setup.shape;
    let lo = [
        setup.origin[0] - setup.pitch,
        setup.origin[1] - setup.pitch,
        setup.origin[2] - setup.pitch,
    ];
    let hi = [
        grid.center(0, nx - 1) + setup.pitch,
        grid.center(1, ny - 1) + setup.pitch,
        grid.center(2, nz - 1) + setup.pitch,
    ];
    let cols = geo.det_cols;
    out.par_chunks_mut(cols).enumerate().for_each(|(row_idx, row)| {
        let k = row_idx / geo.det_rows;
        let r = row_idx % geo.det_rows;
        let view = ConeView::new(geo.angles[k], geo.sad);
        let v = geo.row_coord(r);
        for (c, bin) in row.iter_mut().enumerate() {
            let dir = view.direction(geo.sdd, geo.col_coord(c), v);
            let Some((t0, t1)) = clip_to_box(&view.source, &dir, &lo, &hi) else {
                *bin = 0.0;
                continue;
            };
            let (k0, k1) = setup.sample_range(t0, t1);
            let mut acc = 0.0;
            for ks in k0..=k1 {
                let p = view.point(&dir, ks as f64 * setup.delta);
                let [(ix, fx), (iy, fy), (iz, fz)] = setup.fractional(&p);
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    let z = iz + dz;
                    if z < 0 || z as usize >= nz {
                        continue;
                    }
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        let y = iy + dy;
                        if y < 0 || y as usize >= ny {
                            continue;
                        }
                        let base = (z as usize * ny + y as usize) * nx;
                        let wzy = wz * wy;
                        if ix >= 0 && (ix as usize) < nx {
                            acc += wzy * (1.0 - fx) * x[base + ix as usize];
                        }
                        if ix + 1 >= 0 && ((ix + 1) as usize) < nx {
                            acc += wzy * fx * x[base + (ix + 1) as usize];
                        }
                    }
                }
            }
            *bin = acc * setup.delta;
        }
    });
}

/// Scatter along the same samples as [`cone_forward`], one z-plane per task so
/// every voxel sums its rays in a fixed order whatever the thread count.
fn cone_adjoint(grid: &GridSpec, geo: &ConeBeamGeometry, s: &[f64], out: &mut [f64]) {
    let setup = ConeSetup::new(grid);
    let [nx, ny, _] = setup.shape;
    let views: Vec<ConeView> = geo.angles.iter().map(|&a| ConeView::new(a, geo.sad)).collect();
    let panel = geo.det_rows * geo.det_cols;
    let half_r = (geo.det_rows as f64 - 1.0) * 0.5;
    let pitch = setup.pitch;
    let lo_xy = [setup.origin[0] - pitch, setup.origin[1] - pitch];
    let hi_xy = [grid.center(0, nx - 1) + pitch, grid.center(1, ny - 1) + pitch];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(iz, plane)| {
        plane.fill(0.0);
        let zc = grid.center(2, iz);
        let lo = [lo_xy[0], lo_xy[1], zc - pitch];
        let hi = [hi_xy[0], hi_xy[1], zc + pitch];
        for (k, view) in views.iter().enumerate() {
            let proj = &s[k * panel..(k + 1) * panel];
            let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
            for corner in 0..8 {
                let p = [
                    if corner & 1 == 0 { lo[0] } else { hi[0] },
                    if corner & 2 == 0 { lo[1] } else { hi[1] },
                    if corner & 4 == 0 { lo[2] } else { hi[2] },
                ];
                let (_, v) = view.project_point(geo.sad, geo.sdd, p);
                vmin = vmin.min(v);
                vmax = vmax.max(v);
            }
            let Some((r0, r1)) = bin_range(vmin, vmax, geo.det_pitch, half_r, geo.det_rows) else {
                continue;
            };
            for r in r0..=r1 {
                let v = geo.row_coord(r);
                for c in 0..geo.det_cols {
                    let value = proj[r * geo.det_cols + c];
                    if value == 0.0 {
                        continue;
                    }
                    let dir = view.direction(geo.sdd, geo.col_coord(c), v);
                    let Some((t0, t1)) = clip_to_box(&view.source, &dir, &lo, &hi) else {
                        continue;
                    };
                    let (k0, k1) = setup.sample_range(t0, t1);
                    for ks in k0..=k1 {
                        let p = view.point(&dir, ks as f64 * setup.delta);
                        let [(ix, fx), (iy, fy), fz] = setup.fractional(&p);
                        let wz = axis_weight(fz, iz) * value;
                        if wz == 0.0 {
                            continue;
                        }
                        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                            let y = iy + dy;
                            if y < 0 || y as usize >= ny {
                                continue;
                            }
                            let base = y as usize * nx;
                            let wzy = wz * wy;
                            if ix >= 0 && (ix as usize) < nx {
                                plane[base + ix as usize] += wzy * (1.0 - fx);
                            }
                            if ix + 1 >= 0 && ((ix + 1) as usize) < nx {
                                plane[base + (ix + 1) as usize] += wzy * fx;
                            }
                        }
                    }
                }
            }
        }
        plane.iter_mut().for_each(|a| *a *= setup.delta);
    });
}

/// Inclusive bin index range covering panel coordinates `[lo, hi]`.
fn bin_range(lo: f64, hi: f64, pitch: f64, half: f64, n: usize) -> Option<(usize, usize)> {
    let a = (lo / pitch + half).floor();
    let b = (hi / pitch + half).ceil();
    if b < 0.0 || a > (n - 1) as f64 {
        return None;
    }
    Some((a.max(0.0) as usize, (b as usize).min(n - 1)))
}
