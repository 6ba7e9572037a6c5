//! Independent oracles shared by the integration tests.
//!
//! The dense matrices are built by enumerating every (ray, voxel) pair with
//! closed-form interpolation weights, independent of the stepping code in
//! the library.
#![allow(dead_code)]

pub mod fd;

use lsirt_core::metrics::normal_cdf;
use lsirt_core::projector::CONE_STEP_FRACTION;
use lsirt_core::volume::dot;
use lsirt_core::{ConeBeamGeometry, GridSpec, ParallelGeometry2D, Projector};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn hat(d: f64, pitch: f64) -> f64 {
    (1.0 - d.abs() / pitch).max(0.0)
}

/// Rows are rays (angle-major), columns are pixels (x fastest).
pub fn dense_parallel(grid: &GridSpec, geo: &ParallelGeometry2D) -> Vec<Vec<f64>> {
    let [nx, ny, _] = grid.shape();
    let p = grid.pitch();
    let mut rows = Vec::new();
    for &angle in &geo.angles {
        let (s, c) = angle.sin_cos();
        for b in 0..geo.n_det {
            let u = (b as f64 - (geo.n_det as f64 - 1.0) / 2.0) * geo.det_pitch;
            let mut row = vec![0.0; nx * ny];
            for j in 0..ny {
                for i in 0..nx {
                    let xc = grid.center(0, i);
                    let yc = grid.center(1, j);
                    row[j * nx + i] = if c.abs() >= s.abs() {
                        // Ray point with x = xc: u n + t d, n = (-s, c), d = (c, s).
                        let t = (xc + u * s) / c;
                        let y = u * c + t * s;
                        p / c.abs() * hat(y - yc, p)
                    } else {
                        let t = (yc - u * c) / s;
                        let x = -u * s + t * c;
                        p / s.abs() * hat(x - xc, p)
                    };
                }
            }
            rows.push(row);
        }
    }
    rows
}

pub fn dense_cone(grid: &GridSpec, geo: &ConeBeamGeometry) -> Vec<Vec<f64>> {
    let [nx, ny, nz] = grid.shape();
    let p = grid.pitch();
    let delta = CONE_STEP_FRACTION * p;
    let mut rows = Vec::new();
    for &beta in &geo.angles {
        let src = [geo.sad * beta.cos(), geo.sad * beta.sin(), 0.0];
        for r in 0..geo.det_rows {
            for c in 0..geo.det_cols {
                let u = (c as f64 - (geo.det_cols as f64 - 1.0) / 2.0) * geo.det_pitch;
                let v = (r as f64 - (geo.det_rows as f64 - 1.0) / 2.0) * geo.det_pitch;
                let det = [
                    (geo.sad - geo.sdd) * beta.cos() - u * beta.sin(),
                    (geo.sad - geo.sdd) * beta.sin() + u * beta.cos(),
                    v,
                ];
                let d = [det[0] - src[0], det[1] - src[1], det[2] - src[2]];
                let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let dir = [d[0] / len, d[1] / len, d[2] / len];
                let mut row = vec![0.0; nx * ny * nz];
                let n_samples = (geo.sdd / delta).ceil() as usize;
                for k in 0..=n_samples {
                    let t = k as f64 * delta;
                    let q = [src[0] + t * dir[0], src[1] + t * dir[1], src[2] + t * dir[2]];
                    let inside = (0..3).all(|a| {
                        q[a] > grid.center(a, 0) - p && q[a] < grid.center(a, grid.shape()[a] - 1) + p
                    });
                    if !inside {
                        continue;
                    }
                    for z in 0..nz {
                        let wz = hat(q[2] - grid.center(2, z), p);
                        if wz == 0.0 {
                            continue;
                        }
                        for y in 0..ny {
                            let wy = hat(q[1] - grid.center(1, y), p);
                            for x in 0..nx {
                                let wx = hat(q[0] - grid.center(0, x), p);
                                row[grid.index(x, y, z)] += delta * wx * wy * wz;
                            }
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
    rows
}

pub fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Largest deviations of the operator from a dense matrix: absolute for A
/// and Aᵀ entries, relative for the row and column inverse sums.
#[derive(Debug, Default)]
pub struct DenseMismatch {
    pub forward: f64,
    pub adjoint: f64,
    pub rows: f64,
    pub cols: f64,
}

pub fn dense_mismatch(op: &Projector, dense: &[Vec<f64>]) -> DenseMismatch {
    let n_vox = op.volume_len();
    let n_ray = op.sinogram_len();
    assert_eq!(dense.len(), n_ray);
    let mut m = DenseMismatch::default();
    for j in 0..n_vox {
        let col = op.forward(&unit(n_vox, j));
        for i in 0..n_ray {
            m.forward = m.forward.max((col[i] - dense[i][j]).abs());
        }
    }
    for i in 0..n_ray {
        let row = op.adjoint(&unit(n_ray, i));
        for j in 0..n_vox {
            m.adjoint = m.adjoint.max((row[j] - dense[i][j]).abs());
        }
    }
    let sc = op.scalings();
    let inv = |s: f64| if s > 0.0 { 1.0 / s } else { 0.0 };
    for i in 0..n_ray {
        let expect = inv(dense[i].iter().sum());
        m.rows = m.rows.max((sc.row_inv[i] - expect).abs() / expect.max(1.0));
    }
    for j in 0..n_vox {
        let expect = inv(dense.iter().map(|r| r[j]).sum());
        m.cols = m.cols.max((sc.col_inv[j] - expect).abs() / expect.max(1.0));
    }
    m
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn adjoint_gap(op: &Projector, rng: &mut ChaCha8Rng) -> f64 {
    let x = random_vec(rng, op.volume_len());
    let s = random_vec(rng, op.sinogram_len());
    let ax = op.forward(&x);
    let ats = op.adjoint(&s);
    let lhs = dot(&ax, &s);
    let rhs = dot(&x, &ats);
    (lhs - rhs).abs() / (dot(&ax, &ax).sqrt() * dot(&s, &s).sqrt())
}

/// Minimum C⁻¹-norm solution of the R-weighted least-squares problem, the
/// fixed point scaled SIRT reaches from zero.
pub fn weighted_min_norm(op: &Projector, y: &[f64]) -> Vec<f64> {
    let sc = op.scalings();
    let (m, n) = (op.sinogram_len(), op.volume_len());
    let mut a = DMatrix::<f64>::zeros(m, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = op.forward(&e);
        for i in 0..m {
            a[(i, j)] = sc.row_inv[i].sqrt() * col[i] * sc.col_inv[j].sqrt();
        }
    }
    let rhs = DVector::from_iterator(m, y.iter().zip(&sc.row_inv).map(|(v, w)| v * w.sqrt()));
    let z = a.pseudo_inverse(1e-10).unwrap() * rhs;
    z.iter().zip(&sc.col_inv).map(|(v, c)| v * c.sqrt()).collect()
}

/// Exact value at distance `r` from the centre of a radius-`big_r` disk
/// convolved with an isotropic Gaussian of width `sigma`.
pub fn blurred_disk(r: f64, big_r: f64, sigma: f64) -> f64 {
    let n = 4000;
    let h = 2.0 * big_r / n as f64;
    let f = |t: f64| {
        let w = (big_r * big_r - t * t).max(0.0).sqrt();
        let pdf = (-0.5 * (t / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        pdf * (normal_cdf((w - r) / sigma) - normal_cdf((-w - r) / sigma))
    };
    let mut s = f(-big_r) + f(big_r);
    for k in 1..n {
        let t = -big_r + k as f64 * h;
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(t);
    }
    s * h / 3.0
}
