//! Training and evaluation objects, plus the additive measurement noise model.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::rng::{RngSeed, Stream};
use crate::volume::{Sinogram, Volume};

pub const TRIANGLE_COUNT: usize = 6;
pub const ELLIPSOID_COUNT: usize = 20;
/// Ellipsoid radii are `|u|` with `u ~ U(-R, R)`, so `Var(u) = R² / 3 = 128 / 3`.
pub const ELLIPSOID_RADIUS_BOUND: f64 = 11.313_708_498_984_761; // √128

/// Variance of the additive Gaussian noise on each detector bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub intensity: f64,
}

impl NoiseLevel {
    pub const NONE: NoiseLevel = NoiseLevel { intensity: 0.0 };
    pub const LOW: NoiseLevel = NoiseLevel { intensity: 0.0025 };
    pub const MEDIUM: NoiseLevel = NoiseLevel { intensity: 0.0225 };
    pub const HIGH: NoiseLevel = NoiseLevel { intensity: 0.0625 };

    pub fn from_sigma(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(NoiseLevel { intensity: sigma * sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.intensity.sqrt()
    }

    /// `low`, `medium`, `high` or `none`.
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::NONE),
            "low" => Some(Self::LOW),
            "medium" => Some(Self::MEDIUM),
            "high" => Some(Self::HIGH),
            _ => None,
        }
    }
}

fn check_dims(dims: &[usize], ndim: usize, min: usize) -> Result<()> {
    if dims.len() != ndim || dims.iter().any(|&d| d < min) {
        return Err(Error::InvalidArgument(format!(
            "expected {ndim} dims of at least {min} voxels, got {dims:?}"
        )));
    }
    Ok(())
}

/// Six filled triangles with Gamma(1, 1) intensities, summed where they
/// overlap and scaled to unit L2 norm.
pub fn gen_triangles(seed: RngSeed, dims: [usize; 2], pitch: f64) -> Result<Volume> {
    check_dims(&dims, 2, 8)?;
    let grid = GridSpec::new(&dims, pitch)?;
    let mut rng = seed.rng(Stream::Phantom);
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma parameters");
    let ux = Uniform::new(0.0, dims[0] as f64).expect("valid range");
    let uy = Uniform::new(0.0, dims[1] as f64).expect("valid range");
    loop {
        let mut data = vec![0.0; grid.len()];
        for _ in 0..TRIANGLE_COUNT {
            let tri = [
                [ux.sample(&mut rng), uy.sample(&mut rng)],
                [ux.sample(&mut rng), uy.sample(&mut rng)],
                [ux.sample(&mut rng), uy.sample(&mut rng)],
            ];
            let intensity: f64 = gamma.sample(&mut rng);
            fill_triangle(&mut data, dims, tri, intensity);
        }
        let norm = crate::volume::l2_norm(&data);
        // Six triangles missing every pixel center is possible but rare;
        // redraw so the normalization is defined.
        if norm > 0.0 {
            data.iter_mut().for_each(|v| *v /= norm);
            return Ok(Volume { grid, data });
        }
    }
}

/// Rasterize with the top-left fill rule: a pixel center on a shared edge
/// belongs to exactly one of the triangles meeting there.
fn fill_triangle(data: &mut [f64], dims: [usize; 2], mut tri: [[f64; 2]; 3], value: f64) {
    let edge = |a: [f64; 2], b: [f64; 2], p: [f64; 2]| {
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    };
    let area = edge(tri[0], tri[1], tri[2]);
    if area == 0.0 {
        return;
    }
    if area < 0.0 {
        tri.swap(1, 2);
    }
    // With counter-clockwise winding, "top" edges run right-to-left
    // horizontally and "left" edges run downward.
    let owns_boundary = |a: [f64; 2], b: [f64; 2]| {
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        (dy == 0.0 && dx < 0.0) || dy < 0.0
    };
    let edges = [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])];
    let xmin = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let xmax = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let ymin = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let ymax = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let i0 = (xmin - 0.5).floor().max(0.0) as usize;
    let i1 = ((xmax - 0.5).ceil().max(0.0) as usize).min(dims[0] - 1);
    let j0 = (ymin - 0.5).floor().max(0.0) as usize;
    let j1 = ((ymax - 0.5).ceil().max(0.0) as usize).min(dims[1] - 1);
    for j in j0..=j1 {
        for i in i0..=i1 {
            let p = [i as f64 + 0.5, j as f64 + 0.5];
            let inside = edges.iter().all(|&(a, b)| {
                let e = edge(a, b, p);
                e > 0.0 || (e == 0.0 && owns_boundary(a, b))
            });
            if inside {
                data[j * dims[0] + i] += value;
            }
        }
    }
}

/// Twenty axis-aligned ellipsoids with uniform centers, `|U(-√128, √128)|`
/// radii (in voxels) and standard-normal intensities; overlaps add.
pub fn gen_ellipsoids(seed: RngSeed, dims: [usize; 3], pitch: f64) -> Result<Volume> {
    check_dims(&dims, 3, 8)?;
    let grid = GridSpec::new(&dims, pitch)?;
    let mut rng = seed.rng(Stream::Phantom);
    let radius = Uniform::new_inclusive(-ELLIPSOID_RADIUS_BOUND, ELLIPSOID_RADIUS_BOUND)
        .expect("valid range");
    let mut data = vec![0.0; grid.len()];
    for _ in 0..ELLIPSOID_COUNT {
        let center = [
            rng.random_range(0.0..dims[0] as f64),
            rng.random_range(0.0..dims[1] as f64),
            rng.random_range(0.0..dims[2] as f64),
        ];
        let radii = [
            radius.sample(&mut rng).abs(),
            radius.sample(&mut rng).abs(),
            radius.sample(&mut rng).abs(),
        ];
        let intensity: f64 = StandardNormal.sample(&mut rng);
        if radii.contains(&0.0) {
            continue;
        }
        let lo: Vec<usize> = (0..3)
            .map(|a| (center[a] - radii[a] - 0.5).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((center[a] + radii[a]).ceil().max(0.0) as usize).min(dims[a] - 1))
            .collect();
        for z in lo[2]..=hi[2] {
            let dz = (z as f64 + 0.5 - center[2]) / radii[2];
            for y in lo[1]..=hi[1] {
                let dy = (y as f64 + 0.5 - center[1]) / radii[1];
                for x in lo[0]..=hi[0] {
                    let dx = (x as f64 + 0.5 - center[0]) / radii[0];
                    if dx * dx + dy * dy + dz * dz <= 1.0 {
                        data[grid.index(x, y, z)] += intensity;
                    }
                }
            }
        }
    }
    Ok(Volume { grid, data })
}

/// One ellipse/ellipsoid in normalized `[-1, 1]` coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Ellipsoid {
    pub intensity: f64,
    pub half_axes: [f64; 3],
    pub center: [f64; 3],
    /// Rotation about the z axis, degrees counter-clockwise.
    pub phi_deg: f64,
}

impl Ellipsoid {
    const fn new(intensity: f64, half_axes: [f64; 3], center: [f64; 3], phi_deg: f64) -> Self {
        Ellipsoid { intensity, half_axes, center, phi_deg }
    }

    pub fn contains(&self, p: [f64; 3], ndim: usize) -> bool {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let xr = c * dx + s * dy;
        let yr = -s * dx + c * dy;
        let mut q = (xr / self.half_axes[0]).powi(2) + (yr / self.half_axes[1]).powi(2);
        if ndim == 3 {
            q += ((p[2] - self.center[2]) / self.half_axes[2]).powi(2);
        }
        q <= 1.0
    }
}

/// The ten-ellipse Shepp-Logan head with the original intensities (skull 2.0).
/// In-plane parameters are the published 2D table; the z half-axes and z
/// offsets are those of the usual 3D extension.
pub const SHEPP_LOGAN: [Ellipsoid; 10] = [
    Ellipsoid::new(2.0, [0.69, 0.92, 0.81], [0.0, 0.0, 0.0], 0.0),
    Ellipsoid::new(-0.98, [0.6624, 0.874, 0.78], [0.0, -0.0184, 0.0], 0.0),
    Ellipsoid::new(-0.02, [0.11, 0.31, 0.22], [0.22, 0.0, 0.0], -18.0),
    Ellipsoid::new(-0.02, [0.16, 0.41, 0.28], [-0.22, 0.0, 0.0], 18.0),
    Ellipsoid::new(0.01, [0.21, 0.25, 0.41], [0.0, 0.35, -0.15], 0.0),
    Ellipsoid::new(0.01, [0.046, 0.046, 0.05], [0.0, 0.1, 0.25], 0.0),
    Ellipsoid::new(0.01, [0.046, 0.046, 0.05], [0.0, -0.1, 0.25], 0.0),
    Ellipsoid::new(0.01, [0.046, 0.023, 0.05], [-0.08, -0.605, 0.0], 0.0),
    Ellipsoid::new(0.01, [0.023, 0.023, 0.02], [0.0, -0.606, 0.0], 0.0),
    Ellipsoid::new(0.01, [0.023, 0.046, 0.02], [0.06, -0.605, 0.0], 0.0),
];

/// Render an ellipse table onto `grid`; the normalized square `[-1, 1]`
/// spans the grid extent along each axis.
pub fn render_ellipsoids(grid: &GridSpec, table: &[Ellipsoid]) -> Volume {
    let ndim = grid.ndim();
    let half: Vec<f64> = (0..3).map(|a| grid.extent(a) * 0.5).collect();
    Volume::from_fn(grid.clone(), |x, y, z| {
        let p = [
            grid.center(0, x) / half[0],
            grid.center(1, y) / half[1],
            if ndim == 3 { grid.center(2, z) / half[2] } else { 0.0 },
        ];
        table.iter().filter(|e| e.contains(p, ndim)).map(|e| e.intensity).sum()
    })
}

pub fn shepp_logan(dims: &[usize], pitch: f64) -> Result<Volume> {
    if !(2..=3).contains(&dims.len()) {
        return Err(Error::InvalidArgument(format!("Shepp-Logan needs 2 or 3 dims, got {dims:?}")));
    }
    check_dims(dims, dims.len(), 16)?;
    Ok(render_ellipsoids(&GridSpec::new(dims, pitch)?, &SHEPP_LOGAN))
}

/// `A · exp(-0.002 (x² + y²))` (x, y in mm from the center) with an
/// axis-aligned square zeroed out. The square has side `dims/4` voxels and
/// occupies `(0, dims/4]` voxels along each axis from the center.
pub fn gen_gaussian_square(amplitude: f64, dims: [usize; 2], pitch: f64) -> Result<Volume> {
    check_dims(&dims, 2, 16)?;
    let grid = GridSpec::new(&dims, pitch)?;
    let in_square = |coord: f64, n: usize| {
        let v = coord / pitch;
        v > 0.0 && v <= n as f64 / 4.0
    };
    let g = grid.clone();
    Ok(Volume::from_fn(grid, |i, j, _| {
        let x = g.center(0, i);
        let y = g.center(1, j);
        if in_square(x, dims[0]) && in_square(y, dims[1]) {
            0.0
        } else {
            amplitude * (-0.002 * (x * x + y * y)).exp()
        }
    }))
}

/// `s + η` with i.i.d. `η ~ N(0, level.intensity)`.
pub fn add_noise(s: &Sinogram, level: NoiseLevel, seed: RngSeed) -> Result<Sinogram> {
    if !(level.intensity >= 0.0 && level.intensity.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise intensity must be >= 0, got {}",
            level.intensity
        )));
    }
    if level.intensity == 0.0 {
        return Ok(s.clone());
    }
    let normal = Normal::new(0.0, level.sigma()).expect("finite sigma");
    let mut rng = seed.rng(Stream::Noise);
    let data = s.data.iter().map(|v| v + normal.sample(&mut rng)).collect();
    Ok(Sinogram { geometry: s.geometry.clone(), data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_parallel_geometry;

    #[test]
    fn triangles_are_normalized_nonnegative_and_deterministic() {
        for seed in 0..20 {
            let t = gen_triangles(RngSeed(seed), [128, 128], 1.0).unwrap();
            assert!((t.norm() - 1.0).abs() < 1e-6);
            assert!(t.data.iter().all(|&v| v >= 0.0));
            let again = gen_triangles(RngSeed(seed), [128, 128], 1.0).unwrap();
            assert_eq!(t, again);
        }
        let a = gen_triangles(RngSeed(1), [32, 32], 1.0).unwrap();
        let b = gen_triangles(RngSeed(2), [32, 32], 1.0).unwrap();
        assert_ne!(a, b);
        assert!(gen_triangles(RngSeed(1), [7, 32], 1.0).is_err());
    }

    #[test]
    fn shared_triangle_edges_are_not_double_counted() {
        // Two triangles tiling a square must cover each pixel exactly once.
        let dims = [8, 8];
        let mut data = vec![0.0; 64];
        fill_triangle(&mut data, dims, [[0.0, 0.0], [8.0, 0.0], [8.0, 8.0]], 1.0);
        fill_triangle(&mut data, dims, [[0.0, 0.0], [8.0, 8.0], [0.0, 8.0]], 1.0);
        assert!(data.iter().all(|&v| v == 1.0), "{data:?}");
    }

    #[test]
    fn ellipsoids_are_deterministic_and_signed() {
        let a = gen_ellipsoids(RngSeed(3), [24, 24, 24], 1.0).unwrap();
        assert_eq!(a, gen_ellipsoids(RngSeed(3), [24, 24, 24], 1.0).unwrap());
        let any_negative = (0..10).any(|s| {
            gen_ellipsoids(RngSeed(s), [16, 16, 16], 1.0).unwrap().data.iter().any(|&v| v < 0.0)
        });
        assert!(any_negative);
    }

    #[test]
    fn ellipsoid_radius_law_variance() {
        let radius = Uniform::new_inclusive(-ELLIPSOID_RADIUS_BOUND, ELLIPSOID_RADIUS_BOUND).unwrap();
        let mut rng = RngSeed(9).rng(Stream::Phantom);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| radius.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((40.0..=45.3).contains(&var), "variance {var}");
    }

    #[test]
    fn shepp_logan_2d_levels() {
        let sl = shepp_logan(&[128, 128], 1.0).unwrap();
        assert!((sl.max() - 2.0).abs() < 1e-12);
        assert_eq!(sl.get(0, 0, 0), 0.0);
        assert_eq!(sl.get(127, 64, 0), 0.0);
        // Pixel (64, 64) sits at (0.5, 0.5) mm: inside the skull and brain
        // ellipses only.
        let p = [0.5 / 64.0, 0.5 / 64.0, 0.0];
        let expect: f64 =
            SHEPP_LOGAN.iter().filter(|e| e.contains(p, 2)).map(|e| e.intensity).sum();
        assert_eq!(sl.get(64, 64, 0), expect);
        assert!((expect - 1.02).abs() < 1e-12);
        assert!(shepp_logan(&[8, 8], 1.0).is_err());
    }

    #[test]
    fn gaussian_square_values() {
        let zero = gen_gaussian_square(0.0, [33, 33], 1.0).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let g = gen_gaussian_square(1.0, [33, 33], 1.0).unwrap();
        assert_eq!(g.get(16, 16, 0), 1.0);
        assert!((g.get(26, 16, 0) - (-0.2f64).exp()).abs() < 1e-15);
        assert!((g.get(26, 16, 0) - 0.8187).abs() < 1e-4);
        // Square occupies (0, 8.25] voxels along both axes.
        assert_eq!(g.get(17, 17, 0), 0.0);
        assert_eq!(g.get(24, 24, 0), 0.0);
        assert!(g.get(25, 24, 0) > 0.0);
        let g2 = gen_gaussian_square(2.0, [128, 128], 1.0).unwrap();
        let zeros = g2.data.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 32 * 32);
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let geo = make_parallel_geometry(1000, 1000, 1.0).unwrap();
        let s = Sinogram::zeros(geo.into());
        let noisy = add_noise(&s, NoiseLevel::LOW, RngSeed(4)).unwrap();
        let n = noisy.data.len() as f64;
        let mean = noisy.data.iter().sum::<f64>() / n;
        let var = noisy.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.00245..=0.00255).contains(&var), "variance {var}");
        assert!(mean.abs() <= 4.0 * 0.05 / n.sqrt(), "mean {mean}");
        assert_eq!(noisy, add_noise(&s, NoiseLevel::LOW, RngSeed(4)).unwrap());
        assert_eq!(add_noise(&noisy, NoiseLevel::NONE, RngSeed(4)).unwrap(), noisy);
        let bad = NoiseLevel { intensity: -1.0 };
        assert!(matches!(add_noise(&s, bad, RngSeed(0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn named_regimes() {
        assert_eq!(NoiseLevel::named("medium").unwrap().intensity, 0.0225);
        assert!((NoiseLevel::HIGH.sigma() - 0.25).abs() < 1e-15);
        assert!((NoiseLevel::from_sigma(0.05).unwrap().intensity - 0.0025).abs() < 1e-15);
        assert!(NoiseLevel::named("extreme").is_none());
    }
}
