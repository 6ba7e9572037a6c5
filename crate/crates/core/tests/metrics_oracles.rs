mod common;

use common::blurred_disk;
use lsirt_core::metrics::{
    cnr, dft_magnitude_slice, edge_fwhm, psnr, ssim, wedge_energy_ratio, Plane, RoiSpec,
    FWHM_PER_SIGMA,
};
use lsirt_core::{GridSpec, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn noisy(grid: &GridSpec, f: impl Fn(f64, f64) -> f64, sigma: f64, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    Volume::from_fn(grid.clone(), |i, j, _| f(grid.center(0, i), grid.center(1, j)) + n.sample(&mut rng))
}

#[test]
fn ssim_identity_and_noise_floor() {
    let g = GridSpec::new_2d(40, 33, 1.0).unwrap();
    let x = noisy(&g, |x, y| (x * 0.2).sin() + y * 0.01, 0.3, 1);
    assert_eq!(ssim(&x, &x, 2.0).unwrap(), 1.0);
    let g3 = GridSpec::new_3d(9, 10, 11, 1.0).unwrap();
    let v = Volume::from_fn(g3, |i, j, k| ((i * 7 + j * 3 + k) % 5) as f64);
    assert_eq!(ssim(&v, &v, 4.0).unwrap(), 1.0);

    let flat = Volume::from_fn(g.clone(), |_, _, _| 0.5);
    let loud = noisy(&g, |_, _| 0.5, 5.0, 2);
    let s = ssim(&loud, &flat, 1.0).unwrap();
    assert!(s.abs() <= 0.1, "ssim {s}");

    let small = Volume::zeros(GridSpec::new_2d(6, 20, 1.0).unwrap());
    assert!(ssim(&small, &small, 1.0).is_err());
}

#[test]
fn psnr_closed_form_and_offset_invariance() {
    let g = GridSpec::new_2d(16, 16, 1.0).unwrap();
    let zero = Volume::zeros(g.clone());
    let half = Volume::from_fn(g.clone(), |_, _, _| 0.5);
    assert!((psnr(&half, &zero, 1.0).unwrap() - 6.0206).abs() < 1e-4);
    let x = noisy(&g, |x, _| x * 0.1, 0.1, 3);
    let r = noisy(&g, |x, _| x * 0.1, 0.0, 4);
    let shift = |v: &Volume| Volume::from_data(v.grid.clone(), v.data.iter().map(|a| a + 3.25).collect()).unwrap();
    let a = psnr(&x, &r, 2.0).unwrap();
    let b = psnr(&shift(&x), &shift(&r), 2.0).unwrap();
    assert!((a - b).abs() <= 1e-6 * a.abs());
}

#[test]
fn cnr_matches_closed_form_expectation() {
    let g = GridSpec::new_2d(128, 128, 1.0).unwrap();
    let (mu, delta, sigma) = (1.0, 0.3, 0.1);
    let insert = RoiSpec::disk(0.0, 0.0, 15.0);
    let surround = [RoiSpec::disk(-40.0, 0.0, 12.0), RoiSpec::disk(40.0, 0.0, 12.0)];
    let expect = delta / (sigma * 2f64.sqrt());
    let mut mean = 0.0;
    for seed in 0..20 {
        let v = noisy(&g, |x, y| if x * x + y * y <= 225.0 { mu + delta } else { mu }, sigma, 100 + seed);
        mean += cnr(&v, &insert, &surround).unwrap() / 20.0;
    }
    assert!((mean - expect).abs() <= 0.1 * expect, "cnr {mean} vs {expect}");

    let v = noisy(&g, |x, y| if x * x + y * y <= 225.0 { mu + delta } else { mu }, sigma, 7);
    let base = cnr(&v, &insert, &surround).unwrap();
    let affine = Volume::from_data(g.clone(), v.data.iter().map(|a| 3.5 * a - 2.0).collect()).unwrap();
    assert!((cnr(&affine, &insert, &surround).unwrap() - base).abs() <= 1e-9 * base);

    let flat = Volume::from_fn(g.clone(), |_, _, _| 0.7);
    assert_eq!(cnr(&flat, &insert, &surround).unwrap(), 0.0);
    assert!(cnr(&v, &insert, &[RoiSpec::disk(5.0, 0.0, 12.0)]).is_err());
}

#[test]
fn edge_fwhm_of_blurred_disks() {
    let g = GridSpec::new_2d(160, 160, 0.25).unwrap();
    let roi = RoiSpec::disk(0.0, 0.0, 18.0);
    for sigma in [0.5, 1.0, 2.0] {
        let v = Volume::from_fn(g.clone(), |i, j, _| {
            let r = g.center(0, i).hypot(g.center(1, j));
            blurred_disk(r, 10.0, sigma)
        });
        let (fit, fwhm) = edge_fwhm(&v, &roi, [0.0, 0.0, 0.0]).unwrap();
        let expect = FWHM_PER_SIGMA * sigma;
        assert!((fwhm - expect).abs() <= 0.05 * expect, "sigma {sigma}: fwhm {fwhm}, fit {fit:?}");

        let mapped = Volume::from_data(g.clone(), v.data.iter().map(|a| 1000.0 * a - 300.0).collect()).unwrap();
        let (_, fwhm2) = edge_fwhm(&mapped, &roi, [0.0, 0.0, 0.0]).unwrap();
        assert!((fwhm2 - fwhm).abs() <= 0.01 * fwhm);
    }
}

#[test]
fn unblurred_edge_is_resolved_to_the_pitch() {
    let g = GridSpec::new_2d(80, 80, 0.5).unwrap();
    let v = Volume::from_fn(g.clone(), |i, j, _| if g.center(0, i).hypot(g.center(1, j)) <= 10.0 { 1.0 } else { 0.0 });
    let (_, fwhm) = edge_fwhm(&v, &RoiSpec::disk(0.0, 0.0, 18.0), [0.0, 0.0, 0.0]).unwrap();
    assert!(fwhm <= 0.5, "fwhm {fwhm}");
}

#[test]
fn fourier_slices() {
    let g = GridSpec::new_3d(8, 6, 10, 1.0).unwrap();
    let flat = Volume::from_fn(g.clone(), |_, _, _| 2.0);
    let d = dft_magnitude_slice(&flat, Plane::Coronal, 2).unwrap();
    assert_eq!(d.grid.dims(), &[8, 10]);
    for y in 0..10 {
        for x in 0..8 {
            let v = d.get(x, y, 0);
            if (x, y) == (4, 5) {
                assert!((v - (1.0f64 + 160.0).ln()).abs() < 1e-9);
            } else {
                assert!(v.abs() < 1e-9);
            }
        }
    }
    // cos along z with two cycles: peaks at ±2 on the second axis.
    let wave = Volume::from_fn(g.clone(), |_, _, k| (2.0 * std::f64::consts::PI * 2.0 * k as f64 / 10.0).cos());
    let d = dft_magnitude_slice(&wave, Plane::Sagittal, 0).unwrap();
    let peaks: Vec<(usize, usize)> = (0..10)
        .flat_map(|y| (0..6).map(move |x| (x, y)))
        .filter(|&(x, y)| d.get(x, y, 0) > 1.0)
        .collect();
    assert_eq!(peaks, vec![(3, 3), (3, 7)]);
    assert!(dft_magnitude_slice(&wave, Plane::Axial, 10).is_err());

    // All energy of a pure axial wave sits in any wedge around the axial axis.
    let r = wedge_energy_ratio(&wave, Plane::Coronal, 1, 0.1).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    let across = Volume::from_fn(g, |i, _, _| (2.0 * std::f64::consts::PI * 2.0 * i as f64 / 8.0).cos());
    assert!(wedge_energy_ratio(&across, Plane::Coronal, 1, 0.3).unwrap() < 1e-12);
}
