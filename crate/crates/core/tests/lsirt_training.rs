use lsirt_core::classic::{sirt, SirtConfig};
use lsirt_core::geometry::make_parallel_geometry;
use lsirt_core::lsirt::*;
use lsirt_core::nn::{Model, ModelSpec, Tensor};
use lsirt_core::phantoms::{gen_triangles, NoiseLevel};
use lsirt_core::{Geometry, GridSpec, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_problem() -> (GridSpec, Geometry, Problem) {
    let grid = GridSpec::new_2d(64, 64, 1.0).unwrap();
    let geo: Geometry = make_parallel_geometry(20, 93, 1.0).unwrap().into();
    let problem = Problem::new(grid.clone(), geo.clone()).unwrap();
    (grid, geo, problem)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn delta_model() -> Model<f32> {
    let mut m = Model::<f32>::zeros(ModelSpec::lsirt(2)).unwrap();
    let centre = 4;
    m.kernel_mut(0)[(centre * 3) * 32] = 2.0;
    m.kernel_mut(1)[(centre * 32) * 32] = 0.5;
    m.kernel_mut(2)[(centre * 32) * 2] = 1.0;
    m.slopes_mut(0).fill(1.0);
    m.slopes_mut(1).fill(1.0);
    m
}

#[test]
fn alpha_zero_reconstruction_is_scaled_sirt() {
    let (grid, geo, problem) = desk_problem();
    let t = gen_triangles(RngSeed(3), [64, 64], 1.0).unwrap();
    let y = problem.projector().project(&t).unwrap();
    let model = Model::<f32>::kaiming(ModelSpec::lsirt(2), RngSeed(1)).unwrap();
    let ours = reconstruct_with_snapshots(&y, &problem, &model, 0.0, 30, &[10, 20]).unwrap();
    let reference = sirt(&y, &geo, &grid, SirtConfig::scaled(30)).unwrap();
    assert_eq!(ours.volume.data, reference.data);
    let ten = sirt(&y, &geo, &grid, SirtConfig::scaled(10)).unwrap();
    assert_eq!(ours.snapshots[0].0, 10);
    assert_eq!(ours.snapshots[0].1.data, ten.data);
}

#[test]
fn zero_model_step_shrinks_the_iterate() {
    let (_, _, problem) = desk_problem();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..4096).map(|_| rng.random::<f64>()).collect();
    let h: Vec<f64> = (0..4096).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..20 * 93).map(|_| rng.random::<f64>()).collect();
    let zero = Model::<f32>::zeros(ModelSpec::lsirt(2)).unwrap();
    let (next, gamma) = lsirt_step(&problem, &zero, &x, &h, &y, 0.1).unwrap();
    let p = problem.scaled_gradient(&x, &y);
    assert!(gamma.unwrap().data.iter().all(|&v| v == 0.0));
    for i in 0..x.len() {
        assert_eq!(next[i], 0.9 * x[i] + p[i]);
    }
    let (sirt_step, none) = lsirt_step(&problem, &zero, &x, &h, &y, 0.0).unwrap();
    assert!(none.is_none());
    assert!(sirt_step.iter().zip(x.iter().zip(&p)).all(|(n, (a, b))| *n == a + b));
}

#[test]
fn exact_data_is_a_fixed_point_of_the_delta_model() {
    let (_, _, problem) = desk_problem();
    let t = gen_triangles(RngSeed(4), [64, 64], 1.0).unwrap();
    // Values exactly representable in f32 so the network copy is lossless.
    let x: Vec<f64> = t.data.iter().map(|v| (v * 1024.0).round() / 1024.0).collect();
    let vol = lsirt_core::Volume::from_data(t.grid.clone(), x.clone()).unwrap();
    let y = problem.projector().project(&vol).unwrap().data;
    let (next, _) = lsirt_step(&problem, &delta_model(), &x, &vec![0.0; x.len()], &y, 0.1).unwrap();
    for (a, b) in next.iter().zip(&x) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn step_rejects_bad_inputs() {
    let (_, _, problem) = desk_problem();
    let model = Model::<f32>::zeros(ModelSpec::lsirt(3)).unwrap();
    let z = vec![0.0; 4096];
    let y = vec![0.0; 20 * 93];
    assert!(lsirt_step(&problem, &model, &z, &z, &y, 0.1).is_err());
    let model = Model::<f32>::zeros(ModelSpec::lsirt(2)).unwrap();
    assert!(lsirt_step(&problem, &model, &z[..100], &z, &y, 0.1).is_err());
    let mut bad = Model::<f32>::zeros(ModelSpec::lsirt(2)).unwrap();
    bad.bias_mut(2)[0] = f32::NAN;
    assert!(matches!(lsirt_step(&problem, &bad, &z, &z, &y, 0.1), Err(lsirt_core::Error::Numeric(_))));
}

#[test]
fn batch_elements() {
    let (_, _, problem) = desk_problem();
    let model = Model::<f32>::kaiming(ModelSpec::lsirt(2), RngSeed(9)).unwrap();
    let ds = Dataset::new(DataSource::Triangles, NoiseLevel::NONE);

    let cfg = LsirtConfig { n_s: 0, ..Default::default() };
    let el = create_batch_element(&ds, &problem, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(el.x.iter().chain(&el.h).all(|&v| v == 0.0));
    assert_eq!(el.age, 0);

    let cfg = LsirtConfig { n_s: 50, ..Default::default() };
    let el = create_batch_element(&ds, &problem, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(el.age, 50);

    let again = create_batch_element(&ds, &problem, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(el, again);

    let empty = Dataset::new(DataSource::Volumes(vec![]), NoiseLevel::NONE);
    let e = create_batch_element(&empty, &problem, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(matches!(e, Err(lsirt_core::Error::EmptyDataset)));
}

#[test]
fn warmup_brings_the_residual_below_a_tenth() {
    let (_, _, problem) = desk_problem();
    let model = Model::<f32>::kaiming(ModelSpec::lsirt(2), RngSeed(9)).unwrap();
    let ds = Dataset::new(DataSource::Triangles, NoiseLevel::NONE);
    let cfg = LsirtConfig { n_s: 50, ..Default::default() };
    let el = create_batch_element(&ds, &problem, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let vol = lsirt_core::Volume::from_data(problem.grid().clone(), el.x.clone()).unwrap();
    let ax = problem.projector().project(&vol).unwrap().data;
    let r: Vec<f64> = ax.iter().zip(&el.y).map(|(a, b)| a - b).collect();
    assert!(norm(&r) < norm(&el.y) / 10.0, "residual {} vs {}", norm(&r), norm(&el.y));
}

#[test]
fn replacement_lifetime_matches_tot_minus_warmup() {
    let cfg = LsirtConfig::default();
    let rep = Replacement::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut age = vec![0usize; cfg.batch];
    let (mut total, mut count) = (0usize, 0usize);
    for step in 0..400_000 {
        if let Some(i) = rep.draw(&mut rng) {
            if step > 10_000 {
                total += age[i];
                count += 1;
            }
            age[i] = 0;
        }
        age.iter_mut().for_each(|a| *a += 1);
    }
    let mean = total as f64 / count as f64;
    let expect = (cfg.n_tot - cfg.n_s) as f64;
    assert!((mean - expect).abs() <= 0.1 * expect, "mean lifetime {mean}");
}

#[test]
fn tiled_forward_is_exact() {
    let model = Model::<f32>::kaiming(ModelSpec::lsirt(3), RngSeed(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dims = [64, 64, 64];
    let data: Vec<f32> = (0..64 * 64 * 64 * 3).map(|_| rng.random::<f32>() - 0.5).collect();
    let input = Tensor::from_data(dims, 3, data).unwrap();
    let full = model.predict(&input).unwrap();
    let tiled = apply_tiled(&model, &input, [32, 32, 32], 3).unwrap();
    assert_eq!(tiled.data, full.data);
    assert!(apply_tiled(&model, &input, [32, 32, 32], 2).is_err());
    assert!(apply_tiled(&model, &input, [6, 32, 32], 3).is_err());

    let small = Tensor::from_data([9, 7, 5], 3, input.data[..9 * 7 * 5 * 3].to_vec()).unwrap();
    let whole = apply_tiled(&model, &small, [9, 7, 5], 3).unwrap();
    assert_eq!(whole.data, model.predict(&small).unwrap().data);
}

#[test]
fn zero_iterations_return_the_initial_model() {
    let (grid, geo, _) = desk_problem();
    let ds = Dataset::new(DataSource::Triangles, NoiseLevel::LOW);
    let cfg = LsirtConfig { n_iter: 0, ..Default::default() };
    let m = train(&ds, &geo, &grid, &cfg, RngSeed(8)).unwrap();
    assert_eq!(m, Model::<f32>::kaiming(ModelSpec::lsirt(2), RngSeed(8)).unwrap());
}

#[test]
fn training_failures_carry_the_step() {
    let (_, _, problem) = desk_problem();
    let ds = Dataset::new(DataSource::Volumes(vec![]), NoiseLevel::NONE);
    let cfg = LsirtConfig { n_iter: 3, n_s: 1, n_tot: 3, batch: 1, ..Default::default() };
    assert!(matches!(
        train_with(&ds, &problem, &cfg, RngSeed(1), |_, _, _| Ok(true)),
        Err(lsirt_core::Error::EmptyDataset)
    ));
}

/// 2000 steps at desk scale; the loss is the log of the squared error so a
/// drop of 2 means roughly a 7× smaller error.
#[test]
fn smoke_training_reduces_the_loss() {
    let (_, _, problem) = desk_problem();
    let ds = Dataset::new(DataSource::Triangles, NoiseLevel::LOW);
    let cfg = LsirtConfig { n_s: 20, n_tot: 40, batch: 4, n_iter: 2000, ..Default::default() };
    let mut losses = Vec::new();
    train_with(&ds, &problem, &cfg, RngSeed(1), |r, _, _| {
        losses.push(r.loss);
        Ok(true)
    })
    .unwrap();
    let tail = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    println!("step-0 loss {:.3}, final 100-step mean {:.3}", losses[0], tail);
    assert!(losses[0] - tail >= 2.0, "loss drop {:.3}", losses[0] - tail);
}
