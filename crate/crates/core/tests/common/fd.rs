//! Central finite differences for the network and the loss.

use lsirt_core::nn::{loss_and_grad, Model, ModelSpec, Tensor};
use lsirt_core::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
/// The loss is smooth away from the clamp, so a smaller step keeps the
/// O(h²) truncation error well below the 1e-6 tolerance.
pub const LOSS_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 3], c: usize) -> Tensor<f64> {
    let n = dims.iter().product::<usize>() * c;
    Tensor::from_data(dims, c, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative disagreement, with a floor at 1e-3 of the largest
/// numeric gradient so entries that are zero up to rounding are compared
/// absolutely.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

pub fn random_model(spec: ModelSpec, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::kaiming(spec, RngSeed(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for layer in 0..3 {
        for b in m.bias_mut(layer) {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    for layer in 0..2 {
        for s in m.slopes_mut(layer) {
            *s = rng.random_range(0.05..0.5);
        }
    }
    m
}

fn signs(model: &Model<f64>, input: &Tensor<f64>) -> Vec<bool> {
    let (_, tape) = model.forward(input).unwrap();
    tape.pre_activations().iter().flat_map(|z| z.data.iter().map(|&v| v > 0.0)).collect()
}

/// Central difference of `<model(input), r>`, or `None` when the ±STEP
/// interval crosses a PReLU kink and the difference quotient is meaningless.
fn central(
    model: &Model<f64>,
    input: &Tensor<f64>,
    r: &Tensor<f64>,
    base: &[bool],
    up: impl Fn(&mut Model<f64>, &mut Tensor<f64>, f64),
) -> Option<f64> {
    let eval = |h: f64| {
        let (mut m, mut x) = (model.clone(), input.clone());
        up(&mut m, &mut x, h);
        (signs(&m, &x) == base).then(|| dot(&m.predict(&x).unwrap().data, &r.data))
    };
    Some((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP))
}

#[derive(Debug)]
pub struct ModelFd {
    pub params: f64,
    pub inputs: f64,
    pub skipped: usize,
    pub total: usize,
}

/// Compares `d<model(input), r>/dθ` and `/d input` with central differences
/// on every `every`-th parameter and every 7th input entry.
pub fn model_gradient_error(spec: ModelSpec, dims: [usize; 3], seed: u64, every: usize) -> ModelFd {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(spec, seed);
    let input = random_tensor(&mut rng, dims, spec.c_in);
    let r = random_tensor(&mut rng, dims, spec.c_out);
    let (_, mut tape) = model.forward(&input).unwrap();
    let (gin, grads) = model.backward(&mut tape, &r).unwrap();

    let base = signs(&model, &input);
    let offset = rng.random_range(0..every);
    let idx: Vec<usize> = (offset..model.n_params()).step_by(every).collect();
    let (mut analytic, mut numeric, mut skipped) = (Vec::new(), Vec::new(), 0);
    for &i in &idx {
        match central(&model, &input, &r, &base, |m, _, h| m.params[i] += h) {
            Some(v) => {
                numeric.push(v);
                analytic.push(grads[i]);
            }
            None => skipped += 1,
        }
    }
    let params = rel_error(&analytic, &numeric);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let total = idx.len() + input.data.len().div_ceil(7);
    for i in (0..input.data.len()).step_by(7) {
        match central(&model, &input, &r, &base, |_, x, h| x.data[i] += h) {
            Some(v) => {
                numeric.push(v);
                analytic.push(gin.data[i]);
            }
            None => skipped += 1,
        }
    }
    ModelFd { params, inputs: rel_error(&analytic, &numeric), skipped, total }
}

/// Worst relative error of the loss gradient with respect to the network
/// output, floored like [`rel_error`].
pub fn loss_gradient_error(seed: u64, channels: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let n = 64;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gamma = random_tensor(&mut rng, [8, 8, 1], channels);
    let omega = if channels == 2 { 0.04 } else { 0.0 };
    let (_, g) = loss_and_grad(&gamma, &x, &t, omega).unwrap();
    let numeric: Vec<f64> = (0..gamma.data.len())
        .map(|i| {
            let mut gp = gamma.clone();
            gp.data[i] += LOSS_STEP;
            let up = loss_and_grad(&gp, &x, &t, omega).unwrap().0;
            gp.data[i] -= 2.0 * LOSS_STEP;
            let down = loss_and_grad(&gp, &x, &t, omega).unwrap().0;
            (up - down) / (2.0 * LOSS_STEP)
        })
        .collect();
    rel_error(&g.data, &numeric)
}
