//! Learned SIRT: the scaled SIRT update blended with a network estimate,
//!
//! ```text
//! p      = C Aᵀ R (y − A x⁽ᵏ⁾)
//! γ      = g_θ(x⁽ᵏ⁾, x⁽ᵏ⁻¹⁾, p)        (g_θ(x⁽ᵏ⁾) for the ablation)
//! x⁽ᵏ⁺¹⁾ = (1 − α) x⁽ᵏ⁾ + α γ₀ + p
//! ```
//!
//! and the training loop that keeps a batch of partially reconstructed images
//! alive across steps, replacing one of them at random now and then.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, GridSpec};
use crate::nn::{loss_and_grad, AdamState, Model, ModelSpec, Tensor, DEFAULT_OMEGA, RECEPTIVE_RADIUS};
use crate::phantoms::{add_noise, gen_ellipsoids, gen_triangles, NoiseLevel};
use crate::projector::{Projector, SirtScaling};
use crate::rng::{RngSeed, Stream};
use crate::volume::{Sinogram, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Network sees the iterate, the previous iterate and the scaled gradient.
    Lsirt,
    /// Network sees the iterate only; single output channel and ω = 0.
    LsirtStar,
}

impl Variant {
    pub fn model_spec(self, dim: usize) -> ModelSpec {
        match self {
            Variant::Lsirt => ModelSpec::lsirt(dim),
            Variant::LsirtStar => ModelSpec::lsirt_star(dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// `peak` for the first half, linear to `mid` over the next quarter,
    /// linear to zero over the last quarter.
    Piecewise { peak: f64, mid: f64 },
    /// Linear from `start` to zero.
    Linear { start: f64 },
}

impl LrSchedule {
    pub const PAPER_2D: LrSchedule = LrSchedule::Piecewise { peak: 2e-4, mid: 5e-5 };
    pub const PAPER_3D_256: LrSchedule = LrSchedule::Linear { start: 1e-4 };

    /// Learning rate for the 0-based `step` out of `total`.
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let f = step as f64 / total.max(1) as f64;
        match *self {
            LrSchedule::Piecewise { peak, mid } => {
                if f < 0.5 {
                    peak
                } else if f < 0.75 {
                    peak + (mid - peak) * (f - 0.5) / 0.25
                } else {
                    mid * (1.0 - (f - 0.75) / 0.25)
                }
            }
            LrSchedule::Linear { start } => start * (1.0 - f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsirtConfig {
    pub variant: Variant,
    pub alpha: f64,
    /// Warmup iterations applied to a fresh batch element before it is trained on.
    pub n_s: usize,
    /// Iterations applied at reconstruction time.
    pub n_tot: usize,
    pub batch: usize,
    pub n_iter: usize,
    pub omega: f64,
    pub lr: LrSchedule,
    /// Training patch size for 3D models; `None` trains on whole volumes.
    pub patch: Option<[usize; 3]>,
}

impl Default for LsirtConfig {
    fn default() -> Self {
        LsirtConfig {
            variant: Variant::Lsirt,
            alpha: 0.1,
            n_s: 50,
            n_tot: 100,
            batch: 8,
            n_iter: 80_000,
            omega: DEFAULT_OMEGA,
            lr: LrSchedule::PAPER_2D,
            patch: None,
        }
    }
}

impl LsirtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.n_s >= self.n_tot {
            return bad(format!("warmup {} must be below the total iteration count {}", self.n_s, self.n_tot));
        }
        if self.batch == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad(format!("loss weight must be >= 0, got {}", self.omega));
        }
        if let Some(p) = self.patch {
            if p.iter().any(|&n| n < 3) {
                return bad(format!("patch size must be >= 3 per axis, got {p:?}"));
            }
        }
        Ok(())
    }

    /// Loss weight actually used: the ablation has no second output.
    pub fn effective_omega(&self) -> f64 {
        match self.variant {
            Variant::Lsirt => self.omega,
            Variant::LsirtStar => 0.0,
        }
    }
}

/// Projector and SIRT preconditioners for one grid/geometry pair.
#[derive(Clone, Debug)]
pub struct Problem {
    op: Projector,
    sc: SirtScaling,
}

impl Problem {
    pub fn new(grid: GridSpec, geometry: Geometry) -> Result<Self> {
        let op = Projector::new(grid, geometry)?;
        let sc = op.scalings();
        Ok(Problem { op, sc })
    }

    pub fn projector(&self) -> &Projector {
        &self.op
    }

    pub fn grid(&self) -> &GridSpec {
        self.op.grid()
    }

    pub fn scaling(&self) -> &SirtScaling {
        &self.sc
    }

    /// `C Aᵀ R (y − A x)`.
    pub fn scaled_gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut residual = vec![0.0; self.op.sinogram_len()];
        let mut out = vec![0.0; self.op.volume_len()];
        self.op.scaled_gradient_into(x, y, &self.sc, &mut residual, &mut out);
        out
    }

    fn check_model(&self, model: &Model<f32>) -> Result<()> {
        let spec = model.spec();
        if spec.dim != self.grid().ndim() {
            return Err(Error::Shape(format!(
                "{}D model cannot reconstruct a {}D grid",
                spec.dim,
                self.grid().ndim()
            )));
        }
        if !(spec.c_in == 3 && spec.c_out == 2 || spec.c_in == 1 && spec.c_out == 1) {
            return Err(Error::Shape(format!(
                "model with {} inputs and {} outputs is neither lSIRT nor lSIRT*",
                spec.c_in, spec.c_out
            )));
        }
        Ok(())
    }

    fn network_input(&self, model: &Model<f32>, x: &[f64], h: &[f64], p: &[f64]) -> Tensor<f32> {
        let dims = self.grid().shape();
        let t = if model.spec().c_in == 3 {
            Tensor::from_channels(dims, &[x, h, p])
        } else {
            Tensor::from_channels(dims, &[x])
        };
        t.expect("iterate lengths match the grid")
    }
}

fn blend(x: &[f64], gamma: &Tensor<f32>, p: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let c = gamma.channels();
    let out: Vec<f64> = (0..x.len())
        .map(|i| (1.0 - alpha) * x[i] + alpha * gamma.data[i * c] as f64 + p[i])
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("learned SIRT iterate became non-finite".into()));
    }
    Ok(out)
}

fn sirt_update(x: &[f64], p: &[f64]) -> Vec<f64> {
    x.iter().zip(p).map(|(a, b)| a + b).collect()
}

/// One learned SIRT iteration. Returns the next iterate and the network
/// output; with `alpha == 0` the network is skipped and the step is exactly
/// one scaled SIRT step.
pub fn lsirt_step(
    problem: &Problem,
    model: &Model<f32>,
    x: &[f64],
    h: &[f64],
    y: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, Option<Tensor<f32>>)> {
    problem.check_model(model)?;
    let n = problem.op.volume_len();
    if x.len() != n || h.len() != n || y.len() != problem.op.sinogram_len() {
        return Err(Error::Shape("iterate or data does not match the problem".into()));
    }
    let p = problem.scaled_gradient(x, y);
    if alpha == 0.0 {
        return Ok((sirt_update(x, &p), None));
    }
    let gamma = model.predict(&problem.network_input(model, x, h, &p))?;
    let next = blend(x, &gamma, &p, alpha)?;
    Ok((next, Some(gamma)))
}

/// Reconstruction with snapshots of the iterate after selected iteration counts.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub volume: Volume,
    pub snapshots: Vec<(usize, Volume)>,
}

/// Runs `iterations` learned SIRT steps from zero. Snapshots listed in
/// `snapshots` may go beyond `iterations`; the returned volume is the iterate
/// after `iterations` steps.
pub fn reconstruct_with_snapshots(
    y: &Sinogram,
    problem: &Problem,
    model: &Model<f32>,
    alpha: f64,
    iterations: usize,
    snapshots: &[usize],
) -> Result<Reconstruction> {
    problem.check_model(model)?;
    problem.op.check_sinogram(y)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let grid = problem.grid().clone();
    let n = grid.len();
    let last = snapshots.iter().copied().chain([iterations]).max().unwrap_or(0);
    let (mut x, mut h) = (vec![0.0; n], vec![0.0; n]);
    let mut result = None;
    let mut snaps = Vec::new();
    for k in 1..=last {
        let (next, _) = lsirt_step(problem, model, &x, &h, &y.data, alpha)?;
        h = std::mem::replace(&mut x, next);
        if snapshots.contains(&k) {
            snaps.push((k, Volume { grid: grid.clone(), data: x.clone() }));
        }
        if k == iterations {
            result = Some(x.clone());
        }
    }
    let data = result.unwrap_or(x);
    Ok(Reconstruction { volume: Volume { grid, data }, snapshots: snaps })
}

pub fn reconstruct(y: &Sinogram, geo: &Geometry, grid: &GridSpec, model: &Model<f32>, cfg: &LsirtConfig) -> Result<Volume> {
    cfg.validate()?;
    let problem = Problem::new(grid.clone(), geo.clone())?;
    Ok(reconstruct_with_snapshots(y, &problem, model, cfg.alpha, cfg.n_tot, &[])?.volume)
}

/// Network forward over overlapping tiles. `tile` is the window size per
/// axis including `margin` voxels of context on each side; only the central
/// part of each window is kept. Axes where the tile covers the volume are
/// not split. The result equals the plain forward exactly.
pub fn apply_tiled(model: &Model<f32>, input: &Tensor<f32>, tile: [usize; 3], margin: usize) -> Result<Tensor<f32>> {
    if margin < RECEPTIVE_RADIUS {
        return Err(Error::InvalidArgument(format!(
            "tile margin {margin} is below the receptive radius {RECEPTIVE_RADIUS}"
        )));
    }
    let dims = input.dims();
    let mut ranges = Vec::with_capacity(3);
    for a in 0..3 {
        if tile[a] >= dims[a] {
            ranges.push(vec![(0, dims[a])]);
            continue;
        }
        if tile[a] < 2 * margin + 1 {
            return Err(Error::InvalidArgument(format!(
                "tile {} along axis {a} is smaller than 2·margin + 1 = {}",
                tile[a],
                2 * margin + 1
            )));
        }
        let core = tile[a] - 2 * margin;
        ranges.push((0..dims[a]).step_by(core).map(|s| (s, (s + core).min(dims[a]))).collect());
    }
    let mut out = Tensor::zeros(dims, model.spec().c_out);
    for &(z0, z1) in &ranges[2] {
        for &(y0, y1) in &ranges[1] {
            for &(x0, x1) in &ranges[0] {
                let core = [(x0, x1), (y0, y1), (z0, z1)];
                let lo: [usize; 3] = std::array::from_fn(|a| core[a].0.saturating_sub(margin));
                let hi: [usize; 3] = std::array::from_fn(|a| (core[a].1 + margin).min(dims[a]));
                let size: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
                let window = model.predict(&input.crop(lo, size))?;
                let keep: [usize; 3] = std::array::from_fn(|a| core[a].1 - core[a].0);
                let from: [usize; 3] = std::array::from_fn(|a| core[a].0 - lo[a]);
                out.paste([x0, y0, z0], &window.crop(from, keep));
            }
        }
    }
    Ok(out)
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Fresh random triangle images (2D grids).
    Triangles,
    /// Fresh random ellipsoid volumes (3D grids).
    Ellipsoids,
    /// A fixed image collection, sampled uniformly.
    Volumes(Vec<Volume>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source: DataSource,
    pub noise: NoiseLevel,
}

impl Dataset {
    pub fn new(source: DataSource, noise: NoiseLevel) -> Self {
        Dataset { source, noise }
    }

    fn draw(&self, grid: &GridSpec, rng: &mut ChaCha8Rng) -> Result<Volume> {
        let seed = RngSeed(rng.random());
        let d = grid.dims();
        let v = match &self.source {
            DataSource::Triangles => {
                if d.len() != 2 {
                    return Err(Error::InvalidArgument("triangle images need a 2D grid".into()));
                }
                gen_triangles(seed, [d[0], d[1]], grid.pitch())?
            }
            DataSource::Ellipsoids => {
                if d.len() != 3 {
                    return Err(Error::InvalidArgument("ellipsoid volumes need a 3D grid".into()));
                }
                gen_ellipsoids(seed, [d[0], d[1], d[2]], grid.pitch())?
            }
            DataSource::Volumes(vs) => {
                if vs.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let v = &vs[rng.random_range(0..vs.len())];
                if v.grid.shape() != grid.shape() {
                    return Err(Error::Shape(format!(
                        "dataset image {:?} does not match grid {:?}",
                        v.grid.dims(),
                        grid.dims()
                    )));
                }
                Volume { grid: grid.clone(), data: v.data.clone() }
            }
        };
        Ok(v)
    }
}

/// One image being reconstructed inside the training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchElement {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub y: Vec<f64>,
    pub t: Vec<f64>,
    pub age: usize,
}

/// Draws an image, simulates noisy data and runs `cfg.n_s` learned SIRT
/// steps without recording gradients.
pub fn create_batch_element(
    dataset: &Dataset,
    problem: &Problem,
    model: &Model<f32>,
    cfg: &LsirtConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchElement> {
    let chi = dataset.draw(problem.grid(), rng)?;
    let clean = problem.op.project(&chi)?;
    let y = add_noise(&clean, dataset.noise, RngSeed(rng.random()))?.data;
    let n = chi.data.len();
    let mut el = BatchElement { x: vec![0.0; n], h: vec![0.0; n], y, t: chi.data, age: 0 };
    for _ in 0..cfg.n_s {
        let (next, _) = lsirt_step(problem, model, &el.x, &el.h, &el.y, cfg.alpha)?;
        el.h = std::mem::replace(&mut el.x, next);
        el.age += 1;
    }
    Ok(el)
}

/// Per step, with probability `N_b / (N_tot − N_s)`, one uniformly chosen
/// batch slot is refilled, so each image sees about `N_tot − N_s` trained steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replacement {
    pub probability: f64,
    pub batch: usize,
}

impl Replacement {
    pub fn new(cfg: &LsirtConfig) -> Self {
        let probability = (cfg.batch as f64 / (cfg.n_tot - cfg.n_s) as f64).min(1.0);
        Replacement { probability, batch: cfg.batch }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        (rng.random::<f64>() < self.probability).then(|| rng.random_range(0..self.batch))
    }
}

/// Progress of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Batch mean of the per-element loss.
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
}

/// Loss and parameter gradients of one element, and its advanced state.
fn element_step(
    problem: &Problem,
    model: &Model<f32>,
    cfg: &LsirtConfig,
    el: &BatchElement,
    patch: Option<[usize; 3]>,
) -> Result<(f64, Vec<f32>, BatchElement)> {
    let p = problem.scaled_gradient(&el.x, &el.y);
    let input = problem.network_input(model, &el.x, &el.h, &p);
    let (loss, grads, gamma) = match patch {
        None => {
            let (gamma, mut tape) = model.forward(&input)?;
            let (loss, g) = loss_and_grad(&gamma, &el.x, &el.t, cfg.effective_omega())?;
            let (_, grads) = model.backward(&mut tape, &g)?;
            (loss, grads, gamma)
        }
        Some(lo) => {
            let size = cfg.patch.expect("patch origin implies a patch size");
            let (loss, grads) = patch_loss(model, cfg, el, &input, lo, size)?;
            let gamma = apply_tiled(model, &input, [64, 64, 64], RECEPTIVE_RADIUS)?;
            (loss, grads, gamma)
        }
    };
    let next = BatchElement {
        x: blend(&el.x, &gamma, &p, cfg.alpha)?,
        h: el.x.clone(),
        y: el.y.clone(),
        t: el.t.clone(),
        age: el.age + 1,
    };
    Ok((loss, grads, next))
}

/// Loss on the patch `[lo, lo + size)`, computed from a forward on the patch
/// widened by the receptive radius so the patch output equals the
/// whole-volume output.
fn patch_loss(
    model: &Model<f32>,
    cfg: &LsirtConfig,
    el: &BatchElement,
    input: &Tensor<f32>,
    lo: [usize; 3],
    size: [usize; 3],
) -> Result<(f64, Vec<f32>)> {
    let dims = input.dims();
    let r = RECEPTIVE_RADIUS;
    let wlo: [usize; 3] = std::array::from_fn(|a| lo[a].saturating_sub(r));
    let whi: [usize; 3] = std::array::from_fn(|a| (lo[a] + size[a] + r).min(dims[a]));
    let wsize: [usize; 3] = std::array::from_fn(|a| whi[a] - wlo[a]);
    let (gamma, mut tape) = model.forward(&input.crop(wlo, wsize))?;
    let from: [usize; 3] = std::array::from_fn(|a| lo[a] - wlo[a]);
    let gp = gamma.crop(from, size);
    let pick = |v: &[f64]| {
        let mut out = Vec::with_capacity(size.iter().product());
        for z in lo[2]..lo[2] + size[2] {
            for y in lo[1]..lo[1] + size[1] {
                let row = (z * dims[1] + y) * dims[0];
                out.extend_from_slice(&v[row + lo[0]..row + lo[0] + size[0]]);
            }
        }
        out
    };
    let (loss, g) = loss_and_grad(&gp, &pick(&el.x), &pick(&el.t), cfg.effective_omega())?;
    let mut full = Tensor::zeros(wsize, gamma.channels());
    full.paste(from, &g);
    let (_, grads) = model.backward(&mut tape, &full)?;
    Ok((loss, grads))
}

/// Training with a callback after every step. The callback may stop early
/// by returning `Ok(false)`.
pub fn train_with(
    dataset: &Dataset,
    problem: &Problem,
    cfg: &LsirtConfig,
    seed: RngSeed,
    mut observe: impl FnMut(&StepRecord, &Model<f32>, &AdamState<f32>) -> Result<bool>,
) -> Result<Trained> {
    cfg.validate()?;
    let grid = problem.grid().clone();
    let dims = grid.shape();
    if let Some(p) = cfg.patch {
        if grid.ndim() != 3 || (0..3).any(|a| p[a] > dims[a]) {
            return Err(Error::InvalidArgument(format!("patch {p:?} does not fit a 3D grid {:?}", grid.dims())));
        }
    }
    let mut model = Model::<f32>::kaiming(cfg.variant.model_spec(grid.ndim()), seed)?;
    let mut adam = AdamState::new(model.n_params());
    if cfg.n_iter == 0 {
        return Ok(Trained { model, adam });
    }
    let mut rng = seed.rng(Stream::Training);
    let mut batch = (0..cfg.batch)
        .map(|_| create_batch_element(dataset, problem, &model, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let replacement = Replacement::new(cfg);
    let start = Instant::now();
    for step in 0..cfg.n_iter {
        let fail = |e: Error| Error::Training { step, source: Box::new(e) };
        if let Some(i) = replacement.draw(&mut rng) {
            batch[i] = create_batch_element(dataset, problem, &model, cfg, &mut rng).map_err(fail)?;
        }
        let patches: Vec<Option<[usize; 3]>> = (0..cfg.batch)
            .map(|_| cfg.patch.map(|p| std::array::from_fn(|a| rng.random_range(0..=dims[a] - p[a]))))
            .collect();
        let results = batch
            .par_iter()
            .zip(&patches)
            .map(|(el, &patch)| element_step(problem, &model, cfg, el, patch))
            .collect::<Vec<_>>();
        let mut loss = 0.0;
        let mut grads = vec![0f32; model.n_params()];
        for (slot, r) in batch.iter_mut().zip(results) {
            let (l, g, next) = r.map_err(fail)?;
            loss += l;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            *slot = next;
        }
        let scale = 1.0 / cfg.batch as f32;
        grads.iter_mut().for_each(|g| *g *= scale);
        loss /= cfg.batch as f64;
        let lr = cfg.lr.at(step, cfg.n_iter);
        adam.update(&mut model.params, &grads, lr).map_err(fail)?;
        let record = StepRecord { step, loss, lr, seconds: start.elapsed().as_secs_f64() };
        if !observe(&record, &model, &adam)? {
            break;
        }
    }
    Ok(Trained { model, adam })
}

pub fn train(dataset: &Dataset, geo: &Geometry, grid: &GridSpec, cfg: &LsirtConfig, seed: RngSeed) -> Result<Model<f32>> {
    let problem = Problem::new(grid.clone(), geo.clone())?;
    Ok(train_with(dataset, &problem, cfg, seed, |_, _, _| Ok(true))?.model)
}
