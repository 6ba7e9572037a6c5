//! The correction network: three 3×3 (or 3×3×3) zero-padded convolutions,
//! the first two followed by per-channel PReLU, with hand-written gradients
//! and an Adam optimizer.
//!
//! Tensors are channel-last: the value of channel `c` at voxel `p` (x fastest,
//! then y, then z) lives at `data[p * channels + c]`. Convolutions run as
//! im2col followed by a matrix product, in fixed-size voxel chunks so the
//! result of every voxel is independent of how the volume is split.

use std::fmt::Debug;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::iter::Sum;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngSeed, Stream};

pub const WIDTH: usize = 32;
/// Voxels influenced by a zero-padding border: one per convolution layer.
pub const RECEPTIVE_RADIUS: usize = 3;
pub const PRELU_INIT: f64 = 0.25;
pub const LOSS_CLAMP: f64 = 1e-12;
pub const DEFAULT_OMEGA: f64 = 0.04;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

const CHUNK: usize = 1024;
const CHECKPOINT_MAGIC: &[u8; 4] = b"LSNN";
const CHECKPOINT_VERSION: u16 = 1;

/// Scalar type of network tensors.
pub trait Real: Float + FromPrimitive + Default + Send + Sync + Debug + Sum + 'static {
    /// `c = a·b + beta·c` for row-major `c` (row stride `rsc`, unit column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], ra: usize, ca: usize, b: &[T], rb: usize, cb: usize, c: &[T], rc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * ra + (k - 1) * ca < a.len());
        assert!((k - 1) * rb + (n - 1) * cb < b.len());
    }
    assert!((m - 1) * rc + n - 1 < c.len());
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
            ) {
                check_gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched is bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Multi-channel image on a 2D or 3D voxel grid, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 3],
    channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        let n = dims.iter().product::<usize>() * channels;
        Tensor { dims, channels, data: vec![T::zero(); n] }
    }

    pub fn from_data(dims: [usize; 3], channels: usize, data: Vec<T>) -> Result<Self> {
        let n = dims.iter().product::<usize>() * channels;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "tensor {dims:?}x{channels} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, channels, data })
    }

    /// Interleaves single-channel images of equal length.
    pub fn from_channels(dims: [usize; 3], channels: &[&[f64]]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Shape(format!("channel length differs from {n} voxels")));
        }
        let c = channels.len();
        let mut data = vec![T::zero(); n * c];
        for (k, ch) in channels.iter().enumerate() {
            for (p, &v) in ch.iter().enumerate() {
                data[p * c + k] = T::from_f64_lossy(v);
            }
        }
        Ok(Tensor { dims, channels: c, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize, c: usize) -> T {
        let p = (z * self.dims[1] + y) * self.dims[0] + x;
        self.data[p * self.channels + c]
    }

    pub fn channel(&self, c: usize) -> Vec<T> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Copies the box `[lo, lo + size)` out of this tensor.
    pub fn crop(&self, lo: [usize; 3], size: [usize; 3]) -> Tensor<T> {
        let c = self.channels;
        let mut out = Tensor::zeros(size, c);
        for z in 0..size[2] {
            for y in 0..size[1] {
                let src = ((lo[2] + z) * self.dims[1] + lo[1] + y) * self.dims[0] + lo[0];
                let dst = (z * size[1] + y) * size[0];
                out.data[dst * c..(dst + size[0]) * c]
                    .copy_from_slice(&self.data[src * c..(src + size[0]) * c]);
            }
        }
        out
    }

    /// Writes `src` into this tensor with its origin at `lo`.
    pub fn paste(&mut self, lo: [usize; 3], src: &Tensor<T>) {
        let c = self.channels;
        assert_eq!(c, src.channels);
        let size = src.dims;
        for z in 0..size[2] {
            for y in 0..size[1] {
                let dst = ((lo[2] + z) * self.dims[1] + lo[1] + y) * self.dims[0] + lo[0];
                let s = (z * size[1] + y) * size[0];
                self.data[dst * c..(dst + size[0]) * c]
                    .copy_from_slice(&src.data[s * c..(s + size[0]) * c]);
            }
        }
    }
}

/// Architecture of a correction network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    c_in: usize,
    c_out: usize,
    weights: usize,
    bias: usize,
    slope: Option<usize>,
}

impl Layer {
    fn weight_len(&self, taps: usize) -> usize {
        taps * self.c_in * self.c_out
    }
}

impl ModelSpec {
    /// Inputs (x, previous x, scaled gradient), outputs (image, error estimate).
    pub fn lsirt(dim: usize) -> Self {
        ModelSpec { dim, c_in: 3, c_out: 2 }
    }

    /// Ablation that only sees the current iterate.
    pub fn lsirt_star(dim: usize) -> Self {
        ModelSpec { dim, c_in: 1, c_out: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidArgument(format!("network dimension must be 2 or 3, got {}", self.dim)));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::InvalidArgument("network needs at least one input and output channel".into()));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        3usize.pow(self.dim as u32)
    }

    fn layers(&self) -> [Layer; 3] {
        let taps = self.taps();
        let mut off = 0;
        let mut make = |c_in: usize, c_out: usize, act: bool| {
            let weights = off;
            let bias = weights + taps * c_in * c_out;
            off = bias + c_out;
            let slope = act.then(|| {
                let s = off;
                off += c_out;
                s
            });
            Layer { c_in, c_out, weights, bias, slope }
        };
        [make(self.c_in, WIDTH, true), make(WIDTH, WIDTH, true), make(WIDTH, self.c_out, false)]
    }

    pub fn n_params(&self) -> usize {
        let last = self.layers()[2];
        last.bias + last.c_out
    }

    fn offsets(&self) -> Vec<[isize; 3]> {
        tap_offsets(self.dim)
    }
}

/// Kernel tap offsets in (x, y, z), ordered so that tap `K-1-t` is the
/// negation of tap `t`.
pub fn tap_offsets(dim: usize) -> Vec<[isize; 3]> {
    let zs: &[isize] = if dim == 3 { &[-1, 0, 1] } else { &[0] };
    let mut out = Vec::with_capacity(9 * zs.len());
    for &dz in zs {
        for dy in -1..=1 {
            for dx in -1..=1 {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Network parameters, stored flat in declaration order: for each layer the
/// kernel `[tap][c_in][c_out]`, the bias `[c_out]` and, for the two hidden
/// blocks, the PReLU slopes `[c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    pub params: Vec<T>,
}

/// Activations recorded by [`Model::forward`] for one backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    used: bool,
}

impl<T> Tape<T> {
    /// Inputs of the two PReLU activations.
    pub fn pre_activations(&self) -> &[Tensor<T>] {
        &self.pre
    }
}

impl<T: Real> Model<T> {
    /// Zero kernels and biases, slopes at their initial value.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = vec![T::zero(); spec.n_params()];
        for l in spec.layers() {
            if let Some(s) = l.slope {
                params[s..s + l.c_out].fill(T::from_f64_lossy(PRELU_INIT));
            }
        }
        Ok(Model { spec, params })
    }

    /// Kernels drawn from N(0, 2/fan_in) with fan_in = taps·c_in.
    pub fn kaiming(spec: ModelSpec, seed: RngSeed) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let mut rng = seed.rng(Stream::Init);
        let taps = spec.taps();
        for l in spec.layers() {
            let std = (2.0 / (taps * l.c_in) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            for w in &mut model.params[l.weights..l.weights + l.weight_len(taps)] {
                *w = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        Ok(model)
    }

    pub fn from_params(spec: ModelSpec, params: Vec<T>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.n_params() {
            return Err(Error::Shape(format!(
                "model needs {} parameters, got {}",
                spec.n_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { spec: self.spec, params: self.params.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    /// Kernel of layer 0, 1 or 2 (the head).
    pub fn kernel(&self, layer: usize) -> &[T] {
        let l = self.spec.layers()[layer];
        &self.params[l.weights..l.weights + l.weight_len(self.spec.taps())]
    }

    pub fn kernel_mut(&mut self, layer: usize) -> &mut [T] {
        let l = self.spec.layers()[layer];
        let n = l.weight_len(self.spec.taps());
        &mut self.params[l.weights..l.weights + n]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let l = self.spec.layers()[layer];
        &self.params[l.bias..l.bias + l.c_out]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let l = self.spec.layers()[layer];
        &mut self.params[l.bias..l.bias + l.c_out]
    }

    /// PReLU slopes of block 0 or 1.
    pub fn slopes(&self, layer: usize) -> &[T] {
        let l = self.spec.layers()[layer];
        let s = l.slope.expect("head layer has no activation");
        &self.params[s..s + l.c_out]
    }

    pub fn slopes_mut(&mut self, layer: usize) -> &mut [T] {
        let l = self.spec.layers()[layer];
        let s = l.slope.expect("head layer has no activation");
        &mut self.params[s..s + l.c_out]
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels != self.spec.c_in {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.spec.c_in, input.channels
            )));
        }
        let d = input.dims;
        let small = if self.spec.dim == 3 {
            d.iter().any(|&n| n < 3)
        } else {
            d[0] < 3 || d[1] < 3 || d[2] != 1
        };
        if small {
            return Err(Error::Shape(format!(
                "{}D network needs spatial size >= 3 per axis, got {d:?}",
                self.spec.dim
            )));
        }
        Ok(())
    }

    fn run(&self, input: &Tensor<T>, mut tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let offs = self.spec.offsets();
        let taps = offs.len();
        let mut cur = input.clone();
        for (i, l) in self.spec.layers().iter().enumerate() {
            let w = &self.params[l.weights..l.weights + l.weight_len(taps)];
            let b = &self.params[l.bias..l.bias + l.c_out];
            let z = conv_forward(&cur, l.c_out, w, b, &offs);
            let Some(s) = l.slope else {
                if let Some(t) = tape.as_deref_mut() {
                    t.inputs.push(cur);
                }
                return Ok(z);
            };
            let a = prelu(&z, &self.params[s..s + l.c_out]);
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut cur, a));
                t.pre.push(z);
            } else {
                cur = a;
            }
            debug_assert!(i < 2);
        }
        unreachable!("the head layer has no activation")
    }

    /// Output only, without recording activations.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(input, None)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let mut tape = Tape { inputs: Vec::with_capacity(3), pre: Vec::with_capacity(2), used: false };
        let out = self.run(input, Some(&mut tape))?;
        Ok((out, tape))
    }

    /// Gradients of `<output, grad_out>` with respect to the input and to
    /// every parameter (same layout as `params`). Consumes the tape.
    pub fn backward(&self, tape: &mut Tape<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        if tape.used {
            return Err(Error::InvalidState("tape was already consumed by a backward pass".into()));
        }
        if tape.inputs.len() != 3 || tape.pre.len() != 2 {
            return Err(Error::InvalidState("tape does not come from a forward pass".into()));
        }
        let dims = tape.inputs[0].dims;
        if grad_out.dims != dims || grad_out.channels != self.spec.c_out {
            return Err(Error::Shape(format!(
                "output gradient {:?}x{} does not match network output {:?}x{}",
                grad_out.dims, grad_out.channels, dims, self.spec.c_out
            )));
        }
        tape.used = true;
        let offs = self.spec.offsets();
        let taps = offs.len();
        let mut grads = vec![T::zero(); self.params.len()];
        let layers = self.spec.layers();
        let mut g = grad_out.clone();
        for i in (0..3).rev() {
            let l = layers[i];
            if let Some(s) = l.slope {
                let slopes = &self.params[s..s + l.c_out];
                prelu_backward(&tape.pre[i], slopes, &mut g, &mut grads[s..s + l.c_out]);
            }
            let w = &self.params[l.weights..l.weights + l.weight_len(taps)];
            let (gw, gb) = grads[l.weights..l.bias + l.c_out].split_at_mut(l.weight_len(taps));
            g = conv_backward(&tape.inputs[i], &g, w, &offs, gw, gb);
        }
        tape.inputs.clear();
        tape.pre.clear();
        Ok((g, grads))
    }
}

fn im2col<T: Real>(src: &Tensor<T>, offs: &[[isize; 3]], start: usize, len: usize, cols: &mut [T]) {
    let c = src.channels;
    let kc = offs.len() * c;
    let [nx, ny, nz] = src.dims;
    for r in 0..len {
        let p = start + r;
        let (x, y, z) = ((p % nx) as isize, ((p / nx) % ny) as isize, (p / (nx * ny)) as isize);
        let row = &mut cols[r * kc..(r + 1) * kc];
        for (t, o) in offs.iter().enumerate() {
            let dst = &mut row[t * c..(t + 1) * c];
            let (xx, yy, zz) = (x + o[0], y + o[1], z + o[2]);
            if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                dst.fill(T::zero());
            } else {
                let q = ((zz as usize * ny + yy as usize) * nx + xx as usize) * c;
                dst.copy_from_slice(&src.data[q..q + c]);
            }
        }
    }
}

/// Zero-padded 3-tap-per-axis convolution; `w` is `[tap][c_in][c_out]`.
pub fn conv_forward<T: Real>(input: &Tensor<T>, c_out: usize, w: &[T], b: &[T], offs: &[[isize; 3]]) -> Tensor<T> {
    let n = input.voxels();
    let kc = offs.len() * input.channels;
    let mut out = Tensor::zeros(input.dims, c_out);
    for row in out.data.chunks_exact_mut(c_out) {
        row.copy_from_slice(b);
    }
    let mut cols = vec![T::zero(); CHUNK.min(n) * kc];
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        im2col(input, offs, start, len, &mut cols);
        let dst = &mut out.data[start * c_out..(start + len) * c_out];
        T::gemm(len, kc, c_out, &cols, kc, 1, w, c_out, 1, T::one(), dst, c_out);
        start += len;
    }
    out
}

/// Accumulates kernel and bias gradients into `gw`, `gb`; returns the input gradient.
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    w: &[T],
    offs: &[[isize; 3]],
    gw: &mut [T],
    gb: &mut [T],
) -> Tensor<T> {
    let n = input.voxels();
    let (c_in, c_out) = (input.channels, grad_out.channels);
    let taps = offs.len();
    let kc = taps * c_in;

    for row in grad_out.data.chunks_exact(c_out) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g = *g + v;
        }
    }

    // Flipped, transposed kernel: the input gradient is a convolution of the
    // output gradient with it, since tap K-1-t mirrors tap t.
    let mut flip = vec![T::zero(); taps * c_out * c_in];
    for t in 0..taps {
        for ci in 0..c_in {
            for co in 0..c_out {
                flip[(t * c_out + co) * c_in + ci] = w[((taps - 1 - t) * c_in + ci) * c_out + co];
            }
        }
    }

    let mut grad_in = Tensor::zeros(input.dims, c_in);
    let chunk = CHUNK.min(n);
    let mut cols = vec![T::zero(); chunk * kc];
    let mut gcols = vec![T::zero(); chunk * taps * c_out];
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        im2col(input, offs, start, len, &mut cols);
        let g = &grad_out.data[start * c_out..(start + len) * c_out];
        T::gemm(kc, len, c_out, &cols, 1, kc, g, c_out, 1, T::one(), gw, c_out);

        im2col(grad_out, offs, start, len, &mut gcols);
        let dst = &mut grad_in.data[start * c_in..(start + len) * c_in];
        T::gemm(len, taps * c_out, c_in, &gcols, taps * c_out, 1, &flip, c_in, 1, T::zero(), dst, c_in);
        start += len;
    }
    grad_in
}

pub fn prelu<T: Real>(z: &Tensor<T>, slopes: &[T]) -> Tensor<T> {
    let mut out = z.clone();
    for row in out.data.chunks_exact_mut(slopes.len()) {
        for (v, &a) in row.iter_mut().zip(slopes) {
            if *v <= T::zero() {
                *v = *v * a;
            }
        }
    }
    out
}

/// Turns `grad` (with respect to the activation) into the gradient with
/// respect to the pre-activation `pre`, accumulating slope gradients.
pub fn prelu_backward<T: Real>(pre: &Tensor<T>, slopes: &[T], grad: &mut Tensor<T>, gslope: &mut [T]) {
    let c = slopes.len();
    for (zrow, grow) in pre.data.chunks_exact(c).zip(grad.data.chunks_exact_mut(c)) {
        for k in 0..c {
            if zrow[k] <= T::zero() {
                gslope[k] = gslope[k] + zrow[k] * grow[k];
                grow[k] = grow[k] * slopes[k];
            }
        }
    }
}

/// `L = log(‖γ₀ − t‖² + ω‖γ₁ − (t − x)‖²)` with the argument clamped below
/// at [`LOSS_CLAMP`], and its gradient with respect to γ. A single-channel γ
/// drops the second term. Norms are sums over voxels.
pub fn loss_and_grad<T: Real>(gamma: &Tensor<T>, x: &[f64], t: &[f64], omega: f64) -> Result<(f64, Tensor<T>)> {
    let n = gamma.voxels();
    let c = gamma.channels;
    if x.len() != n || t.len() != n || !(c == 1 || c == 2) {
        return Err(Error::Shape(format!(
            "loss needs a 1- or 2-channel prediction over {} voxels, got {c} channels, x {} and t {}",
            n,
            x.len(),
            t.len()
        )));
    }
    let mut s = 0.0;
    for p in 0..n {
        let r0 = gamma.data[p * c].as_f64() - t[p];
        s += r0 * r0;
        if c == 2 {
            let r1 = gamma.data[p * c + 1].as_f64() - (t[p] - x[p]);
            s += omega * r1 * r1;
        }
    }
    let mut grad = Tensor::zeros(gamma.dims, c);
    if !s.is_finite() {
        return Err(Error::Numeric(format!("loss is {s}")));
    }
    if s <= LOSS_CLAMP {
        return Ok((LOSS_CLAMP.ln(), grad));
    }
    for p in 0..n {
        let r0 = gamma.data[p * c].as_f64() - t[p];
        grad.data[p * c] = T::from_f64_lossy(2.0 * r0 / s);
        if c == 2 {
            let r1 = gamma.data[p * c + 1].as_f64() - (t[p] - x[p]);
            grad.data[p * c + 1] = T::from_f64_lossy(2.0 * omega * r1 / s);
        }
    }
    Ok((s.ln(), grad))
}

/// Bias-corrected Adam with β = (0.9, 0.99) and ε = 1e-8.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].as_f64();
            let m = ADAM_BETA1 * self.m[i].as_f64() + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v[i].as_f64() + (1.0 - ADAM_BETA2) * g * g;
            self.m[i] = T::from_f64_lossy(m);
            self.v[i] = T::from_f64_lossy(v);
            let delta = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            params[i] = T::from_f64_lossy(params[i].as_f64() - delta);
        }
        Ok(())
    }
}

/// Writes the checkpoint format: magic `LSNN`, version (u16), dimension (u8),
/// c_in and c_out (u16), parameter count (u32), the parameters as
/// little-endian f32, then a flag byte and, if set, the Adam step (u64)
/// followed by both moment arrays.
pub fn write_checkpoint<T: Real>(mut w: impl Write, model: &Model<T>, adam: Option<&AdamState<T>>) -> Result<()> {
    let spec = model.spec;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u8(spec.dim as u8)?;
    w.write_u16::<LittleEndian>(spec.c_in as u16)?;
    w.write_u16::<LittleEndian>(spec.c_out as u16)?;
    w.write_u32::<LittleEndian>(model.params.len() as u32)?;
    let put = |w: &mut dyn Write, xs: &[T]| -> std::io::Result<()> {
        for &x in xs {
            w.write_f32::<LittleEndian>(x.as_f64() as f32)?;
        }
        Ok(())
    };
    put(&mut w, &model.params)?;
    match adam {
        Some(a) => {
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(a.step)?;
            put(&mut w, &a.m)?;
            put(&mut w, &a.v)?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(Model<f32>, Option<AdamState<f32>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = r.read_u8()? as usize;
    let c_in = r.read_u16::<LittleEndian>()? as usize;
    let c_out = r.read_u16::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let spec = ModelSpec { dim, c_in, c_out };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    if n != spec.n_params() {
        return Err(Error::Format(format!("checkpoint has {n} parameters, architecture needs {}", spec.n_params())));
    }
    let get = |r: &mut dyn Read| -> std::io::Result<Vec<f32>> {
        let mut v = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut v)?;
        Ok(v)
    };
    let model = Model::from_params(spec, get(&mut r)?)?;
    let adam = match r.read_u8()? {
        0 => None,
        1 => {
            let step = r.read_u64::<LittleEndian>()?;
            let m = get(&mut r)?;
            let v = get(&mut r)?;
            Some(AdamState { m, v, step })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    Ok((model, adam))
}

impl Model<f32> {
    pub fn save(&self, path: impl AsRef<Path>, adam: Option<&AdamState<f32>>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, self, adam)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<AdamState<f32>>)> {
        read_checkpoint(BufReader::new(File::open(path)?))
    }
}
