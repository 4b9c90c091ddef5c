//! 3D denoising diffusion prior over 32³ voxel patches.
//!
//! The forward process uses the closed-form marginal
//! `x_t = sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·ε` with `ᾱ_0 = 1`. The denoiser is a
//! small 3-level convolutional encoder-decoder conditioned on a sinusoidal
//! time embedding. Low-rank adapters wrap every convolution and dense weight,
//! `W' = W + δ·A·B`, with `B` starting at zero.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::checkpoint::{real_data, real_vec, Checkpoint, Persist};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::real::{sigmoid, Real};
use crate::rng;
use crate::types::{VoxelGrid, VoxelPatch, PATCH_DIM, PATCH_VOXELS};

/// Variance schedule with `betas[0] = 0` and `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β_1..β_T` from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::validation("schedule needs at least one step"));
        }
        if !(start > 0.0 && end >= start && end < 1.0) {
            return Err(Error::validation("betas must satisfy 0 < start <= end < 1"));
        }
        let mut betas = vec![0.0];
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            let f = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            let b = start + (end - start) * f;
            betas.push(b);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    /// The 1e-4..0.02 schedule of a 1000-step chain rescaled to `steps`, so
    /// short chains still end near pure noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let s = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, (1e-4 * s).min(0.999), (0.02 * s).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::OutOfRange { what: "diffusion step", index: t, limit: self.steps() + 1 });
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &VoxelPatch, t: usize, schedule: &NoiseSchedule, noise: &VoxelGrid) -> Result<VoxelGrid> {
    schedule.check_step(t)?;
    diffuse_raw(&x0.grid, t, schedule, &noise.0).map(VoxelGrid)
}

fn diffuse_raw(x0: &[f32], t: usize, schedule: &NoiseSchedule, noise: &[f32]) -> Result<Vec<f32>> {
    if x0.len() != PATCH_VOXELS || noise.len() != PATCH_VOXELS {
        return Err(Error::Shape("diffusion operates on 32³ grids".into()));
    }
    let a = schedule.alpha_bar[t];
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(noise).map(|(&x, &e)| (sa * x as f64 + sn * e as f64) as f32).collect())
}

/// One step of the stepwise kernel, `x_t = sqrt(1-β_t)·x_{t-1} + sqrt(β_t)·ε`.
pub fn diffuse_step(prev: &VoxelGrid, t: usize, schedule: &NoiseSchedule, noise: &VoxelGrid) -> Result<VoxelGrid> {
    schedule.check_step(t)?;
    if t == 0 {
        return Err(Error::validation("the stepwise kernel starts at t = 1"));
    }
    let b = schedule.betas[t];
    let (sa, sn) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(VoxelGrid(
        prev.0.iter().zip(&noise.0).map(|(&x, &e)| (sa * x as f64 + sn * e as f64) as f32).collect(),
    ))
}

pub fn standard_normal_grid(rng: &mut impl Rng) -> VoxelGrid {
    VoxelGrid((0..PATCH_VOXELS).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &[f32], t: usize) -> Result<Vec<f32>>;
}

/// Always predicts zero noise.
pub struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn predict_noise(&self, x_t: &[f32], _t: usize) -> Result<Vec<f32>> {
        Ok(vec![0.0; x_t.len()])
    }
}

/// Knows the clean grids it will be asked about and returns the exact noise
/// for the most likely one. For tests.
pub struct OracleNoise {
    pub clean: Vec<Vec<f32>>,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OracleNoise {
    fn predict_noise(&self, x_t: &[f32], t: usize) -> Result<Vec<f32>> {
        self.schedule.check_step(t)?;
        let a = self.schedule.alpha_bar[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let dist = |x0: &Vec<f32>| -> f64 {
            x_t.iter().zip(x0).map(|(&x, &c)| (x as f64 - sa * c as f64).powi(2)).sum()
        };
        let best = self
            .clean
            .iter()
            .min_by(|a, b| dist(a).total_cmp(&dist(b)))
            .ok_or_else(|| Error::validation("oracle has no clean grids"))?;
        if sn == 0.0 {
            return Ok(vec![0.0; x_t.len()]);
        }
        Ok(x_t.iter().zip(best).map(|(&x, &c)| ((x as f64 - sa * c as f64) / sn) as f32).collect())
    }
}

/// `x̂0 = (x_t - sqrt(1-ᾱ_t)·ε_θ(x_t, t)) / sqrt(ᾱ_t)`, clamped to `[0, 1]`.
pub fn denoise_estimate(
    model: &dyn NoisePredictor,
    noisy: &VoxelGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<VoxelPatch> {
    schedule.check_step(t)?;
    if noisy.0.len() != PATCH_VOXELS {
        return Err(Error::Shape("denoiser expects a 32³ grid".into()));
    }
    let eps = model.predict_noise(&noisy.0, t)?;
    let a = schedule.alpha_bar[t];
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let grid = noisy
        .0
        .iter()
        .zip(&eps)
        .map(|(&x, &e)| ((x as f64 - sn * e as f64) / sa).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(VoxelPatch { grid, world_origin: crate::types::Point3::ZERO, edge_length: 1.0 })
}

/// Noises each channel to `t_g` and maps it back through the denoiser.
/// Placement metadata of the inputs is carried over.
pub fn guidance_targets(
    model: &dyn NoisePredictor,
    rho_b: &VoxelPatch,
    rho_s: &VoxelPatch,
    t_g: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(VoxelPatch, VoxelPatch)> {
    Ok((
        guidance_target(model, rho_b, 0, t_g, schedule, seed)?,
        guidance_target(model, rho_s, 1, t_g, schedule, seed)?,
    ))
}

/// Target for a single channel (`0` border, `1` scattering); the noise
/// stream depends on the channel so both can be computed independently.
pub fn guidance_target(
    model: &dyn NoisePredictor,
    patch: &VoxelPatch,
    channel: u64,
    t_g: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<VoxelPatch> {
    schedule.check_step(t_g)?;
    patch.validate()?;
    let noise = standard_normal_grid(&mut rng::stream(seed, "guidance", &[channel]));
    let x_t = forward_diffuse(patch, t_g, schedule, &noise)?;
    let mut m = denoise_estimate(model, &x_t, t_g, schedule)?;
    m.world_origin = patch.world_origin;
    m.edge_length = patch.edge_length;
    Ok(m)
}

/// Full reverse chain from pure noise. Only used to sanity-check trained models.
pub fn sample_ancestral(model: &dyn NoisePredictor, schedule: &NoiseSchedule, seed: u64) -> Result<VoxelGrid> {
    let mut r = rng::stream(seed, "ancestral", &[]);
    let mut x: Vec<f64> = standard_normal_grid(&mut r).0.iter().map(|&v| v as f64).collect();
    for t in (1..=schedule.steps()).rev() {
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let eps = model.predict_noise(&xf, t)?;
        let b = schedule.betas[t];
        let c = b / (1.0 - schedule.alpha_bar[t]).sqrt();
        let s = (1.0 - b).sqrt();
        let z = standard_normal_grid(&mut r);
        for i in 0..x.len() {
            x[i] = (x[i] - c * eps[i] as f64) / s;
            if t > 1 {
                x[i] += b.sqrt() * z.0[i] as f64;
            }
        }
    }
    Ok(VoxelGrid(x.into_iter().map(|v| v as f32).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { width: 16, time_dim: 32 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::validation("denoiser width must be >= 1 and time_dim even and >= 2"));
        }
        Ok(())
    }
}

/// A weight matrix `d_out x d_in` plus bias, stored in a flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: &'static str,
    pub d_out: usize,
    pub d_in: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn weight_len(&self) -> usize {
        self.d_out * self.d_in
    }
}

const L_IN: usize = 0;
const L_D1: usize = 1;
const L_D2: usize = 2;
const L_MID: usize = 3;
const L_U2: usize = 4;
const L_U1: usize = 5;
const L_OUT: usize = 6;
const L_TEMB: usize = 7;
const L_PROJ: usize = 8;
const N_BLOCKS: usize = 6;
const KVOL: usize = 27;

fn layout(cfg: &DenoiserConfig) -> (Vec<Linear>, usize) {
    let w = cfg.width;
    let d = cfg.time_dim;
    let specs: [(&'static str, usize, usize); 14] = [
        ("conv_in", w, KVOL),
        ("conv_down1", 2 * w, w * KVOL),
        ("conv_down2", 4 * w, 2 * w * KVOL),
        ("conv_mid", 4 * w, 4 * w * KVOL),
        ("conv_up2", 2 * w, 6 * w * KVOL),
        ("conv_up1", w, 3 * w * KVOL),
        ("conv_out", 1, w * KVOL),
        ("time_dense", d, d),
        ("time_proj0", w, d),
        ("time_proj1", 2 * w, d),
        ("time_proj2", 4 * w, d),
        ("time_proj3", 4 * w, d),
        ("time_proj4", 2 * w, d),
        ("time_proj5", w, d),
    ];
    let mut off = 0;
    let layers = specs
        .iter()
        .map(|&(name, d_out, d_in)| {
            let l = Linear { name, d_out, d_in, w: off, b: off + d_out * d_in };
            off += d_out * d_in + d_out;
            l
        })
        .collect();
    (layers, off)
}

/// Channels out of each activated block, in forward order.
fn block_channels(w: usize) -> [usize; N_BLOCKS] {
    [w, 2 * w, 4 * w, 4 * w, 2 * w, w]
}

#[inline]
fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Sinusoidal embedding of the step index.
pub fn time_embedding<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = T::of((t as f64 * f).sin());
        out[half + k] = T::of((t as f64 * f).cos());
    }
    out
}

/// Patches of a `c x s³` volume for a 3³ kernel, zero padding 1.
/// Row `(ci*27 + kz*9 + ky*3 + kx)`, column = output voxel.
fn im2col<T: Real>(x: &[T], c: usize, s: usize, stride: usize) -> Vec<T> {
    let so = s / stride;
    let n = so * so * so;
    let mut cols = vec![T::zero(); c * KVOL * n];
    for ci in 0..c {
        let xc = &x[ci * s * s * s..(ci + 1) * s * s * s];
        for k in 0..KVOL {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &mut cols[(ci * KVOL + k) * n..(ci * KVOL + k + 1) * n];
            for oz in 0..so {
                let iz = (oz * stride + kz) as isize - 1;
                if iz < 0 || iz >= s as isize {
                    continue;
                }
                for oy in 0..so {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= s as isize {
                        continue;
                    }
                    let src = (iz as usize * s + iy as usize) * s;
                    let dst = (oz * so + oy) * so;
                    for ox in 0..so {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < s as isize {
                            row[dst + ox] = xc[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, s: usize, stride: usize) -> Vec<T> {
    let so = s / stride;
    let n = so * so * so;
    let mut x = vec![T::zero(); c * s * s * s];
    for ci in 0..c {
        let xc = &mut x[ci * s * s * s..(ci + 1) * s * s * s];
        for k in 0..KVOL {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &cols[(ci * KVOL + k) * n..(ci * KVOL + k + 1) * n];
            for oz in 0..so {
                let iz = (oz * stride + kz) as isize - 1;
                if iz < 0 || iz >= s as isize {
                    continue;
                }
                for oy in 0..so {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= s as isize {
                        continue;
                    }
                    let dst = (iz as usize * s + iy as usize) * s;
                    let src = (oz * so + oy) * so;
                    for ox in 0..so {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < s as isize {
                            xc[dst + ix as usize] += row[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn upsample<T: Real>(x: &[T], c: usize, s: usize) -> Vec<T> {
    let s2 = 2 * s;
    let mut out = vec![T::zero(); c * s2 * s2 * s2];
    for ci in 0..c {
        for z in 0..s2 {
            for y in 0..s2 {
                let src = ((ci * s + z / 2) * s + y / 2) * s;
                let dst = ((ci * s2 + z) * s2 + y) * s2;
                for xx in 0..s2 {
                    out[dst + xx] = x[src + xx / 2];
                }
            }
        }
    }
    out
}

fn upsample_backward<T: Real>(d: &[T], c: usize, s: usize) -> Vec<T> {
    let s2 = 2 * s;
    let mut out = vec![T::zero(); c * s * s * s];
    for ci in 0..c {
        for z in 0..s2 {
            for y in 0..s2 {
                let dst = ((ci * s + z / 2) * s + y / 2) * s;
                let src = ((ci * s2 + z) * s2 + y) * s2;
                for xx in 0..s2 {
                    out[dst + xx / 2] += d[src + xx];
                }
            }
        }
    }
    out
}

struct Tape<T: Real> {
    /// Inputs to each convolution, by layer index (0..=6).
    conv_in: Vec<Vec<T>>,
    /// Pre-activations of the six activated blocks.
    pre: Vec<Vec<T>>,
    temb_in: Vec<T>,
    temb_pre: Vec<T>,
    emb: Vec<T>,
}

/// Convolutional noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserState<T: Real = f32> {
    pub config: DenoiserConfig,
    pub layers: Vec<Linear>,
    pub params: Vec<T>,
}

impl<T: Real> DenoiserState<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, n) = layout(&config);
        let mut params = vec![T::zero(); n];
        let mut r = rng::stream(seed, "denoiser-init", &[]);
        for l in &layers {
            let bound = 1.0 / (l.d_in as f64).sqrt();
            for v in &mut params[l.w..l.w + l.weight_len()] {
                *v = T::of(r.random_range(-bound..bound));
            }
        }
        Ok(DenoiserState { config, layers, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> DenoiserState<U> {
        DenoiserState {
            config: self.config,
            layers: self.layers.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// SHA-256 of the parameter bytes, hex encoded.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.params {
            h.update(v.f64().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn forward(&self, x: &[T], t: usize) -> Result<Vec<T>> {
        check_input(x)?;
        Ok(self.run(&self.params, x, t).0)
    }

    /// Forward pass with an explicit parameter vector (for adapters).
    fn run(&self, params: &[T], x: &[T], t: usize) -> (Vec<T>, Tape<T>) {
        let w = self.config.width;
        let s = PATCH_DIM;
        let lay = &self.layers;
        let temb_in = time_embedding::<T>(t, self.config.time_dim);
        let temb_pre = dense(params, &lay[L_TEMB], &temb_in);
        let emb: Vec<T> = temb_pre.iter().map(|&v| silu(v)).collect();
        let chans = block_channels(w);
        let projs: Vec<Vec<T>> = (0..N_BLOCKS).map(|k| dense(params, &lay[L_PROJ + k], &emb)).collect();

        let mut conv_in = Vec::with_capacity(7);
        let mut pre = Vec::with_capacity(N_BLOCKS);
        let mut block = |layer: usize, input: Vec<T>, c_in: usize, s_in: usize, stride: usize, k: usize| -> Vec<T> {
            let mut a = conv3d(params, &lay[layer], &input, c_in, s_in, stride);
            let n = a.len() / chans[k];
            for (c, chunk) in a.chunks_mut(n).enumerate() {
                let p = projs[k][c];
                chunk.iter_mut().for_each(|v| *v += p);
            }
            let h = a.iter().map(|&v| silu(v)).collect();
            conv_in.push(input);
            pre.push(a);
            h
        };
        let h0 = block(L_IN, x.to_vec(), 1, s, 1, 0);
        let h1 = block(L_D1, h0.clone(), w, s, 2, 1);
        let h2 = block(L_D2, h1.clone(), 2 * w, s / 2, 2, 2);
        let h3 = block(L_MID, h2, 4 * w, s / 4, 1, 3);
        let mut c4 = upsample(&h3, 4 * w, s / 4);
        c4.extend_from_slice(&h1);
        let h4 = block(L_U2, c4, 6 * w, s / 2, 1, 4);
        let mut c5 = upsample(&h4, 2 * w, s / 2);
        c5.extend_from_slice(&h0);
        let h5 = block(L_U1, c5, 3 * w, s, 1, 5);
        let out = conv3d(params, &lay[L_OUT], &h5, w, s, 1);
        conv_in.push(h5);
        (out, Tape { conv_in, pre, temb_in, temb_pre, emb })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    fn backprop(&self, params: &[T], tape: &Tape<T>, d_out: &[T], grad: &mut [T]) {
        let w = self.config.width;
        let s = PATCH_DIM;
        let lay = &self.layers;
        let chans = block_channels(w);
        let mut d_proj: Vec<Vec<T>> = vec![Vec::new(); N_BLOCKS];

        // (layer, block index, c_in, s_in, stride) in forward order.
        let convs = [
            (L_IN, 0, 1, s, 1),
            (L_D1, 1, w, s, 2),
            (L_D2, 2, 2 * w, s / 2, 2),
            (L_MID, 3, 4 * w, s / 4, 1),
            (L_U2, 4, 6 * w, s / 2, 1),
            (L_U1, 5, 3 * w, s, 1),
        ];
        let mut d_h = conv3d_backward(params, &lay[L_OUT], &tape.conv_in[6], w, s, 1, d_out, grad, true)
            .expect("input gradient requested");
        // Gradients arriving at h0 and h1 through the skip concatenations.
        let mut d_skip0: Vec<T> = Vec::new();
        let mut d_skip1: Vec<T> = Vec::new();
        for &(layer, k, c_in, s_in, stride) in convs.iter().rev() {
            match k {
                1 => add_into(&mut d_h, &d_skip1),
                0 => add_into(&mut d_h, &d_skip0),
                _ => {}
            }
            let a = &tape.pre[k];
            let d_a: Vec<T> = d_h.iter().zip(a).map(|(&g, &v)| g * silu_grad(v)).collect();
            let n = d_a.len() / chans[k];
            d_proj[k] = d_a.chunks(n).map(|c| c.iter().fold(T::zero(), |acc, &v| acc + v)).collect();
            let d_in = conv3d_backward(params, &lay[layer], &tape.conv_in[k], c_in, s_in, stride, &d_a, grad, k > 0);
            let Some(d_in) = d_in else { break };
            d_h = match k {
                5 => {
                    let split = 2 * w * s * s * s;
                    d_skip0 = d_in[split..].to_vec();
                    upsample_backward(&d_in[..split], 2 * w, s / 2)
                }
                4 => {
                    let s2 = s / 2;
                    let split = 4 * w * s2 * s2 * s2;
                    d_skip1 = d_in[split..].to_vec();
                    upsample_backward(&d_in[..split], 4 * w, s / 4)
                }
                _ => d_in,
            };
        }
        let mut d_emb = vec![T::zero(); self.config.time_dim];
        for k in 0..N_BLOCKS {
            dense_backward(params, &lay[L_PROJ + k], &tape.emb, &d_proj[k], grad, Some(&mut d_emb));
        }
        let d_pre: Vec<T> = d_emb.iter().zip(&tape.temb_pre).map(|(&g, &v)| g * silu_grad(v)).collect();
        dense_backward(params, &lay[L_TEMB], &tape.temb_in, &d_pre, grad, None);
    }

    /// Mean squared noise-prediction error over the batch and its gradient.
    fn loss_grad(&self, params: &[T], batch: &[(Vec<T>, usize, Vec<T>)], grad: &mut [T]) -> f64 {
        let norm = (batch.len() * PATCH_VOXELS) as f64;
        let mut loss = 0.0;
        for (x_t, t, eps) in batch {
            let (out, tape) = self.run(params, x_t, *t);
            let mut d_out = vec![T::zero(); out.len()];
            for i in 0..out.len() {
                let e = out[i] - eps[i];
                loss += e.f64() * e.f64();
                d_out[i] = T::of(2.0 * e.f64() / norm);
            }
            self.backprop(params, &tape, &d_out, grad);
        }
        loss / norm
    }
}

fn check_input<T>(x: &[T]) -> Result<()> {
    if x.len() != PATCH_VOXELS {
        return Err(Error::Shape(format!("denoiser expects {PATCH_VOXELS} voxels, got {}", x.len())));
    }
    Ok(())
}

fn add_into<T: Real>(a: &mut [T], b: &[T]) {
    if b.is_empty() {
        return;
    }
    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
}

fn dense<T: Real>(params: &[T], l: &Linear, x: &[T]) -> Vec<T> {
    let w = &params[l.w..l.w + l.weight_len()];
    (0..l.d_out)
        .map(|o| {
            let row = &w[o * l.d_in..(o + 1) * l.d_in];
            row.iter().zip(x).fold(params[l.b + o], |acc, (&a, &b)| acc + a * b)
        })
        .collect()
}

fn dense_backward<T: Real>(params: &[T], l: &Linear, x: &[T], d_y: &[T], grad: &mut [T], d_x: Option<&mut Vec<T>>) {
    for o in 0..l.d_out {
        grad[l.b + o] += d_y[o];
        let g = &mut grad[l.w + o * l.d_in..l.w + (o + 1) * l.d_in];
        g.iter_mut().zip(x).for_each(|(gw, &xi)| *gw += d_y[o] * xi);
    }
    if let Some(d_x) = d_x {
        let w = &params[l.w..l.w + l.weight_len()];
        for o in 0..l.d_out {
            let row = &w[o * l.d_in..(o + 1) * l.d_in];
            d_x.iter_mut().zip(row).for_each(|(d, &wv)| *d += d_y[o] * wv);
        }
    }
}

fn conv3d<T: Real>(params: &[T], l: &Linear, x: &[T], c_in: usize, s: usize, stride: usize) -> Vec<T> {
    let cols = im2col(x, c_in, s, stride);
    let so = s / stride;
    let n = so * so * so;
    let w = ArrayView2::from_shape((l.d_out, l.d_in), &params[l.w..l.w + l.weight_len()]).expect("weight shape");
    let c = ArrayView2::from_shape((l.d_in, n), &cols).expect("cols shape");
    let mut out = vec![T::zero(); l.d_out * n];
    for (o, chunk) in out.chunks_mut(n).enumerate() {
        chunk.iter_mut().for_each(|v| *v = params[l.b + o]);
    }
    let mut ov = ArrayViewMut2::from_shape((l.d_out, n), &mut out).expect("out shape");
    general_mat_mul(T::one(), &w, &c, T::one(), &mut ov);
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward<T: Real>(
    params: &[T],
    l: &Linear,
    x: &[T],
    c_in: usize,
    s: usize,
    stride: usize,
    d_out: &[T],
    grad: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let cols = im2col(x, c_in, s, stride);
    let so = s / stride;
    let n = so * so * so;
    let c = ArrayView2::from_shape((l.d_in, n), &cols).expect("cols shape");
    let d = ArrayView2::from_shape((l.d_out, n), d_out).expect("grad shape");
    for (o, row) in d.outer_iter().enumerate() {
        grad[l.b + o] += row.iter().fold(T::zero(), |a, &v| a + v);
    }
    {
        let (_, rest) = grad.split_at_mut(l.w);
        let mut gw = ArrayViewMut2::from_shape((l.d_out, l.d_in), &mut rest[..l.weight_len()]).expect("weight shape");
        general_mat_mul(T::one(), &d, &c.t(), T::one(), &mut gw);
    }
    if !want_input {
        return None;
    }
    let w = ArrayView2::from_shape((l.d_out, l.d_in), &params[l.w..l.w + l.weight_len()]).expect("weight shape");
    let mut d_cols = vec![T::zero(); l.d_in * n];
    let mut dc = ArrayViewMut2::from_shape((l.d_in, n), &mut d_cols).expect("cols shape");
    general_mat_mul(T::one(), &w.t(), &d, T::zero(), &mut dc);
    Some(col2im(&d_cols, c_in, s, stride))
}

impl NoisePredictor for DenoiserState<f32> {
    fn predict_noise(&self, x_t: &[f32], t: usize) -> Result<Vec<f32>> {
        self.forward(x_t, t)
    }
}

/// Low-rank factors for every weight of a denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Real = f32> {
    pub rank: usize,
    pub delta: f64,
    /// Per layer, `d_out x rank`, row-major.
    pub a: Vec<Vec<T>>,
    /// Per layer, `rank x d_in`, row-major.
    pub b: Vec<Vec<T>>,
    /// Hash of the base weights the adapter was trained against.
    pub base_hash: String,
}

/// A frozen base plus trainable adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedDenoiser<T: Real = f32> {
    pub base: DenoiserState<T>,
    pub adapter: LoraAdapter<T>,
}

impl<T: Real> AdaptedDenoiser<T> {
    pub fn new(base: DenoiserState<T>, rank: usize, delta: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::validation("adapter rank must be >= 1"));
        }
        let mut r = rng::stream(seed, "lora-init", &[]);
        let scale = 1.0 / (rank as f64).sqrt();
        let a = base
            .layers
            .iter()
            .map(|l| (0..l.d_out * rank).map(|_| T::of(scale * r.sample::<f64, _>(StandardNormal))).collect())
            .collect();
        let b = base.layers.iter().map(|l| vec![T::zero(); rank * l.d_in]).collect();
        let base_hash = base.param_hash();
        Ok(AdaptedDenoiser { base, adapter: LoraAdapter { rank, delta, a, b, base_hash } })
    }

    /// Base parameters with `δ·A·B` added to every weight.
    pub fn effective_params(&self) -> Vec<T> {
        let mut p = self.base.params.clone();
        if self.adapter.delta == 0.0 {
            return p;
        }
        let delta = T::of(self.adapter.delta);
        let r = self.adapter.rank;
        for (k, l) in self.base.layers.iter().enumerate() {
            let a = ArrayView2::from_shape((l.d_out, r), &self.adapter.a[k]).expect("A shape");
            let b = ArrayView2::from_shape((r, l.d_in), &self.adapter.b[k]).expect("B shape");
            let ab = a.dot(&b);
            for (dst, &v) in p[l.w..l.w + l.weight_len()].iter_mut().zip(ab.iter()) {
                let u = delta * v;
                if u != T::zero() {
                    *dst += u;
                }
            }
        }
        p
    }

    pub fn forward(&self, x: &[T], t: usize) -> Result<Vec<T>> {
        check_input(x)?;
        Ok(self.base.run(&self.effective_params(), x, t).0)
    }

    pub fn n_adapter_params(&self) -> usize {
        self.adapter.a.iter().chain(&self.adapter.b).map(Vec::len).sum()
    }

    fn flat_adapter(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_adapter_params());
        for k in 0..self.adapter.a.len() {
            v.extend_from_slice(&self.adapter.a[k]);
            v.extend_from_slice(&self.adapter.b[k]);
        }
        v
    }

    fn set_flat_adapter(&mut self, flat: &[T]) {
        let mut off = 0;
        for k in 0..self.adapter.a.len() {
            let na = self.adapter.a[k].len();
            self.adapter.a[k].copy_from_slice(&flat[off..off + na]);
            off += na;
            let nb = self.adapter.b[k].len();
            self.adapter.b[k].copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    /// Maps a gradient w.r.t. effective weights onto the adapter factors:
    /// `dA = δ·dW·Bᵀ`, `dB = δ·Aᵀ·dW`.
    fn adapter_grad(&self, d_eff: &[T]) -> Vec<T> {
        let r = self.adapter.rank;
        let delta = T::of(self.adapter.delta);
        let mut out = Vec::with_capacity(self.n_adapter_params());
        for (k, l) in self.base.layers.iter().enumerate() {
            let dw = ArrayView2::from_shape((l.d_out, l.d_in), &d_eff[l.w..l.w + l.weight_len()]).expect("dW shape");
            let a = ArrayView2::from_shape((l.d_out, r), &self.adapter.a[k]).expect("A shape");
            let b = ArrayView2::from_shape((r, l.d_in), &self.adapter.b[k]).expect("B shape");
            let da = dw.dot(&b.t()) * delta;
            let db = a.t().dot(&dw) * delta;
            out.extend(da.iter().copied());
            out.extend(db.iter().copied());
        }
        out
    }
}

impl NoisePredictor for AdaptedDenoiser<f32> {
    fn predict_noise(&self, x_t: &[f32], t: usize) -> Result<Vec<f32>> {
        self.forward(x_t, t)
    }
}

/// Hyperparameters for base training and adapter fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorTrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig { batch: 4, lr: 1e-3, seed: 0 }
    }
}

/// Draws a training batch: stratified steps in `1..=T`, fresh noise.
fn make_batch<T: Real>(
    data: &[VoxelPatch],
    schedule: &NoiseSchedule,
    cfg: &PriorTrainConfig,
    purpose: &str,
    step: usize,
) -> Result<Vec<(Vec<T>, usize, Vec<T>)>> {
    let mut r = rng::stream(cfg.seed, purpose, &[step as u64]);
    let n_t = schedule.steps();
    (0..cfg.batch)
        .map(|i| {
            let x0 = &data[r.random_range(0..data.len())];
            let u: f64 = r.random();
            let t = 1 + (((i as f64 + u) / cfg.batch as f64) * n_t as f64).floor().min((n_t - 1) as f64) as usize;
            let noise = standard_normal_grid(&mut r);
            let x_t = diffuse_raw(&x0.grid, t, schedule, &noise.0)?;
            Ok((
                x_t.iter().map(|&v| T::of(v as f64)).collect(),
                t,
                noise.0.iter().map(|&v| T::of(v as f64)).collect(),
            ))
        })
        .collect()
}

fn check_data(data: &[VoxelPatch], cfg: &PriorTrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::validation("prior training needs at least one patch"));
    }
    if cfg.batch == 0 {
        return Err(Error::validation("prior batch must be >= 1"));
    }
    for p in data {
        p.validate()?;
    }
    Ok(())
}

/// Trains a fresh denoiser on `data`; returns it with the per-step losses.
pub fn train_base(
    data: &[VoxelPatch],
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    steps: usize,
    cfg: &PriorTrainConfig,
) -> Result<(DenoiserState<f32>, Vec<f64>)> {
    check_data(data, cfg)?;
    let mut state = DenoiserState::<f32>::new(config, cfg.seed)?;
    let mut opt = Optimizer::<f32>::adam(state.n_params());
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = make_batch::<f32>(data, schedule, cfg, "prior-train", step)?;
        let mut grad = vec![0.0f32; state.n_params()];
        let loss = state.loss_grad(&state.params, &batch, &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("denoiser loss {loss}") });
        }
        opt.update(&mut state.params, &grad, cfg.lr);
        log::debug!("prior step {step} loss {loss:.6}");
        losses.push(loss);
    }
    Ok((state, losses))
}

/// Fine-tunes rank-`rank` adapters on `data` with the base frozen.
pub fn finetune_lora(
    base: &DenoiserState<f32>,
    data: &[VoxelPatch],
    schedule: &NoiseSchedule,
    steps: usize,
    rank: usize,
    delta: f64,
    cfg: &PriorTrainConfig,
) -> Result<(AdaptedDenoiser<f32>, Vec<f64>)> {
    check_data(data, cfg)?;
    let mut model = AdaptedDenoiser::new(base.clone(), rank, delta, cfg.seed)?;
    let mut flat = model.flat_adapter();
    let mut opt = Optimizer::<f32>::adam(flat.len());
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = make_batch::<f32>(data, schedule, cfg, "prior-finetune", step)?;
        let eff = model.effective_params();
        let mut d_eff = vec![0.0f32; eff.len()];
        let loss = model.base.loss_grad(&eff, &batch, &mut d_eff);
        let grad = model.adapter_grad(&d_eff);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("adapter loss {loss}") });
        }
        opt.update(&mut flat, &grad, cfg.lr);
        model.set_flat_adapter(&flat);
        log::debug!("finetune step {step} loss {loss:.6}");
        losses.push(loss);
    }
    Ok((model, losses))
}

/// Mean noise-prediction error over `data` at fixed, seeded steps and noise.
pub fn denoising_loss(model: &dyn NoisePredictor, data: &[VoxelPatch], schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, p) in data.iter().enumerate() {
        let mut r = rng::stream(seed, "heldout", &[i as u64]);
        for t in [schedule.steps() / 10, schedule.steps() / 4, schedule.steps() / 2].map(|t| t.max(1)) {
            let noise = standard_normal_grid(&mut r);
            let x_t = diffuse_raw(&p.grid, t, schedule, &noise.0)?;
            let pred = model.predict_noise(&x_t, t)?;
            total += pred.iter().zip(&noise.0).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
            count += PATCH_VOXELS;
        }
    }
    Ok(total / count as f64)
}

/// Gradient of `Σ out·weights` w.r.t. the parameters; used by the gradient checks.
pub fn denoiser_vjp<T: Real>(state: &DenoiserState<T>, x: &[T], t: usize, weights: &[T]) -> Vec<T> {
    let (_, tape) = state.run(&state.params, x, t);
    let mut grad = vec![T::zero(); state.n_params()];
    state.backprop(&state.params, &tape, weights, &mut grad);
    grad
}

/// Gradient of `Σ out·weights` w.r.t. the flattened adapter factors.
pub fn adapter_vjp<T: Real>(model: &AdaptedDenoiser<T>, x: &[T], t: usize, weights: &[T]) -> Vec<T> {
    let eff = model.effective_params();
    let (_, tape) = model.base.run(&eff, x, t);
    let mut d_eff = vec![T::zero(); eff.len()];
    model.base.backprop(&eff, &tape, weights, &mut d_eff);
    model.adapter_grad(&d_eff)
}

impl<T: Real> AdaptedDenoiser<T> {
    /// Flattened factors in `(A_0, B_0, A_1, B_1, …)` order.
    pub fn adapter_params(&self) -> Vec<T> {
        self.flat_adapter()
    }

    pub fn set_adapter_params(&mut self, flat: &[T]) {
        self.set_flat_adapter(flat)
    }
}

impl<T: Real> Persist for DenoiserState<T> {
    fn write_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let p = format!("{prefix}prior/");
        ckpt.set_meta(format!("{p}width"), self.config.width);
        ckpt.set_meta(format!("{p}time_dim"), self.config.time_dim);
        ckpt.set_meta(format!("{p}dtype"), T::DTYPE);
        ckpt.set_meta(format!("{p}hash"), self.param_hash());
        for l in &self.layers {
            ckpt.put(format!("{p}{}/weight", l.name), vec![l.d_out, l.d_in], real_data(&self.params[l.w..l.b]));
            ckpt.put(format!("{p}{}/bias", l.name), vec![l.d_out], real_data(&self.params[l.b..l.b + l.d_out]));
        }
    }

    fn read_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let p = format!("{prefix}prior/");
        let config = DenoiserConfig {
            width: ckpt.meta_parse(&format!("{p}width"))?,
            time_dim: ckpt.meta_parse(&format!("{p}time_dim"))?,
        };
        config.validate()?;
        let (layers, n) = layout(&config);
        let mut params = vec![T::zero(); n];
        for l in &layers {
            for (name, lo, hi, shape) in [
                ("weight", l.w, l.b, vec![l.d_out, l.d_in]),
                ("bias", l.b, l.b + l.d_out, vec![l.d_out]),
            ] {
                let key = format!("{p}{}/{name}", l.name);
                let arr = ckpt.get(&key)?;
                if arr.shape != shape {
                    return Err(Error::Shape(format!("{key}: {:?} vs {:?}", arr.shape, shape)));
                }
                params[lo..hi].copy_from_slice(&real_vec::<T>(arr)?);
            }
        }
        Ok(DenoiserState { config, layers, params })
    }
}

impl<T: Real> LoraAdapter<T> {
    pub fn write_into(&self, ckpt: &mut Checkpoint, layers: &[Linear], prefix: &str) {
        let p = format!("{prefix}prior/adapter/");
        ckpt.set_meta(format!("{p}rank"), self.rank);
        ckpt.set_meta(format!("{p}delta"), self.delta);
        ckpt.set_meta(format!("{p}base_hash"), &self.base_hash);
        for (k, l) in layers.iter().enumerate() {
            ckpt.put(format!("{p}{}/A", l.name), vec![l.d_out, self.rank], real_data(&self.a[k]));
            ckpt.put(format!("{p}{}/B", l.name), vec![self.rank, l.d_in], real_data(&self.b[k]));
        }
    }

    pub fn read_from(ckpt: &Checkpoint, layers: &[Linear], prefix: &str) -> Result<Self> {
        let p = format!("{prefix}prior/adapter/");
        let rank: usize = ckpt.meta_parse(&format!("{p}rank"))?;
        let delta: f64 = ckpt.meta_parse(&format!("{p}delta"))?;
        let base_hash = ckpt.meta(&format!("{p}base_hash"))?.to_string();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for l in layers {
            for (name, shape, dst) in [
                ("A", vec![l.d_out, rank], &mut a),
                ("B", vec![rank, l.d_in], &mut b),
            ] {
                let key = format!("{p}{}/{name}", l.name);
                let arr = ckpt.get(&key)?;
                if arr.shape != shape {
                    return Err(Error::Shape(format!("{key}: {:?} vs {:?}", arr.shape, shape)));
                }
                dst.push(real_vec::<T>(arr)?);
            }
        }
        Ok(LoraAdapter { rank, delta, a, b, base_hash })
    }
}

impl<T: Real> AdaptedDenoiser<T> {
    /// Adapter-only checkpoint: rank, δ, factors and the base hash.
    pub fn adapter_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.set_meta("prior/width", self.base.config.width);
        c.set_meta("prior/time_dim", self.base.config.time_dim);
        self.adapter.write_into(&mut c, &self.base.layers, "");
        c
    }

    /// Rejoins a base model with an adapter checkpoint, checking the base hash.
    pub fn from_parts(base: DenoiserState<T>, adapter_ckpt: &Checkpoint) -> Result<Self> {
        let adapter = LoraAdapter::read_from(adapter_ckpt, &base.layers, "")?;
        if adapter.base_hash != base.param_hash() {
            return Err(Error::validation("adapter was trained against different base weights"));
        }
        Ok(AdaptedDenoiser { base, adapter })
    }
}
