//! Differentiable ultrasound rendering along scan lines.
//!
//! Transmission follows the discrete attenuation/reflection product
//!
//! ```text
//! I[0] = I0
//! I[t] = I[t-1] · (1 - β[t-1]) · G[t-1] · exp(-α[t-1] · f · dt)
//! ```
//!
//! with the boundary mask `G = 1 - ρ_b` (expected mode) or `G = 1 - b`,
//! `b ~ Bernoulli(ρ_b)` (straight-through mode). A column of the B-mode image
//! is `E[t] = clamp(w_r · I[t] · β[t] · ρ_b[t] + w_s · I[t] · ρ_s[t] · φ[t])`,
//! optionally with the scatter term blurred by a Gaussian PSF over the frame.
//!
//! The standard emission/absorption alternative uses `σ = ρ_s`, `c = φ` and
//! the usual alpha-compositing quadrature.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::{FieldState, FieldTape, ParameterField, N_OUTPUTS};
use crate::geometry::frame_rays;
use crate::real::Real;
use crate::rng;
use crate::types::{GrayImage, ParameterSample, Point3, Pose, ProbeConfig, ScanRay};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplingMode {
    #[default]
    Expected,
    BernoulliStraightThrough,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected" => Ok(SamplingMode::Expected),
            "bernoulli" | "bernoulli_straight_through" => Ok(SamplingMode::BernoulliStraightThrough),
            _ => Err(Error::validation(format!("unknown sampling mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMode::Expected => "expected",
            SamplingMode::BernoulliStraightThrough => "bernoulli_straight_through",
        })
    }
}

/// Gaussian point-spread kernel applied to the scatter image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsfConfig {
    pub size: usize,
    pub sigma_axial: f64,
    pub sigma_lateral: f64,
}

impl PsfConfig {
    /// Normalised kernel, `size x size`, rows along depth.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.size / 2) as f64;
        let mut k: Vec<f64> = (0..self.size * self.size)
            .map(|i| {
                let dy = (i / self.size) as f64 - r;
                let dx = (i % self.size) as f64 - r;
                (-0.5 * (dy * dy / (self.sigma_axial * self.sigma_axial)
                    + dx * dx / (self.sigma_lateral * self.sigma_lateral)))
                    .exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub boundary_mode: SamplingMode,
    pub scatter_mode: SamplingMode,
    pub psf: Option<PsfConfig>,
    pub w_reflect: f64,
    pub w_scatter: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            boundary_mode: SamplingMode::Expected,
            scatter_mode: SamplingMode::Expected,
            psf: None,
            w_reflect: 0.5,
            w_scatter: 0.5,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_reflect >= 0.0 && self.w_scatter >= 0.0) {
            return Err(Error::validation("compose weights must be non-negative"));
        }
        if self.w_reflect + self.w_scatter > 1.0 + 1e-12 {
            return Err(Error::validation("compose weights must sum to at most 1"));
        }
        if let Some(p) = self.psf {
            if p.size % 2 == 0 || p.size == 0 {
                return Err(Error::validation("psf size must be odd"));
            }
            if !(p.sigma_axial > 0.0 && p.sigma_lateral > 0.0) {
                return Err(Error::validation("psf sigmas must be > 0"));
            }
        }
        Ok(())
    }

    pub fn is_stochastic(&self) -> bool {
        self.boundary_mode == SamplingMode::BernoulliStraightThrough
            || self.scatter_mode == SamplingMode::BernoulliStraightThrough
    }
}

/// Uniform draws used by the straight-through Bernoulli modes, one pair per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RayDraws {
    pub boundary: Vec<f64>,
    pub scatter: Vec<f64>,
}

impl RayDraws {
    /// Substream keyed by `(seed, frame_key, scanline)` so rays can be drawn
    /// in any order.
    pub fn for_ray(seed: u64, frame_key: u64, scanline: usize, len: usize) -> Self {
        use rand::Rng;
        let mut r = rng::stream(seed, "bernoulli", &[frame_key, scanline as u64]);
        let boundary = (0..len).map(|_| r.random::<f64>()).collect();
        let scatter = (0..len).map(|_| r.random::<f64>()).collect();
        RayDraws { boundary, scatter }
    }
}

/// Per-sample values of `ρ_b` and `ρ_s` after applying the sampling modes.
fn effective<T: Real>(
    samples: &[ParameterSample<T>],
    cfg: &RenderConfig,
    draws: Option<&RayDraws>,
) -> Result<(Vec<T>, Vec<T>)> {
    let need = cfg.is_stochastic();
    let draws = match (need, draws) {
        (true, None) => return Err(Error::validation("bernoulli sampling needs per-ray draws")),
        (true, Some(d)) if d.boundary.len() < samples.len() || d.scatter.len() < samples.len() => {
            return Err(Error::Shape("ray draws shorter than the sample list".into()))
        }
        (_, d) => d,
    };
    let pick = |mode: SamplingMode, p: T, u: Option<f64>| match mode {
        SamplingMode::Expected => p,
        SamplingMode::BernoulliStraightThrough => {
            if u.expect("draws checked") < p.f64() {
                T::one()
            } else {
                T::zero()
            }
        }
    };
    let gb = samples
        .iter()
        .enumerate()
        .map(|(i, s)| pick(cfg.boundary_mode, s.border_probability, draws.map(|d| d.boundary[i])))
        .collect();
    let gs = samples
        .iter()
        .enumerate()
        .map(|(i, s)| pick(cfg.scatter_mode, s.scattering_density, draws.map(|d| d.scatter[i])))
        .collect();
    Ok((gb, gs))
}

fn check_finite<T: Real>(samples: &[ParameterSample<T>]) -> Result<()> {
    match samples.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(Error::validation(format!("non-finite parameters at sample {i}"))),
        None => Ok(()),
    }
}

fn transmit_with<T: Real>(samples: &[ParameterSample<T>], gb: &[T], probe: &ProbeConfig) -> Vec<T> {
    let loss = T::of(probe.frequency * probe.dt());
    let mut out = Vec::with_capacity(samples.len());
    let mut i = T::of(probe.initial_intensity);
    for (s, &g) in samples.iter().zip(gb) {
        out.push(i);
        i = i * (T::one() - s.reflectance) * (T::one() - g) * (-s.attenuation * loss).exp();
    }
    out
}

/// Transmitted intensity at each sample (exclusive of the sample itself).
pub fn transmit<T: Real>(
    samples: &[ParameterSample<T>],
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    draws: Option<&RayDraws>,
) -> Result<Vec<T>> {
    if samples.is_empty() {
        return Err(Error::validation("transmit needs at least one sample"));
    }
    check_finite(samples)?;
    let (gb, _) = effective(samples, cfg, draws)?;
    Ok(transmit_with(samples, &gb, probe))
}

/// Weighted reflection and scatter terms before summation and clamping.
pub fn compose_terms<T: Real>(
    samples: &[ParameterSample<T>],
    intensity: &[T],
    cfg: &RenderConfig,
    draws: Option<&RayDraws>,
) -> Result<(Vec<T>, Vec<T>)> {
    if samples.len() != intensity.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} intensities",
            samples.len(),
            intensity.len()
        )));
    }
    check_finite(samples)?;
    let (gb, gs) = effective(samples, cfg, draws)?;
    Ok(terms_with(samples, intensity, &gb, &gs, cfg))
}

fn terms_with<T: Real>(
    samples: &[ParameterSample<T>],
    intensity: &[T],
    gb: &[T],
    gs: &[T],
    cfg: &RenderConfig,
) -> (Vec<T>, Vec<T>) {
    let (wr, ws) = (T::of(cfg.w_reflect), T::of(cfg.w_scatter));
    let reflect = samples
        .iter()
        .zip(intensity)
        .zip(gb)
        .map(|((s, &i), &b)| wr * i * s.reflectance * b)
        .collect();
    let scatter = samples
        .iter()
        .zip(intensity)
        .zip(gs)
        .map(|((s, &i), &g)| ws * i * g * s.scattering_intensity)
        .collect();
    (reflect, scatter)
}

#[inline]
fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// One B-mode column (no PSF; the PSF acts on whole frames).
pub fn compose_bmode<T: Real>(
    samples: &[ParameterSample<T>],
    intensity: &[T],
    cfg: &RenderConfig,
    draws: Option<&RayDraws>,
) -> Result<Vec<T>> {
    let (r, s) = compose_terms(samples, intensity, cfg, draws)?;
    Ok(r.iter().zip(&s).map(|(&a, &b)| clamp01(a + b)).collect())
}

/// Transmission and composition for one ray in a single call.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRender<T: Real> {
    pub intensity: Vec<T>,
    pub echo: Vec<T>,
    pub samples: Vec<ParameterSample<T>>,
}

pub fn render_ray<T: Real>(
    samples: Vec<ParameterSample<T>>,
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    draws: Option<&RayDraws>,
) -> Result<RayRender<T>> {
    let intensity = transmit(&samples, probe, cfg, draws)?;
    let echo = compose_bmode(&samples, &intensity, cfg, draws)?;
    Ok(RayRender { intensity, echo, samples })
}

/// Reverse pass through composition and transmission for one ray.
///
/// `d_reflect` / `d_scatter` are gradients w.r.t. the weighted terms
/// returned by [`compose_terms`]; `d_intensity` (optional) adds a direct
/// gradient on `I`. Returns `d loss / d [α, β, ρ_b, ρ_s, φ]` per sample,
/// treating sampled masks as straight-through.
#[allow(clippy::too_many_arguments)]
pub fn ray_backward<T: Real>(
    samples: &[ParameterSample<T>],
    intensity: &[T],
    gb: &[T],
    gs: &[T],
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    d_reflect: &[T],
    d_scatter: &[T],
    d_intensity: Option<&[T]>,
) -> Vec<[T; N_OUTPUTS]> {
    let n = samples.len();
    let (wr, ws) = (T::of(cfg.w_reflect), T::of(cfg.w_scatter));
    let loss = T::of(probe.frequency * probe.dt());
    let mut grads = vec![[T::zero(); N_OUTPUTS]; n];
    let mut g_i: Vec<T> = match d_intensity {
        Some(d) => d.to_vec(),
        None => vec![T::zero(); n],
    };
    for t in 0..n {
        let s = &samples[t];
        let (dr, ds, i) = (d_reflect[t], d_scatter[t], intensity[t]);
        g_i[t] += dr * wr * s.reflectance * gb[t] + ds * ws * gs[t] * s.scattering_intensity;
        grads[t][1] += dr * wr * i * gb[t];
        grads[t][2] += dr * wr * i * s.reflectance;
        grads[t][3] += ds * ws * i * s.scattering_intensity;
        grads[t][4] += ds * ws * i * gs[t];
    }
    for t in (1..n).rev() {
        let s = &samples[t - 1];
        let e = (-s.attenuation * loss).exp();
        let one_b = T::one() - s.reflectance;
        let one_g = T::one() - gb[t - 1];
        let k = one_b * one_g * e;
        let gk = g_i[t] * intensity[t - 1];
        grads[t - 1][0] -= gk * k * loss;
        grads[t - 1][1] -= gk * one_g * e;
        grads[t - 1][2] -= gk * one_b * e;
        let carry = g_i[t] * k;
        g_i[t - 1] += carry;
    }
    grads
}

/// Vector-Jacobian product of [`transmit`]: `d/d params of Σ_t w[t]·I[t]`.
pub fn transmit_vjp<T: Real>(
    samples: &[ParameterSample<T>],
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    draws: Option<&RayDraws>,
    weights: &[T],
) -> Result<Vec<[T; N_OUTPUTS]>> {
    let (gb, gs) = effective(samples, cfg, draws)?;
    let i = transmit_with(samples, &gb, probe);
    let zero = vec![T::zero(); samples.len()];
    Ok(ray_backward(samples, &i, &gb, &gs, probe, cfg, &zero, &zero, Some(weights)))
}

/// Vector-Jacobian product of `compose_bmode(transmit(samples))`.
pub fn bmode_vjp<T: Real>(
    samples: &[ParameterSample<T>],
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    draws: Option<&RayDraws>,
    weights: &[T],
) -> Result<Vec<[T; N_OUTPUTS]>> {
    let (gb, gs) = effective(samples, cfg, draws)?;
    let i = transmit_with(samples, &gb, probe);
    let (r, s) = terms_with(samples, &i, &gb, &gs, cfg);
    let g: Vec<T> = weights
        .iter()
        .zip(r.iter().zip(&s))
        .map(|(&w, (&a, &b))| if a + b <= T::one() { w } else { T::zero() })
        .collect();
    Ok(ray_backward(samples, &i, &gb, &gs, probe, cfg, &g, &g, None))
}

/// Depth-resolved standard rendering: `C[t] = T[t] · (1 - e^{-σ[t]dt}) / dt · c[t]`
/// with `T[t] = exp(-Σ_{n<t} σ[n] dt)`, `σ = ρ_s`, `c = φ`. Summing `C·dt`
/// gives the alpha-composited pixel value.
pub fn standard_column<T: Real>(samples: &[ParameterSample<T>], dt: f64) -> Result<Vec<T>> {
    check_finite(samples)?;
    let dt_t = T::of(dt);
    let mut acc = T::zero();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let sigma = s.scattering_density;
        let trans = (-acc).exp();
        let alpha = T::one() - (-sigma * dt_t).exp();
        out.push(trans * alpha / dt_t * s.scattering_intensity);
        acc += sigma * dt_t;
    }
    Ok(out)
}

/// `∫ T(t) σ c dt` by alpha compositing over the samples.
pub fn standard_pixel<T: Real>(samples: &[ParameterSample<T>], dt: f64) -> Result<T> {
    let col = standard_column(samples, dt)?;
    Ok(col.into_iter().fold(T::zero(), |a, v| a + v) * T::of(dt))
}

/// Reverse pass of [`standard_column`] for `loss = Σ_t d_col[t] · C[t]`.
pub fn standard_column_backward<T: Real>(
    samples: &[ParameterSample<T>],
    column: &[T],
    dt: f64,
    d_col: &[T],
) -> Vec<[T; N_OUTPUTS]> {
    let dt_t = T::of(dt);
    let n = samples.len();
    let mut grads = vec![[T::zero(); N_OUTPUTS]; n];
    // Σ_{t>n} d_col[t]·C[t], accumulated from the far end.
    let mut suffix = T::zero();
    let mut acc: Vec<T> = Vec::with_capacity(n);
    let mut a = T::zero();
    for s in samples {
        acc.push(a);
        a += s.scattering_density * dt_t;
    }
    for t in (0..n).rev() {
        let s = &samples[t];
        let trans = (-acc[t]).exp();
        let e = (-s.scattering_density * dt_t).exp();
        grads[t][3] = d_col[t] * trans * e * s.scattering_intensity - dt_t * suffix;
        grads[t][4] = d_col[t] * trans * (T::one() - e) / dt_t;
        suffix += d_col[t] * column[t];
    }
    grads
}

/// Standard rendering of one ray through any parameter field.
pub fn render_volume_standard<T: Real, F: ParameterField<T>>(field: &F, ray: &ScanRay) -> Result<T> {
    let pts: Vec<Point3> = ray.points().collect();
    let samples = field.sample_points(&pts)?;
    standard_pixel(&samples, ray.dt)
}

/// Which image formation model turns field samples into a column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderPath {
    Ultrasound,
    Standard,
}

/// One rendered column with the intermediates its reverse pass needs.
#[derive(Clone, Debug)]
pub struct RayForward<T: Real> {
    pub path: RenderPath,
    /// Clamped column values.
    pub echo: Vec<T>,
    pre: Vec<T>,
    samples: Vec<ParameterSample<T>>,
    intensity: Vec<T>,
    gb: Vec<T>,
    gs: Vec<T>,
    column: Vec<T>,
}

/// Renders one column without a PSF along either path.
pub fn ray_forward<T: Real>(
    samples: Vec<ParameterSample<T>>,
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    draws: Option<&RayDraws>,
    path: RenderPath,
) -> Result<RayForward<T>> {
    if samples.is_empty() {
        return Err(Error::validation("a ray needs at least one sample"));
    }
    check_finite(&samples)?;
    let mut out = RayForward {
        path,
        echo: Vec::new(),
        pre: Vec::new(),
        samples,
        intensity: Vec::new(),
        gb: Vec::new(),
        gs: Vec::new(),
        column: Vec::new(),
    };
    match path {
        RenderPath::Ultrasound => {
            let (gb, gs) = effective(&out.samples, cfg, draws)?;
            let i = transmit_with(&out.samples, &gb, probe);
            let (r, s) = terms_with(&out.samples, &i, &gb, &gs, cfg);
            out.pre = r.iter().zip(&s).map(|(&a, &b)| a + b).collect();
            (out.intensity, out.gb, out.gs) = (i, gb, gs);
        }
        RenderPath::Standard => {
            out.column = standard_column(&out.samples, probe.dt())?;
            out.pre = out.column.clone();
        }
    }
    out.echo = out.pre.iter().map(|&v| clamp01(v)).collect();
    Ok(out)
}

impl<T: Real> RayForward<T> {
    /// `d loss / d [α, β, ρ_b, ρ_s, φ]` per sample given `d loss / d echo`.
    pub fn backward(&self, probe: &ProbeConfig, cfg: &RenderConfig, d_echo: &[T]) -> Vec<[T; N_OUTPUTS]> {
        let g: Vec<T> = d_echo
            .iter()
            .zip(&self.pre)
            .map(|(&d, &p)| if p >= T::zero() && p <= T::one() { d } else { T::zero() })
            .collect();
        match self.path {
            RenderPath::Ultrasound => {
                ray_backward(&self.samples, &self.intensity, &self.gb, &self.gs, probe, cfg, &g, &g, None)
            }
            RenderPath::Standard => standard_column_backward(&self.samples, &self.column, probe.dt(), &g),
        }
    }
}

fn frame_points(rays: &[ScanRay]) -> Vec<Point3> {
    rays.iter().flat_map(|r| r.points()).collect()
}

/// Convolves a row-major `h x w` image with a centred kernel, zero padded.
pub fn convolve_same(img: &[f64], h: usize, w: usize, kernel: &[f64], ksize: usize) -> Vec<f64> {
    let r = (ksize / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                let yy = y + ky;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in -r..=r {
                    let xx = x + kx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let kv = kernel[((r - ky) * ksize as isize + (r - kx)) as usize];
                    acc += kv * img[yy as usize * w + xx as usize];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Forward pass over a whole frame, keeping what the reverse pass needs.
pub struct FrameForward<T: Real> {
    pub height: usize,
    pub width: usize,
    /// Clamped pixel values, row-major.
    pub pixels: Vec<T>,
    path: RenderPath,
    samples: Vec<Vec<ParameterSample<T>>>,
    intensity: Vec<Vec<T>>,
    gb: Vec<Vec<T>>,
    gs: Vec<Vec<T>>,
    /// Pre-clamp values, row-major.
    pre: Vec<T>,
    /// Unclamped standard columns (standard path only).
    columns: Vec<Vec<T>>,
    tape: Option<FieldTape<T>>,
}

impl<T: Real> FrameForward<T> {
    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|v| v.f64() as f32).collect(),
        }
    }
}

fn frame_forward_from_samples<T: Real>(
    flat: Vec<ParameterSample<T>>,
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    seed: u64,
    path: RenderPath,
    tape: Option<FieldTape<T>>,
) -> Result<FrameForward<T>> {
    cfg.validate()?;
    let (h, w) = (probe.n_samples, probe.n_scanlines);
    let mut samples = Vec::with_capacity(w);
    let mut intensity = Vec::with_capacity(w);
    let (mut gbs, mut gss) = (Vec::with_capacity(w), Vec::with_capacity(w));
    let mut reflect = vec![0.0f64; h * w];
    let mut scatter = vec![0.0f64; h * w];
    let mut columns = Vec::new();
    for (j, chunk) in flat.chunks(h).enumerate() {
        let col_samples = chunk.to_vec();
        check_finite(&col_samples)?;
        match path {
            RenderPath::Ultrasound => {
                let draws = cfg.is_stochastic().then(|| RayDraws::for_ray(seed, 0, j, h));
                let (gb, gs) = effective(&col_samples, cfg, draws.as_ref())?;
                let i = transmit_with(&col_samples, &gb, probe);
                let (r, s) = terms_with(&col_samples, &i, &gb, &gs, cfg);
                for t in 0..h {
                    reflect[t * w + j] = r[t].f64();
                    scatter[t * w + j] = s[t].f64();
                }
                intensity.push(i);
                gbs.push(gb);
                gss.push(gs);
            }
            RenderPath::Standard => {
                let c = standard_column(&col_samples, probe.dt())?;
                for t in 0..h {
                    scatter[t * w + j] = c[t].f64();
                }
                columns.push(c);
            }
        }
        samples.push(col_samples);
    }
    if let (Some(psf), RenderPath::Ultrasound) = (cfg.psf, path) {
        scatter = convolve_same(&scatter, h, w, &psf.kernel(), psf.size);
    }
    let pre: Vec<T> = reflect.iter().zip(&scatter).map(|(a, b)| T::of(a + b)).collect();
    let pixels = pre.iter().map(|&v| clamp01(v)).collect();
    Ok(FrameForward {
        height: h,
        width: w,
        pixels,
        path,
        samples,
        intensity,
        gb: gbs,
        gs: gss,
        pre,
        columns,
        tape,
    })
}

/// Renders one frame from any parameter field.
pub fn render_frame<T: Real, F: ParameterField<T>>(
    field: &F,
    pose: &Pose,
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<GrayImage> {
    render_frame_path(field, pose, probe, cfg, seed, RenderPath::Ultrasound)
}

pub fn render_frame_path<T: Real, F: ParameterField<T>>(
    field: &F,
    pose: &Pose,
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    seed: u64,
    path: RenderPath,
) -> Result<GrayImage> {
    probe.validate()?;
    pose.validate()?;
    let rays = frame_rays(probe, pose);
    let flat = field.sample_points(&frame_points(&rays))?;
    Ok(frame_forward_from_samples(flat, probe, cfg, seed, path, None)?.to_image())
}

/// Frame forward pass through a trainable field, recording a tape.
pub fn frame_forward<T: Real>(
    state: &FieldState<T>,
    pose: &Pose,
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    seed: u64,
    path: RenderPath,
) -> Result<FrameForward<T>> {
    let rays = frame_rays(probe, pose);
    let (out, tape) = state.forward(&frame_points(&rays))?;
    let flat = crate::field::rows_to_samples(&out);
    frame_forward_from_samples(flat, probe, cfg, seed, path, Some(tape))
}

/// Accumulates `d loss / d weights` for `loss = Σ d_pixels · pixels`.
pub fn frame_backward<T: Real>(
    state: &FieldState<T>,
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    fwd: &FrameForward<T>,
    d_pixels: &[T],
    grad: &mut [T],
) -> Result<()> {
    let (h, w) = (fwd.height, fwd.width);
    if d_pixels.len() != h * w {
        return Err(Error::Shape("pixel gradient does not match frame".into()));
    }
    let tape = fwd.tape.as_ref().ok_or_else(|| Error::validation("frame was rendered without a tape"))?;
    let g_pre: Vec<f64> = d_pixels
        .iter()
        .zip(&fwd.pre)
        .map(|(&g, &p)| if p <= T::one() && p >= T::zero() { g.f64() } else { 0.0 })
        .collect();
    let g_scatter = match (cfg.psf, fwd.path) {
        // The kernel is symmetric, so the adjoint is the same convolution.
        (Some(psf), RenderPath::Ultrasound) => convolve_same(&g_pre, h, w, &psf.kernel(), psf.size),
        _ => g_pre.clone(),
    };
    let mut d_out = Array2::<T>::zeros((h * w, N_OUTPUTS));
    for j in 0..w {
        let dr: Vec<T> = (0..h).map(|t| T::of(g_pre[t * w + j])).collect();
        let ds: Vec<T> = (0..h).map(|t| T::of(g_scatter[t * w + j])).collect();
        let grads = match fwd.path {
            RenderPath::Ultrasound => ray_backward(
                &fwd.samples[j],
                &fwd.intensity[j],
                &fwd.gb[j],
                &fwd.gs[j],
                probe,
                cfg,
                &dr,
                &ds,
                None,
            ),
            RenderPath::Standard => standard_column_backward(&fwd.samples[j], &fwd.columns[j], probe.dt(), &ds),
        };
        for (t, g) in grads.iter().enumerate() {
            for k in 0..N_OUTPUTS {
                d_out[[j * h + t, k]] = g[k];
            }
        }
    }
    state.backward(tape, &d_out, grad, false);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(n: usize, dt: f64) -> ProbeConfig {
        ProbeConfig::linear(1, n, dt * n as f64, 1.0)
    }

    fn sample(a: f64, b: f64, rb: f64, rs: f64, phi: f64) -> ParameterSample<f64> {
        ParameterSample::from_array([a, b, rb, rs, phi])
    }

    #[test]
    fn lossless_medium_keeps_intensity() {
        let s = vec![sample(0.0, 0.0, 0.0, 0.3, 0.2); 6];
        let i = transmit(&s, &probe(6, 0.1), &RenderConfig::default(), None).unwrap();
        assert!(i.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn total_reflector_blocks() {
        let mut s = vec![sample(0.0, 0.0, 0.0, 0.0, 0.0); 6];
        s[2].reflectance = 1.0;
        let i = transmit(&s, &probe(6, 0.1), &RenderConfig::default(), None).unwrap();
        assert_eq!(i, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_attenuation_step() {
        let s = vec![sample(1.0, 0.0, 0.0, 0.0, 0.0); 2];
        let i = transmit(&s, &probe(2, 1.0), &RenderConfig::default(), None).unwrap();
        assert!((i[1] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((i[1] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        let cfg = RenderConfig::default();
        assert!(transmit::<f64>(&[], &probe(1, 1.0), &cfg, None).is_err());
        let s = vec![sample(f64::NAN, 0.0, 0.0, 0.0, 0.0)];
        assert!(transmit(&s, &probe(1, 1.0), &cfg, None).is_err());
    }

    #[test]
    fn black_column_without_echo_sources() {
        let s = vec![sample(0.2, 0.0, 0.7, 0.0, 0.9); 5];
        let cfg = RenderConfig::default();
        let i = transmit(&s, &probe(5, 0.1), &cfg, None).unwrap();
        assert!(compose_bmode(&s, &i, &cfg, None).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reflection_only_weight() {
        let cfg = RenderConfig { w_scatter: 0.0, ..RenderConfig::default() };
        let s = vec![sample(0.0, 1.0, 1.0, 0.5, 0.5)];
        let e = compose_bmode(&s, &[1.0], &cfg, None).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scatter_is_linear_in_intensity() {
        let cfg = RenderConfig::default();
        let mut s = vec![sample(0.0, 0.2, 0.3, 0.4, 0.25)];
        let (_, a) = compose_terms(&s, &[0.8], &cfg, None).unwrap();
        s[0].scattering_intensity = 0.5;
        let (_, b) = compose_terms(&s, &[0.8], &cfg, None).unwrap();
        assert!((b[0] - 2.0 * a[0]).abs() < 1e-15);
    }

    #[test]
    fn compose_length_mismatch() {
        let s = vec![sample(0.0, 0.0, 0.0, 0.0, 0.0); 3];
        assert!(matches!(
            compose_bmode(&s, &[1.0, 1.0], &RenderConfig::default(), None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn standard_rendering_limits() {
        let empty = vec![sample(0.0, 0.0, 0.0, 0.0, 1.0); 10];
        assert_eq!(standard_pixel(&empty, 0.1).unwrap(), 0.0);
        let dense = vec![sample(0.0, 0.0, 0.0, 1e3, 1.0)];
        assert!((standard_pixel(&dense, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let s = 0.8;
        let n = 4000;
        let col = vec![sample(0.0, 0.0, 0.0, s, 1.0); n];
        let v = standard_pixel(&col, 1.0 / n as f64).unwrap();
        assert!((v - (1.0 - (-s).exp())).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut c = RenderConfig { w_reflect: 0.7, w_scatter: 0.4, ..Default::default() };
        assert!(c.validate().is_err());
        c.w_reflect = 0.5;
        c.w_scatter = 0.5;
        c.psf = Some(PsfConfig { size: 4, sigma_axial: 1.0, sigma_lateral: 1.0 });
        assert!(c.validate().is_err());
        c.psf = Some(PsfConfig { size: 5, sigma_axial: 1.0, sigma_lateral: 1.0 });
        c.validate().unwrap();
    }

    #[test]
    fn bernoulli_needs_draws() {
        let cfg = RenderConfig { boundary_mode: SamplingMode::BernoulliStraightThrough, ..Default::default() };
        let s = vec![sample(0.0, 0.2, 0.5, 0.1, 0.1); 4];
        assert!(transmit(&s, &probe(4, 0.1), &cfg, None).is_err());
        let d = RayDraws::for_ray(1, 0, 0, 4);
        let i = transmit(&s, &probe(4, 0.1), &cfg, Some(&d)).unwrap();
        assert!(i.iter().all(|v| *v >= 0.0));
    }
}
