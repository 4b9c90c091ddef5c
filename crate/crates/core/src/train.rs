//! Field optimisation: ray batches, photometric and guidance losses, the
//! training loop with checkpoints, and the ablation suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index;

use crate::checkpoint::{Checkpoint, Persist};
use crate::error::{Error, Result};
use crate::eval::{evaluate_field, MetricReport, MS_SSIM_WEIGHTS};
use crate::field::{rows_to_samples, FieldConfig, FieldState, N_OUTPUTS};
use crate::geometry::{ray_for_pixel, SceneTransform};
use crate::optim::{clip_global_norm, exp_decay, Optimizer};
use crate::phantom::{random_placement, Placement};
use crate::prior::{guidance_target, NoisePredictor, NoiseSchedule};
use crate::render::{ray_forward, RayDraws, RenderConfig, RenderPath};
use crate::rng;
use crate::types::{Point3, ScanRay, SweepDataset, VoxelPatch, PATCH_VOXELS};

/// Field output columns the guidance terms act on.
const COL_BORDER: usize = 2;
const COL_SCATTER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub border: f64,
    pub scatter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { border: 0.5, scatter: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub clip_norm: f64,
    /// Guidance fires on steps divisible by this.
    pub guidance_every: usize,
    pub guidance_patches: usize,
    /// Noising step for guidance targets; `None` means `T/10`.
    pub guidance_step: Option<usize>,
    pub patch_size_fraction: (f64, f64),
    pub weights: LossWeights,
    pub use_border_loss: bool,
    pub use_scatter_loss: bool,
    pub use_us_rendering: bool,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub field: FieldConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 512,
            lr_start: 5e-4,
            lr_end: 5e-5,
            clip_norm: 10.0,
            guidance_every: 10,
            guidance_patches: 4,
            guidance_step: None,
            patch_size_fraction: (0.1, 0.4),
            weights: LossWeights::default(),
            use_border_loss: true,
            use_scatter_loss: true,
            use_us_rendering: true,
            checkpoint_every: 0,
            seed: 0,
            field: FieldConfig::desk(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.render.validate()?;
        if self.iterations == 0 {
            return Err(Error::validation("iterations must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.guidance_every == 0 {
            return Err(Error::validation("guidance_every must be >= 1"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::validation("learning rates must be > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::validation("clip_norm must be > 0"));
        }
        if !(self.weights.border >= 0.0 && self.weights.scatter >= 0.0) {
            return Err(Error::validation("loss weights must be >= 0"));
        }
        let (lo, hi) = self.patch_size_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::validation("patch_size_fraction must be a sub-range of (0, 1]"));
        }
        if self.render.psf.is_some() {
            return Err(Error::validation("training renders independent rays; disable the psf"));
        }
        Ok(())
    }

    pub fn path(&self) -> RenderPath {
        if self.use_us_rendering {
            RenderPath::Ultrasound
        } else {
            RenderPath::Standard
        }
    }

    fn border_active(&self) -> bool {
        self.use_border_loss && self.weights.border > 0.0
    }

    fn scatter_active(&self) -> bool {
        self.use_scatter_loss && self.weights.scatter > 0.0
    }

    pub fn guidance_active(&self) -> bool {
        self.border_active() || self.scatter_active()
    }
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub photometric: f64,
    pub border: f64,
    pub scatter: f64,
    pub total: f64,
    pub lr: f64,
}

/// Weighted sum of the photometric and guidance terms.
pub fn total_loss(photometric: f64, border: f64, scatter: f64, weights: &LossWeights) -> f64 {
    photometric + weights.border * border + weights.scatter * scatter
}

/// Sum over rays of squared column differences, and its gradient w.r.t. the
/// rendered columns.
pub fn photometric_loss<T: crate::Real>(rendered: &[Vec<T>], targets: &[Vec<f32>]) -> Result<(f64, Vec<Vec<T>>)> {
    if rendered.len() != targets.len() {
        return Err(Error::Shape(format!("{} rendered rays for {} targets", rendered.len(), targets.len())));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, c) in rendered.iter().zip(targets) {
        if r.len() != c.len() {
            return Err(Error::Shape(format!("column of {} samples against {} pixels", r.len(), c.len())));
        }
        let mut g = Vec::with_capacity(r.len());
        for (&a, &b) in r.iter().zip(c) {
            let d = a.f64() - b as f64;
            loss += d * d;
            g.push(T::of(2.0 * d));
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// One supervised ray: which frame and scanline it came from, its geometry,
/// and the frame's pixel column.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub frame: usize,
    pub scanline: usize,
    pub ray: ScanRay,
    pub target: Vec<f32>,
}

/// Draws `batch_size` distinct (train frame, scanline) pairs, or every pair
/// when the batch is at least the number of training rays.
pub fn sample_ray_batch(dataset: &SweepDataset, batch_size: usize, seed: u64, step: usize) -> Result<Vec<RaySample>> {
    let train = &dataset.split.train;
    if train.is_empty() {
        return Err(Error::validation("train split is empty"));
    }
    let w = dataset.probe.n_scanlines;
    let total = train.len() * w;
    let n = batch_size.min(total);
    let mut r = rng::stream(seed, "rays", &[step as u64]);
    index::sample(&mut r, total, n)
        .into_iter()
        .map(|k| {
            let frame = train[k / w];
            let scanline = k % w;
            let f = &dataset.frames[frame];
            Ok(RaySample {
                frame,
                scanline,
                ray: ray_for_pixel(&dataset.probe, &f.pose, scanline, dataset.probe.n_samples)?,
                target: f.image.column(scanline),
            })
        })
        .collect()
}

/// Lateral bounding box of every training ray, with the skin at the lowest
/// probe position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweptRegion {
    pub lo: Point3,
    pub hi: Point3,
    pub skin_z: f64,
}

impl SweptRegion {
    pub fn of(dataset: &SweepDataset) -> Result<Self> {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        let mut skin_z = f64::INFINITY;
        for f in dataset.train_frames() {
            skin_z = skin_z.min(f.pose.translation().z);
            for j in 0..dataset.probe.n_scanlines {
                let ray = ray_for_pixel(&dataset.probe, &f.pose, j, dataset.probe.n_samples)?;
                for p in [ray.origin, ray.point_at(ray.len() - 1)] {
                    lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
                    hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
                }
            }
        }
        if !skin_z.is_finite() {
            return Err(Error::validation("train split is empty"));
        }
        Ok(SweptRegion { lo, hi, skin_z })
    }

    pub fn reference(&self) -> f64 {
        (self.hi.x - self.lo.x).min(self.hi.y - self.lo.y)
    }

    pub fn place(&self, seed: u64, step: usize, patch: usize, size_fraction: (f64, f64)) -> Result<Placement> {
        let mut r = rng::stream(seed, "guidance-placement", &[step as u64, patch as u64]);
        random_placement(&mut r, self.lo, self.hi, self.skin_z, self.reference(), size_fraction)
    }
}

/// A frozen noise predictor with its schedule.
#[derive(Clone, Copy)]
pub struct PriorRef<'a> {
    pub model: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
}

/// Which guidance channels to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channels {
    pub border: bool,
    pub scatter: bool,
}

/// Mean squared error between the field's border / scattering voxelisation
/// of `placement` and the prior's denoised targets. Inactive channels
/// return 0. When `grad` is given, `scale_b·d L_ρb + scale_s·d L_ρs` is
/// accumulated into it; targets are constants.
#[allow(clippy::too_many_arguments)]
pub fn guidance_loss_grad(
    state: &FieldState<f32>,
    placement: Placement,
    prior: PriorRef<'_>,
    t_g: usize,
    seed: u64,
    channels: Channels,
    scales: (f64, f64),
    grad: Option<&mut [f32]>,
) -> Result<(f64, f64)> {
    if !(placement.edge > 0.0 && placement.origin.is_finite()) {
        return Err(Error::validation("guidance placement must have a finite origin and positive edge"));
    }
    let lattice = VoxelPatch::lattice(placement.origin, placement.edge);
    let (out, tape) = state.forward(&lattice)?;
    let n = PATCH_VOXELS as f64;
    let mut d_out = Array2::<f32>::zeros((lattice.len(), N_OUTPUTS));
    let mut losses = [0.0; 2];
    for (k, (col, on, scale)) in
        [(COL_BORDER, channels.border, scales.0), (COL_SCATTER, channels.scatter, scales.1)].into_iter().enumerate()
    {
        if !on {
            continue;
        }
        let g: Vec<f32> = out.column(col).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let patch = VoxelPatch::new(g, placement.origin, placement.edge)?;
        let m = guidance_target(prior.model, &patch, k as u64, t_g, prior.schedule, seed)?;
        let mut l = 0.0;
        for (i, (&gv, &mv)) in patch.grid.iter().zip(&m.grid).enumerate() {
            let d = gv as f64 - mv as f64;
            l += d * d;
            d_out[[i, col]] = (scale * 2.0 * d / n) as f32;
        }
        losses[k] = l / n;
    }
    if let Some(grad) = grad {
        state.backward(&tape, &d_out, grad, false);
    }
    Ok((losses[0], losses[1]))
}

/// `(L_ρb, L_ρs)` for one placement, both channels evaluated.
pub fn guidance_loss(
    state: &FieldState<f32>,
    placement: Placement,
    prior: PriorRef<'_>,
    t_g: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let all = Channels { border: true, scatter: true };
    guidance_loss_grad(state, placement, prior, t_g, seed, all, (0.0, 0.0), None)
}

/// How many rays went through each rendering path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderCounters {
    pub ultrasound_rays: u64,
    pub standard_rays: u64,
}

/// Optimisation state of a field run.
pub struct Trainer<'a> {
    pub dataset: SweepDataset,
    pub config: TrainConfig,
    pub scene: SceneTransform,
    pub state: FieldState<f32>,
    pub optimizer: Optimizer<f32>,
    pub step: usize,
    pub history: Vec<LossReport>,
    pub counters: RenderCounters,
    prior: Option<PriorRef<'a>>,
    region: SweptRegion,
    t_g: usize,
}

impl<'a> Trainer<'a> {
    /// Normalises the dataset into the unit cube and initialises the field.
    pub fn new(dataset: &SweepDataset, prior: Option<PriorRef<'a>>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let scene = SceneTransform::fit(dataset);
        let state = FieldState::new(config.field, config.seed)?;
        Self::assemble(dataset, prior, config, scene, state)
    }

    fn assemble(
        dataset: &SweepDataset,
        prior: Option<PriorRef<'a>>,
        config: &TrainConfig,
        scene: SceneTransform,
        state: FieldState<f32>,
    ) -> Result<Self> {
        if dataset.split.train.is_empty() {
            return Err(Error::validation("train split is empty"));
        }
        if config.guidance_active() && prior.is_none() {
            return Err(Error::validation("guidance is enabled but no prior model was given"));
        }
        let dataset = scene.apply_dataset(dataset);
        let region = SweptRegion::of(&dataset)?;
        let t_g = match (config.guidance_step, prior) {
            (Some(t), Some(p)) => {
                p.schedule.check_step(t)?;
                t
            }
            (None, Some(p)) => p.schedule.steps() / 10,
            (_, None) => 0,
        };
        let n = state.n_params();
        Ok(Trainer {
            dataset,
            config: config.clone(),
            scene,
            state,
            optimizer: Optimizer::radam(n),
            step: 0,
            history: Vec::new(),
            counters: RenderCounters::default(),
            prior,
            region,
            t_g,
        })
    }

    pub fn region(&self) -> SweptRegion {
        self.region
    }

    pub fn guidance_step(&self) -> usize {
        self.t_g
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.iterations
    }

    /// Photometric loss and its gradient for one ray batch.
    fn photometric_step(&mut self, grad: &mut [f32]) -> Result<f64> {
        let cfg = &self.config;
        let probe = &self.dataset.probe;
        let h = probe.n_samples;
        let batch = sample_ray_batch(&self.dataset, cfg.batch_size, cfg.seed, self.step)?;
        let points: Vec<Point3> = batch.iter().flat_map(|r| r.ray.points()).collect();
        let (out, tape) = self.state.forward(&points)?;
        let samples = rows_to_samples(&out);
        let path = cfg.path();
        let draw_seed = rng::derive_seed(cfg.seed, "train-draws", &[self.step as u64]);
        let mut renders = Vec::with_capacity(batch.len());
        for (r, chunk) in batch.iter().zip(samples.chunks(h)) {
            let draws = (cfg.render.is_stochastic() && path == RenderPath::Ultrasound)
                .then(|| RayDraws::for_ray(draw_seed, r.frame as u64, r.scanline, h));
            renders.push(ray_forward(chunk.to_vec(), probe, &cfg.render, draws.as_ref(), path)?);
        }
        match path {
            RenderPath::Ultrasound => self.counters.ultrasound_rays += batch.len() as u64,
            RenderPath::Standard => self.counters.standard_rays += batch.len() as u64,
        }
        let echoes: Vec<Vec<f32>> = renders.iter().map(|r| r.echo.clone()).collect();
        let targets: Vec<Vec<f32>> = batch.iter().map(|r| r.target.clone()).collect();
        let (sum, d_echo) = photometric_loss(&echoes, &targets)?;
        let inv_b = 1.0 / batch.len() as f32;
        let mut d_out = Array2::<f32>::zeros((points.len(), N_OUTPUTS));
        for (k, (rf, d)) in renders.iter().zip(&d_echo).enumerate() {
            let d: Vec<f32> = d.iter().map(|v| v * inv_b).collect();
            for (t, g) in rf.backward(probe, &cfg.render, &d).iter().enumerate() {
                for c in 0..N_OUTPUTS {
                    d_out[[k * h + t, c]] = g[c];
                }
            }
        }
        self.state.backward(&tape, &d_out, grad, false);
        Ok(sum / batch.len() as f64)
    }

    /// Guidance losses averaged over this step's patches.
    fn guidance_step_losses(&self, grad: &mut [f32]) -> Result<(f64, f64)> {
        let cfg = &self.config;
        let prior = self.prior.expect("checked at construction");
        let channels = Channels { border: cfg.border_active(), scatter: cfg.scatter_active() };
        let np = cfg.guidance_patches.max(1) as f64;
        let scales = (cfg.weights.border / np, cfg.weights.scatter / np);
        let (mut lb, mut ls) = (0.0, 0.0);
        for p in 0..cfg.guidance_patches {
            let placement = self.region.place(cfg.seed, self.step, p, cfg.patch_size_fraction)?;
            let seed = rng::derive_seed(cfg.seed, "guidance-noise", &[self.step as u64, p as u64]);
            let (b, s) = guidance_loss_grad(&self.state, placement, prior, self.t_g, seed, channels, scales, Some(grad))?;
            lb += b / np;
            ls += s / np;
        }
        Ok((lb, ls))
    }

    /// One optimisation step.
    pub fn step_once(&mut self) -> Result<LossReport> {
        let mut grad = self.state.zero_grad();
        let photometric = self.photometric_step(&mut grad)?;
        let (border, scatter) = if self.config.guidance_active()
            && self.config.guidance_patches > 0
            && self.step.is_multiple_of(self.config.guidance_every)
        {
            self.guidance_step_losses(&mut grad)?
        } else {
            (0.0, 0.0)
        };
        let total = total_loss(photometric, border, scatter, &self.config.weights);
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("photometric {photometric}, border {border}, scatter {scatter}"),
            });
        }
        clip_global_norm(&mut grad, self.config.clip_norm);
        let lr = exp_decay(self.config.lr_start, self.config.lr_end, self.step, self.config.iterations);
        self.optimizer.update(self.state.params_mut(), &grad, lr);
        let report = LossReport { step: self.step, photometric, border, scatter, total, lr };
        log::debug!(
            "step {} photometric {:.6} border {:.6} scatter {:.6} lr {:.2e}",
            self.step,
            photometric,
            border,
            scatter,
            lr
        );
        self.history.push(report);
        self.step += 1;
        Ok(report)
    }

    /// Runs to `config.iterations`, writing `checkpoint_dir/step_{n:06}.ckpt`
    /// at the configured interval and `final.ckpt` at the end.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        while !self.is_done() {
            self.step_once()?;
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) && !self.is_done() {
                    written.push(self.checkpoint().save(dir.join(format!("step_{:06}.ckpt", self.step)))?);
                }
            }
            if self.step.is_multiple_of(100) {
                log::info!("step {}/{}", self.step, self.config.iterations);
            }
        }
        if let Some(dir) = checkpoint_dir {
            written.push(self.checkpoint().save(dir.join("final.ckpt"))?);
        }
        Ok(written)
    }

    /// Field, optimiser, history and scene transform.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.state.write_into(&mut c, "");
        self.optimizer.write_into(&mut c, "optim/");
        c.set_meta("train/step", self.step);
        c.set_meta("train/seed", self.config.seed);
        c.set_meta("train/path", if self.config.use_us_rendering { "ultrasound" } else { "standard" });
        c.set_meta("train/counters", format!("{} {}", self.counters.ultrasound_rays, self.counters.standard_rays));
        write_scene(&mut c, &self.scene);
        let flat: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| [r.step as f64, r.photometric, r.border, r.scatter, r.total, r.lr])
            .collect();
        c.put_f64("train/history", vec![self.history.len(), 6], flat);
        c
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        dataset: &SweepDataset,
        prior: Option<PriorRef<'a>>,
        config: &TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        config.validate()?;
        let state = FieldState::<f32>::read_from(ckpt, "")?;
        if state.config() != &config.field {
            return Err(Error::validation("checkpoint field architecture differs from the config"));
        }
        let seed: u64 = ckpt.meta_parse("train/seed")?;
        if seed != config.seed {
            return Err(Error::validation(format!("checkpoint was trained with seed {seed}, config has {}", config.seed)));
        }
        let scene = read_scene(ckpt)?;
        let mut t = Self::assemble(dataset, prior, config, scene, state)?;
        t.optimizer = Optimizer::read_from(ckpt, "optim/")?;
        if t.optimizer.m.len() != t.state.n_params() {
            return Err(Error::validation("optimizer state does not match the field"));
        }
        t.step = ckpt.meta_parse("train/step")?;
        let counters: Vec<u64> = ckpt
            .meta("train/counters")?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::validation("malformed render counters")))
            .collect::<Result<_>>()?;
        if counters.len() == 2 {
            t.counters = RenderCounters { ultrasound_rays: counters[0], standard_rays: counters[1] };
        }
        let h = ckpt.get_f64("train/history")?;
        t.history = h
            .chunks(6)
            .map(|r| LossReport {
                step: r[0] as usize,
                photometric: r[1],
                border: r[2],
                scatter: r[3],
                total: r[4],
                lr: r[5],
            })
            .collect();
        if t.history.len() != t.step {
            return Err(Error::validation("checkpoint history length disagrees with its step"));
        }
        Ok(t)
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            path: self.config.path(),
            scene: self.scene,
            state: self.state,
            history: self.history,
            counters: self.counters,
        }
    }
}

pub fn write_scene(c: &mut Checkpoint, scene: &SceneTransform) {
    c.set_meta("scene/scale", scene.scale);
    c.set_meta("scene/offset", format!("{} {} {}", scene.offset.x, scene.offset.y, scene.offset.z));
}

pub fn read_scene(c: &Checkpoint) -> Result<SceneTransform> {
    let scale: f64 = c.meta_parse("scene/scale")?;
    let o: Vec<f64> = c
        .meta("scene/offset")?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::validation("malformed scene offset")))
        .collect::<Result<_>>()?;
    if o.len() != 3 {
        return Err(Error::validation("malformed scene offset"));
    }
    Ok(SceneTransform { scale, offset: Point3::new(o[0], o[1], o[2]) })
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: FieldState<f32>,
    pub history: Vec<LossReport>,
    pub counters: RenderCounters,
    pub path: RenderPath,
    pub scene: SceneTransform,
}

impl TrainOutcome {
    /// Scores the test split with this run's rendering path.
    pub fn evaluate(&self, dataset: &SweepDataset, render: &RenderConfig, seed: u64) -> Result<MetricReport> {
        evaluate_field(&self.state, &self.scene.apply_dataset(dataset), render, self.path, seed, MS_SSIM_WEIGHTS.len(), None)
    }
}

/// Trains a field from scratch.
pub fn train_field(dataset: &SweepDataset, prior: Option<PriorRef<'_>>, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(dataset, prior, config)?;
    t.run(None)?;
    Ok(t.into_outcome())
}

pub const LOSS_CSV_HEADER: &str = "step,photometric,loss_border,loss_scatter,total,lr";

pub fn loss_csv(history: &[LossReport]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.photometric, r.border, r.scatter, r.total, r.lr);
    }
    s
}

/// The four runs of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoBorderLoss,
    NoScatterLoss,
    NoUltrasoundRendering,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Full, Variant::NoBorderLoss, Variant::NoScatterLoss, Variant::NoUltrasoundRendering];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBorderLoss => "w/o L_rho_b",
            Variant::NoScatterLoss => "w/o L_rho_s",
            Variant::NoUltrasoundRendering => "w/o I(t)",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoBorderLoss => c.use_border_loss = false,
            Variant::NoScatterLoss => c.use_scatter_loss = false,
            Variant::NoUltrasoundRendering => c.use_us_rendering = false,
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per-seed test reports.
    pub reports: Vec<MetricReport>,
    pub counters: Vec<RenderCounters>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&MetricReport) -> f64) -> f64 {
        self.reports.iter().map(f).sum::<f64>() / self.reports.len().max(1) as f64
    }

    pub fn psnr(&self) -> f64 {
        self.mean(|r| r.psnr.mean)
    }

    pub fn ssim(&self) -> f64 {
        self.mean(|r| r.ssim.mean)
    }

    pub fn ms_ssim(&self) -> f64 {
        self.mean(|r| r.ms_ssim.mean)
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == v).expect("all variants present")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14} {:>9} {:>8} {:>8}\n", "variant", "PSNR", "SSIM", "MS-SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<14} {:>9.3} {:>8.4} {:>8.4}", r.variant.label(), r.psnr(), r.ssim(), r.ms_ssim());
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,psnr,ssim,ms_ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.variant.label(), r.psnr(), r.ssim(), r.ms_ssim());
        }
        s
    }
}

/// Trains the four variants for every seed and scores each on the test split.
pub fn ablation_suite(
    dataset: &SweepDataset,
    prior: Option<PriorRef<'_>>,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::validation("ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut reports = Vec::new();
        let mut counters = Vec::new();
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            log::info!("ablation {} seed {seed}", v.label());
            let out = train_field(dataset, prior, &cfg)?;
            reports.push(out.evaluate(dataset, &cfg.render, seed)?);
            counters.push(out.counters);
        }
        rows.push(AblationRow { variant: v, reports, counters });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 0.2, 0.4, &w) - 1.2).abs() < 1e-12);
        let zero = LossWeights { border: 0.0, scatter: 0.0 };
        assert_eq!(total_loss(0.7, 3.0, 5.0, &zero), 0.7);
    }

    #[test]
    fn photometric_is_sum_of_squares() {
        let (l, g) = photometric_loss(&[vec![0.5f64, 0.0]], &[vec![0.0f32, 1.0]]).unwrap();
        assert_eq!(l, 1.25);
        assert_eq!(g[0], vec![1.0, -2.0]);
        assert!(photometric_loss(&[vec![0.5f64]], &[vec![0.0f32, 1.0]]).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.guidance_every = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.weights.border = 0.0;
        c.use_scatter_loss = false;
        assert!(!c.guidance_active());
    }
}
