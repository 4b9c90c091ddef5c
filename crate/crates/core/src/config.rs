//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected. Every key is listed in `docs/config.md`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::phantom::TrajectorySpec;
use crate::prior::{DenoiserConfig, NoiseSchedule, PriorTrainConfig};
use crate::render::{PsfConfig, RenderConfig, SamplingMode};
use crate::train::{LossWeights, TrainConfig};
use crate::types::{ProbeConfig, ProbeGeometry};

/// A value type that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("cannot parse `{s}`: {e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool, SamplingMode);

impl ConfigValue for ProbeGeometry {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(ProbeGeometry::Linear),
            "fan" => Ok(ProbeGeometry::Fan),
            _ => Err(format!("unknown probe geometry `{s}`")),
        }
    }
    fn show(&self) -> String {
        match self {
            ProbeGeometry::Linear => "linear".into(),
            ProbeGeometry::Fan => "fan".into(),
        }
    }
}

/// Comma-separated list.
impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(ConfigValue::show).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for [f64; 3] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = Vec::<f64>::parse_value(s)?;
        v.try_into().map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))
    }
    fn show(&self) -> String {
        self.to_vec().show()
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:expr])* $key:literal => $field:ident : $ty:ty = $default:expr; )*) => {
        /// Every tunable of a run. Defaults are the desk-scale preset.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// All accepted keys, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::validation(format!("{key}: {e}")))?;
                    } )*
                    _ => return Err(Error::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(self.$field.show()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    /// Master seed for every random stream.
    "seed" => seed: u64 = 0;

    "probe.n_scanlines" => probe_n_scanlines: usize = 64;
    "probe.n_samples" => probe_n_samples: usize = 128;
    "probe.depth_extent" => probe_depth_extent: f64 = 1.0;
    "probe.face_width" => probe_face_width: f64 = 1.6;
    "probe.frequency" => probe_frequency: f64 = 1.0;
    "probe.geometry" => probe_geometry: ProbeGeometry = ProbeGeometry::Linear;
    "probe.fan_aperture" => probe_fan_aperture: f64 = 0.0;
    "probe.initial_intensity" => probe_initial_intensity: f64 = 1.0;

    "trajectory.frames" => trajectory_frames: usize = 20;
    "trajectory.start" => trajectory_start: [f64; 3] = [0.0, -0.6, 0.0];
    "trajectory.end" => trajectory_end: [f64; 3] = [0.0, 0.6, 0.0];
    "trajectory.rock" => trajectory_rock: f64 = 0.25;
    "trajectory.tilt" => trajectory_tilt: f64 = 0.1;

    "render.boundary_mode" => render_boundary_mode: SamplingMode = SamplingMode::Expected;
    "render.scatter_mode" => render_scatter_mode: SamplingMode = SamplingMode::Expected;
    "render.w_reflect" => render_w_reflect: f64 = 0.5;
    "render.w_scatter" => render_w_scatter: f64 = 0.5;
    /// Odd kernel size; 0 disables the point-spread function.
    "render.psf_size" => render_psf_size: usize = 0;
    "render.psf_sigma_axial" => render_psf_sigma_axial: f64 = 1.0;
    "render.psf_sigma_lateral" => render_psf_sigma_lateral: f64 = 1.0;

    "field.n_layers" => field_n_layers: usize = 4;
    "field.hidden_width" => field_hidden_width: usize = 64;
    "field.skip_at_layer" => field_skip_at_layer: usize = 2;
    "field.pe_frequencies" => field_pe_frequencies: usize = 6;

    "train.iterations" => train_iterations: usize = 2000;
    "train.batch_size" => train_batch_size: usize = 512;
    "train.lr_start" => train_lr_start: f64 = 5e-4;
    "train.lr_end" => train_lr_end: f64 = 5e-5;
    "train.clip_norm" => train_clip_norm: f64 = 10.0;
    "train.lambda_border" => train_lambda_border: f64 = 0.5;
    "train.lambda_scatter" => train_lambda_scatter: f64 = 0.25;
    "train.use_border_loss" => train_use_border_loss: bool = true;
    "train.use_scatter_loss" => train_use_scatter_loss: bool = true;
    "train.use_us_rendering" => train_use_us_rendering: bool = true;
    "train.guidance_every" => train_guidance_every: usize = 10;
    "train.guidance_patches" => train_guidance_patches: usize = 4;
    /// 0 selects `T/10`.
    "train.guidance_step" => train_guidance_step: usize = 0;
    "train.patch_size_min" => train_patch_size_min: f64 = 0.1;
    "train.patch_size_max" => train_patch_size_max: f64 = 0.4;
    "train.checkpoint_every" => train_checkpoint_every: usize = 500;

    "prior.schedule_steps" => prior_schedule_steps: usize = 100;
    "prior.width" => prior_width: usize = 16;
    "prior.time_dim" => prior_time_dim: usize = 32;
    "prior.train_steps" => prior_train_steps: usize = 500;
    "prior.train_patches" => prior_train_patches: usize = 100;
    "prior.batch" => prior_batch: usize = 4;
    "prior.lr" => prior_lr: f64 = 1e-3;
    "prior.finetune_steps" => prior_finetune_steps: usize = 200;
    "prior.finetune_patches" => prior_finetune_patches: usize = 64;
    "prior.finetune_lr" => prior_finetune_lr: f64 = 1e-3;
    "prior.rank" => prior_rank: usize = 4;
    "prior.delta" => prior_delta: f64 = 1.0;
    "prior.patch_size_min" => prior_patch_size_min: f64 = 0.1;
    "prior.patch_size_max" => prior_patch_size_max: f64 = 0.4;

    "ablate.seeds" => ablate_seeds: Vec<u64> = vec![0, 1, 2];
    "eval.ms_ssim_scales" => eval_ms_ssim_scales: usize = 5;
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf() });
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.probe().validate()?;
        self.trajectory().poses()?;
        self.train().validate()?;
        self.denoiser().validate()?;
        self.schedule()?;
        if self.prior_batch == 0 {
            return Err(Error::validation("prior.batch must be >= 1"));
        }
        if self.prior_rank == 0 {
            return Err(Error::validation("prior.rank must be >= 1"));
        }
        if !(self.prior_delta >= 0.0 && self.prior_delta.is_finite()) {
            return Err(Error::validation("prior.delta must be finite and >= 0"));
        }
        if !(self.prior_patch_size_min > 0.0
            && self.prior_patch_size_min <= self.prior_patch_size_max
            && self.prior_patch_size_max <= 1.0)
        {
            return Err(Error::validation("prior patch sizes must satisfy 0 < min <= max <= 1"));
        }
        if self.train_guidance_step > self.prior_schedule_steps {
            return Err(Error::validation("train.guidance_step exceeds prior.schedule_steps"));
        }
        if self.ablate_seeds.is_empty() {
            return Err(Error::validation("ablate.seeds must list at least one seed"));
        }
        if self.eval_ms_ssim_scales == 0 || self.eval_ms_ssim_scales > 5 {
            return Err(Error::validation("eval.ms_ssim_scales must be in 1..=5"));
        }
        Ok(())
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            n_scanlines: self.probe_n_scanlines,
            n_samples: self.probe_n_samples,
            depth_extent: self.probe_depth_extent,
            frequency: self.probe_frequency,
            geometry: self.probe_geometry,
            fan_aperture: self.probe_fan_aperture,
            initial_intensity: self.probe_initial_intensity,
            face_width: Some(self.probe_face_width),
        }
    }

    pub fn trajectory(&self) -> TrajectorySpec {
        TrajectorySpec {
            frames: self.trajectory_frames,
            start: self.trajectory_start,
            end: self.trajectory_end,
            rock: self.trajectory_rock,
            tilt: self.trajectory_tilt,
        }
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            boundary_mode: self.render_boundary_mode,
            scatter_mode: self.render_scatter_mode,
            psf: (self.render_psf_size > 0).then_some(PsfConfig {
                size: self.render_psf_size,
                sigma_axial: self.render_psf_sigma_axial,
                sigma_lateral: self.render_psf_sigma_lateral,
            }),
            w_reflect: self.render_w_reflect,
            w_scatter: self.render_w_scatter,
        }
    }

    pub fn field(&self) -> FieldConfig {
        FieldConfig {
            n_layers: self.field_n_layers,
            hidden_width: self.field_hidden_width,
            skip_at_layer: self.field_skip_at_layer,
            pe_frequencies: self.field_pe_frequencies,
        }
    }

    /// Training settings; the render config drops the PSF, which only
    /// applies to whole-frame synthesis.
    pub fn train(&self) -> TrainConfig {
        let mut render = self.render();
        render.psf = None;
        TrainConfig {
            iterations: self.train_iterations,
            batch_size: self.train_batch_size,
            lr_start: self.train_lr_start,
            lr_end: self.train_lr_end,
            clip_norm: self.train_clip_norm,
            guidance_every: self.train_guidance_every,
            guidance_patches: self.train_guidance_patches,
            guidance_step: (self.train_guidance_step > 0).then_some(self.train_guidance_step),
            patch_size_fraction: (self.train_patch_size_min, self.train_patch_size_max),
            weights: LossWeights { border: self.train_lambda_border, scatter: self.train_lambda_scatter },
            use_border_loss: self.train_use_border_loss,
            use_scatter_loss: self.train_use_scatter_loss,
            use_us_rendering: self.train_use_us_rendering,
            checkpoint_every: self.train_checkpoint_every,
            seed: self.seed,
            field: self.field(),
            render,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig { width: self.prior_width, time_dim: self.prior_time_dim }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.prior_schedule_steps)
    }

    pub fn prior_train(&self) -> PriorTrainConfig {
        PriorTrainConfig { batch: self.prior_batch, lr: self.prior_lr, seed: self.seed }
    }

    pub fn prior_finetune(&self) -> PriorTrainConfig {
        PriorTrainConfig { batch: self.prior_batch, lr: self.prior_finetune_lr, seed: self.seed }
    }
}
