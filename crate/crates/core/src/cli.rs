//! The `echofield` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (bad flags, config or files),
//! 2 runtime failure. Failures print one line, `error[<kind>]: <message>`,
//! on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, Checkpoint, Persist};
use crate::config::RunConfig;
use crate::dataset::{frame_file_name, load_dataset, read_poses, write_dataset, write_f32, write_png};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dir, evaluate_field, MetricReport};
use crate::field::FieldState;
use crate::phantom::{build_phantom, extract_patches, procedural_shapes, simulate_sweep, PatchSource, PhantomSpec, CH_BORDER, CH_SCATTER_DENSITY};
use crate::prior::{finetune_lora, train_base, AdaptedDenoiser, DenoiserState, NoisePredictor, NoiseSchedule};
use crate::render::{render_frame_path, RenderPath};
use crate::train::{ablation_suite, loss_csv, read_scene, PriorRef, Trainer};
use crate::types::{SweepDataset, VoxelPatch};

#[derive(Parser, Debug)]
#[command(name = "echofield", version, about = "Ultrasound neural-field reconstruction with a voxel diffusion prior")]
pub struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a phantom and simulate a sweep into a dataset directory.
    Phantom(PhantomArgs),
    /// Train the base denoiser on procedural voxel shapes.
    PriorTrain(PriorTrainArgs),
    /// Fit low-rank adapters to patches of a phantom.
    PriorFinetune(PriorFinetuneArgs),
    /// Train a field on a dataset.
    Train(TrainArgs),
    /// Train and score the four ablation variants.
    Ablate(AblateArgs),
    /// Render frames from a trained field.
    Render(RenderArgs),
    /// Score rendered frames against a dataset's test split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Phantom description (JSON); the built-in layered phantom if omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub rock: Option<f64>,
    #[arg(long)]
    pub tilt: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PriorTrainArgs {
    /// Number of procedural training patches.
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Diffusion chain length T.
    #[arg(long)]
    pub schedule_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PriorFinetuneArgs {
    /// Base denoiser checkpoint from `prior-train`.
    #[arg(long)]
    pub base: PathBuf,
    /// Phantom whose border and scattering volumes supply patches.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PriorArgs {
    /// Base denoiser checkpoint.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Adapter checkpoint applied on top of `--prior`.
    #[arg(long, requires = "prior")]
    pub adapter: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Same as setting both guidance weights to zero.
    #[arg(long)]
    pub no_guidance: bool,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Comma-separated seeds; overrides `ablate.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pose list in the dataset `poses.json` format.
    #[arg(long, required_unless_present = "dataset")]
    pub poses: Option<PathBuf>,
    /// Render every pose of this dataset (its probe is used too).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Also write raw little-endian f32 frames.
    #[arg(long)]
    pub float_out: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Field checkpoint to render the test poses from.
    #[arg(long, required_unless_present = "frames", conflicts_with = "frames")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of pre-rendered `{index:05}.png` frames.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Also write per-frame metrics as CSV.
    #[arg(long)]
    pub csv: bool,
}

/// Exit status and the files a command wrote.
#[derive(Debug, Default)]
pub struct CommandResult {
    pub code: i32,
    pub artifacts: Vec<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// reports errors on stderr.
pub fn run<I, S>(args: I) -> CommandResult
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return CommandResult::default();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return CommandResult { code: 1, artifacts: Vec::new() };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(artifacts) => CommandResult { code: 0, artifacts },
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            CommandResult { code: if e.is_user_error() { 1 } else { 2 }, artifacts: Vec::new() }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(&mut cfg, a, out),
        Command::PriorTrain(a) => cmd_prior_train(&mut cfg, a, out),
        Command::PriorFinetune(a) => cmd_prior_finetune(&mut cfg, a, out),
        Command::Train(a) => cmd_train(&mut cfg, a, out),
        Command::Ablate(a) => cmd_ablate(&mut cfg, a, out),
        Command::Render(a) => cmd_render(cli.config.is_some(), &cfg, a, out),
        Command::Eval(a) => cmd_eval(&cfg, a, out),
    }
}

fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn cmd_phantom(cfg: &mut RunConfig, a: &PhantomArgs, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(f) = a.frames {
        cfg.trajectory_frames = f;
    }
    if let Some(r) = a.rock {
        cfg.trajectory_rock = r;
    }
    if let Some(t) = a.tilt {
        cfg.trajectory_tilt = t;
    }
    cfg.validate()?;
    let spec = match &a.spec {
        Some(p) => PhantomSpec::load(p)?,
        None => PhantomSpec::desk(cfg.seed),
    };
    let volume = build_phantom(&spec)?;
    let poses = cfg.trajectory().poses()?;
    let ds = simulate_sweep(&volume, &poses, &cfg.probe(), &cfg.render(), cfg.seed)?;
    write_dataset(&ds, out)
}

fn prior_loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

pub fn cmd_prior_train(cfg: &mut RunConfig, a: &PriorTrainArgs, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(n) = a.patches {
        cfg.prior_train_patches = n;
    }
    if let Some(n) = a.steps {
        cfg.prior_train_steps = n;
    }
    if let Some(n) = a.schedule_steps {
        cfg.prior_schedule_steps = n;
    }
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let data = procedural_shapes(cfg.prior_train_patches, cfg.seed);
    let (state, losses) = train_base(&data, &schedule, cfg.denoiser(), cfg.prior_train_steps, &cfg.prior_train())?;
    let mut c = Checkpoint::new();
    state.write_into(&mut c, "");
    c.set_meta("prior/schedule_steps", schedule.steps());
    Ok(vec![c.save(out.join("prior.ckpt"))?, write_text(out.join("prior_loss.csv"), &prior_loss_csv(&losses))?])
}

/// Border and scattering-density patches of a phantom, pooled.
pub fn phantom_patches(spec: &PhantomSpec, count: usize, size_fraction: (f64, f64), seed: u64) -> Result<Vec<VoxelPatch>> {
    let volume = build_phantom(spec)?;
    let half = count.div_ceil(2);
    let mut patches = extract_patches(PatchSource::Volume(&volume.channel(CH_BORDER)), half, size_fraction, seed)?;
    let s = crate::rng::derive_seed(seed, "scatter-patches", &[]);
    patches.extend(extract_patches(PatchSource::Volume(&volume.channel(CH_SCATTER_DENSITY)), half, size_fraction, s)?);
    patches.truncate(count.max(1));
    Ok(patches)
}

fn load_base(path: &Path) -> Result<(DenoiserState<f32>, Option<usize>)> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let c = Checkpoint::load(path)?;
    let state = DenoiserState::<f32>::read_from(&c, "")?;
    let steps = c.meta_parse("prior/schedule_steps").ok();
    Ok((state, steps))
}

fn schedule_for(cfg: &RunConfig, stored: Option<usize>) -> Result<NoiseSchedule> {
    match stored {
        Some(t) if t != cfg.prior_schedule_steps => {
            log::info!("using the prior's own schedule length T = {t}");
            NoiseSchedule::scaled_linear(t)
        }
        _ => cfg.schedule(),
    }
}

pub fn cmd_prior_finetune(cfg: &mut RunConfig, a: &PriorFinetuneArgs, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(n) = a.patches {
        cfg.prior_finetune_patches = n;
    }
    if let Some(n) = a.steps {
        cfg.prior_finetune_steps = n;
    }
    if let Some(r) = a.rank {
        cfg.prior_rank = r;
    }
    if let Some(d) = a.delta {
        cfg.prior_delta = d;
    }
    cfg.validate()?;
    let (base, stored) = load_base(&a.base)?;
    let schedule = schedule_for(cfg, stored)?;
    let spec = match &a.spec {
        Some(p) => PhantomSpec::load(p)?,
        None => PhantomSpec::desk(cfg.seed),
    };
    let data = phantom_patches(
        &spec,
        cfg.prior_finetune_patches,
        (cfg.prior_patch_size_min, cfg.prior_patch_size_max),
        cfg.seed,
    )?;
    let (model, losses) = finetune_lora(
        &base,
        &data,
        &schedule,
        cfg.prior_finetune_steps,
        cfg.prior_rank,
        cfg.prior_delta,
        &cfg.prior_finetune(),
    )?;
    Ok(vec![
        model.adapter_checkpoint().save(out.join("adapter.ckpt"))?,
        write_text(out.join("finetune_loss.csv"), &prior_loss_csv(&losses))?,
    ])
}

/// A loaded prior: either the base alone or base plus adapter.
pub enum LoadedPrior {
    Base(DenoiserState<f32>),
    Adapted(AdaptedDenoiser<f32>),
}

impl LoadedPrior {
    pub fn model(&self) -> &dyn NoisePredictor {
        match self {
            LoadedPrior::Base(b) => b,
            LoadedPrior::Adapted(a) => a,
        }
    }
}

fn load_prior(cfg: &RunConfig, a: &PriorArgs) -> Result<Option<(LoadedPrior, NoiseSchedule)>> {
    let Some(base_path) = &a.prior else { return Ok(None) };
    let (base, stored) = load_base(base_path)?;
    let schedule = schedule_for(cfg, stored)?;
    let model = match &a.adapter {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile { path: p.clone() });
            }
            LoadedPrior::Adapted(AdaptedDenoiser::from_parts(base, &Checkpoint::load(p)?)?)
        }
        None => LoadedPrior::Base(base),
    };
    Ok(Some((model, schedule)))
}

fn dataset_at(path: &Path) -> Result<SweepDataset> {
    load_dataset(path)
}

pub fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(n) = a.iterations {
        cfg.train_iterations = n;
    }
    if a.no_guidance {
        cfg.train_lambda_border = 0.0;
        cfg.train_lambda_scatter = 0.0;
    }
    cfg.validate()?;
    let ds = dataset_at(&a.dataset)?;
    let tc = cfg.train();
    let loaded = if tc.guidance_active() { load_prior(cfg, &a.prior)? } else { None };
    let prior = loaded.as_ref().map(|(m, s)| PriorRef { model: m.model(), schedule: s });
    let mut trainer = match &a.resume {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile { path: p.clone() });
            }
            Trainer::resume(&ds, prior, &tc, &Checkpoint::load(p)?)?
        }
        None => Trainer::new(&ds, prior, &tc)?,
    };
    let mut written = trainer.run(Some(out))?;
    written.push(write_text(out.join("loss.csv"), &loss_csv(&trainer.history))?);
    Ok(written)
}

pub fn cmd_ablate(cfg: &mut RunConfig, a: &AblateArgs, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(n) = a.iterations {
        cfg.train_iterations = n;
    }
    if let Some(s) = &a.seeds {
        cfg.ablate_seeds = s.clone();
    }
    cfg.validate()?;
    let ds = dataset_at(&a.dataset)?;
    let loaded = load_prior(cfg, &a.prior)?;
    let prior = loaded.as_ref().map(|(m, s)| PriorRef { model: m.model(), schedule: s });
    let table = ablation_suite(&ds, prior, &cfg.train(), &cfg.ablate_seeds)?;
    print!("{}", table.to_table());
    let mut written = vec![write_text(out.join("ablation.txt"), &table.to_table())?];
    if a.csv {
        written.push(write_text(out.join("ablation.csv"), &table.to_csv())?);
    }
    Ok(written)
}

/// A trained field with what is needed to render it.
pub struct LoadedField {
    pub state: FieldState<f32>,
    pub scene: crate::geometry::SceneTransform,
    pub path: RenderPath,
}

pub fn load_field(path: &Path) -> Result<LoadedField> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let c = Checkpoint::load(path)?;
    let state: FieldState<f32> = load_checkpoint(path)?;
    let scene = read_scene(&c)?;
    let path = match c.meta("train/path")? {
        "standard" => RenderPath::Standard,
        _ => RenderPath::Ultrasound,
    };
    Ok(LoadedField { state, scene, path })
}

pub fn cmd_render(explicit_config: bool, cfg: &RunConfig, a: &RenderArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let field = load_field(&a.checkpoint)?;
    if explicit_config && field.state.config() != &cfg.field() {
        return Err(Error::validation("checkpoint field architecture does not match the config"));
    }
    let (probe, poses) = match (&a.poses, &a.dataset) {
        (Some(p), _) => (cfg.probe(), read_poses(p)?),
        (None, Some(d)) => {
            let ds = dataset_at(d)?;
            let poses = ds.frames.iter().map(|f| (f.frame_index, f.pose)).collect();
            (ds.probe, poses)
        }
        (None, None) => return Err(Error::validation("render needs --poses or --dataset")),
    };
    let probe = field.scene.apply_probe(&probe);
    let render = cfg.render();
    let dir = out.join("frames");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (idx, pose) in poses {
        let pose = field.scene.apply_pose(&pose);
        let img = render_frame_path(&field.state, &pose, &probe, &render, cfg.seed, field.path)?;
        let p = dir.join(frame_file_name(idx));
        write_png(&p, &img)?;
        written.push(p.clone());
        if a.float_out {
            let f = p.with_extension("f32");
            write_f32(&f, &img)?;
            written.push(f);
        }
    }
    Ok(written)
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = dataset_at(&a.dataset)?;
    let report: MetricReport = match (&a.checkpoint, &a.frames) {
        (Some(c), _) => {
            let field = load_field(c)?;
            evaluate_field(&field.state, &field.scene.apply_dataset(&ds), &cfg.render(), field.path, cfg.seed, cfg.eval_ms_ssim_scales, None)?
        }
        (None, Some(dir)) => evaluate_dir(dir, &ds, cfg.eval_ms_ssim_scales, None)?,
        (None, None) => return Err(Error::validation("eval needs --checkpoint or --frames")),
    };
    print!("{}", report.to_table());
    let mut written = vec![
        write_text(out.join("report.json"), &report.to_json())?,
        write_text(out.join("report.txt"), &report.to_table())?,
    ];
    if a.csv {
        written.push(write_text(out.join("report.csv"), &report.to_csv())?);
    }
    Ok(written)
}
