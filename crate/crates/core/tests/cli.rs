use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use echofield::checkpoint::{load_checkpoint, Checkpoint};
use echofield::cli::Cli;
use echofield::dataset::{load_dataset, read_f32, read_png, write_poses};
use echofield::eval::psnr;
use echofield::prior::{AdaptedDenoiser, DenoiserState};
use echofield::rng;
use rand::Rng;
use tempfile::TempDir;

const SMALL: &str = "\
probe.n_scanlines = 16
probe.n_samples = 32
trajectory.frames = 9
field.hidden_width = 16
train.batch_size = 16
train.guidance_patches = 1
train.checkpoint_every = 5
prior.width = 4
prior.batch = 1
prior.train_patches = 4
prior.finetune_patches = 4
";

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Sandbox {
        let s = Sandbox { dir: tempfile::tempdir().unwrap() };
        std::fs::write(s.path("small.cfg"), SMALL).unwrap();
        s
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, extra: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
        p
    }

    /// Runs the binary with the small config and `--out <dir>/<out>`.
    fn run(&self, out: &str, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_echofield"));
        cmd.arg("--config").arg(self.path("small.cfg")).arg("--out").arg(self.path(out)).arg("--log-level").arg("warn");
        cmd.args(args).output().unwrap()
    }

    fn dataset(&self) -> PathBuf {
        let d = self.path("data");
        if !d.exists() {
            let o = self.run("data", &["phantom"]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        d
    }
}

fn raw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echofield")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_user_error(o: &Output, needle: &str) {
    assert_eq!(o.status.code(), Some(1), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
    assert!(err.contains(needle), "`{needle}` not in {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let root = Cli::command();
    let top = raw(&["--help"]);
    assert!(top.status.success());
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in root.get_subcommands() {
        assert!(text.contains(sub.get_name()), "{} missing from top-level help", sub.get_name());
        let o = raw(&[sub.get_name(), "--help"]);
        assert!(o.status.success());
        let help = String::from_utf8_lossy(&o.stdout);
        for arg in sub.get_arguments().chain(root.get_arguments()) {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "--{long} missing from `{} --help`", sub.get_name());
            }
        }
    }
}

#[test]
fn unknown_flag_and_missing_inputs_exit_1() {
    assert_user_error(&raw(&["train", "--dataset", "x", "--bogus"]), "--bogus");
    assert_user_error(&raw(&["frobnicate"]), "frobnicate");
    let sb = Sandbox::new();
    assert_user_error(&sb.run("o", &["train", "--dataset", s(&sb.path("nope"))]), "nope");
    assert_user_error(
        &sb.run("o", &["prior-finetune", "--base", s(&sb.path("missing.ckpt"))]),
        "missing.ckpt",
    );
}

#[test]
fn config_typo_names_the_key() {
    let sb = Sandbox::new();
    let cfg = sb.config("typo.cfg", "train.iteratons = 5\n");
    let o = raw(&["--config", s(&cfg), "--out", s(&sb.path("o")), "phantom"]);
    assert_user_error(&o, "train.iteratons");
    let cfg = sb.config("bad.cfg", "train.iterations = many\n");
    assert_user_error(&raw(&["--config", s(&cfg), "--out", s(&sb.path("o")), "phantom"]), "train.iterations");
}

#[test]
fn io_failure_exits_2() {
    let sb = Sandbox::new();
    let blocker = sb.path("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = raw(&["--out", s(&blocker.join("sub")), "phantom"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn phantom_is_complete_and_reproducible() {
    let sb = Sandbox::new();
    for out in ["a", "b"] {
        let o = sb.run(out, &["--seed", "7", "phantom"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = sb.path("a");
    assert!(a.join("probe.json").exists() && a.join("poses.json").exists());
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.len(), 9);
    assert_eq!((ds.probe.n_scanlines, ds.probe.n_samples), (16, 32));
    for i in 0..9 {
        let name = format!("frames/{i:05}.png");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(sb.path("b").join(&name)).unwrap());
    }
}

#[test]
fn malformed_phantom_spec_names_the_key() {
    let sb = Sandbox::new();
    let spec = sb.path("spec.json");
    std::fs::write(&spec, r#"{"layers": [], "wobble": 1}"#).unwrap();
    assert_user_error(&sb.run("o", &["phantom", "--spec", s(&spec)]), "wobble");
}

#[test]
fn prior_commands_write_checkpoints() {
    let sb = Sandbox::new();
    let o = sb.run("p", &["prior-train", "--steps", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(sb.path("p/prior_loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss"));
    assert_eq!(csv.lines().count(), 4);

    let base = sb.path("p/prior.ckpt");
    let o = sb.run("f", &["prior-finetune", "--base", s(&base), "--steps", "0", "--rank", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let adapter = Checkpoint::load(sb.path("f/adapter.ckpt")).unwrap();
    assert_eq!(adapter.meta("prior/adapter/rank").unwrap(), "4");

    let state: DenoiserState<f32> = load_checkpoint(&base).unwrap();
    let model = AdaptedDenoiser::from_parts(state.clone(), &adapter).unwrap();
    let mut r = rng::stream(0, "cli-test", &[]);
    let x: Vec<f32> = (0..32usize.pow(3)).map(|_| r.random_range(-1.0..1.0)).collect();
    assert_eq!(model.forward(&x, 5).unwrap(), state.forward(&x, 5).unwrap());
}

#[test]
fn train_smoke_guidance_and_aliasing() {
    let sb = Sandbox::new();
    let data = sb.dataset();
    // Guidance is on by default and needs a prior.
    assert_user_error(&sb.run("t0", &["train", "--dataset", s(&data), "--iterations", "10"]), "prior");

    let o = sb.run("t1", &["train", "--dataset", s(&data), "--iterations", "10", "--no-guidance"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(sb.path("t1/final.ckpt").exists() && sb.path("t1/step_000005.ckpt").exists());
    let csv = std::fs::read_to_string(sb.path("t1/loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,photometric,loss_border,loss_scatter,total,lr"));
    assert_eq!(csv.lines().count(), 11);

    let zero = sb.config("zero.cfg", "train.lambda_border = 0\ntrain.lambda_scatter = 0\n");
    let o = raw(&[
        "--config", s(&zero), "--out", s(&sb.path("t2")), "train", "--dataset", s(&data), "--iterations", "10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv, std::fs::read_to_string(sb.path("t2/loss.csv")).unwrap());
}

#[test]
fn guided_training_with_prior_runs() {
    let sb = Sandbox::new();
    let data = sb.dataset();
    assert!(sb.run("p", &["prior-train", "--steps", "2"]).status.success());
    let base = sb.path("p/prior.ckpt");
    assert!(sb.run("f", &["prior-finetune", "--base", s(&base), "--steps", "2"]).status.success());
    let adapter = sb.path("f/adapter.ckpt");
    let o = sb.run(
        "t",
        &["train", "--dataset", s(&data), "--iterations", "10", "--prior", s(&base), "--adapter", s(&adapter)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(sb.path("t/loss.csv")).unwrap();
    let row0: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(row0[2] > 0.0 && row0[3] > 0.0, "guidance losses missing at step 0: {row0:?}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let sb = Sandbox::new();
    let data = sb.dataset();
    let full = sb.run("full", &["train", "--dataset", s(&data), "--iterations", "10", "--no-guidance"]);
    assert!(full.status.success());
    let mid = sb.path("full/step_000005.ckpt");
    let o = sb.run(
        "resumed",
        &["train", "--dataset", s(&data), "--iterations", "10", "--no-guidance", "--resume", s(&mid)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["final.ckpt", "loss.csv"] {
        assert_eq!(std::fs::read(sb.path("full").join(f)).unwrap(), std::fs::read(sb.path("resumed").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn render_and_eval() {
    let sb = Sandbox::new();
    let data = sb.dataset();
    let train = |out: &str, iters: &str| {
        let o = sb.run(out, &["train", "--dataset", s(&data), "--iterations", iters, "--no-guidance"]);
        assert!(o.status.success(), "{}", stderr(&o));
        sb.path(out).join("final.ckpt")
    };
    let trained = train("trained", "150");
    let untrained = train("untrained", "1");

    // Self-comparison hits the cap.
    let o = sb.run("self", &["eval", "--dataset", s(&data), "--frames", s(&data.join("frames")), "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sb.path("self/report.json")).unwrap()).unwrap();
    assert_eq!(report["psnr"]["mean"], 100.0);
    assert_eq!(report["frames"].as_array().unwrap().len(), 2);
    assert!(sb.path("self/report.csv").exists() && sb.path("self/report.txt").exists());

    // A training pose renders closer to its frame after training.
    let ds = load_dataset(&data).unwrap();
    let k = ds.split.train[0];
    let poses = sb.path("poses.json");
    let a = ds.frames[k].pose;
    let b = ds.frames[k + 1].pose;
    write_poses(&poses, &[(0, a), (1, a.interpolate(&b, 0.5))]).unwrap();
    let mut scores = Vec::new();
    for (ckpt, out) in [(&trained, "r1"), (&untrained, "r0")] {
        let o = sb.run(out, &["render", "--checkpoint", s(ckpt), "--poses", s(&poses), "--float-out"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let img = read_png(&sb.path(out).join("frames/00000.png")).unwrap();
        scores.push(psnr(&img, &ds.frames[k].image, 1.0).unwrap());
        let mid = read_f32(&sb.path(out).join("frames/00001.f32"), 32, 16).unwrap();
        assert!(mid.in_unit_range());
    }
    assert!(scores[0] > scores[1], "trained {} vs untrained {}", scores[0], scores[1]);

    let o = sb.run("ev", &["eval", "--dataset", s(&data), "--checkpoint", s(&trained)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(sb.path("ev/report.json").exists());

    let wide = sb.config("wide.cfg", "field.hidden_width = 32\n");
    let o = raw(&[
        "--config", s(&wide), "--out", s(&sb.path("x")), "render", "--checkpoint", s(&trained), "--dataset", s(&data),
    ]);
    assert_user_error(&o, "config");
}
