//! Command-line entry point wiring run configs to the pipeline.
//!
//! Settings resolve as defaults < `--config` file < flags. Exit codes:
//! 0 success, 1 usage error (bad flags or config), 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Axis};

use framegen_core::config::{load_config, RunConfig};
use framegen_core::data::{
    export_ppm, gen_clip, read_clip, read_tensor, write_clip, Clip, SceneConfig,
};
use framegen_core::diffusion::SampleOpts;
use framegen_core::error::Error;
use framegen_core::gradcheck;
use framegen_core::pipeline::{
    ablate, evaluate, format_table, interpolate, load_checkpoint, save_checkpoint, train,
    train_ae, write_loss_csv, AeTrainConfig, EvalReport, ModelConfig, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "framegen",
    version,
    about = "Latent-diffusion video frame interpolation on synthetic clips"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic large-motion clips
    GenData(GenDataArgs),
    /// Pre-train the frame autoencoder
    TrainAe(TrainAeArgs),
    /// Train the denoiser and conditional encoder over frozen latents
    Train(TrainArgs),
    /// Synthesize the frames between two keyframes
    Interpolate(InterpolateArgs),
    /// Score a checkpoint on held-out clips against both baselines
    Eval(EvalArgs),
    /// Train and score all four conditioning variants on one dataset
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences
    Gradcheck,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// key=value run config file (strict keys)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for all randomness (config: seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory [default: {paths}/data]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of clips to generate
    #[arg(long, default_value_t = 8)]
    clips: usize,
    /// Frames per clip (config: n_frames)
    #[arg(long)]
    n_frames: Option<usize>,
    /// Frame height (config: height)
    #[arg(long)]
    height: Option<usize>,
    /// Frame width (config: width)
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct TrainAeArgs {
    #[command(flatten)]
    common: Common,
    /// Clip directory [default: {paths}/data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory for ae.ckpt and ae_loss.csv [default: {paths}]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Reconstruction steps
    #[arg(long, default_value_t = 400)]
    steps: usize,
    /// Autoencoder learning rate
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Random frames per optimizer step
    #[arg(long, default_value_t = 4)]
    frames_per_step: usize,
}

/// Flags shared by `train` and `ablate`.
#[derive(Args)]
struct TrainShared {
    #[command(flatten)]
    common: Common,
    /// Clip directory [default: {paths}/data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Autoencoder checkpoint [default: {paths}/ae.ckpt]
    #[arg(long, value_name = "FILE")]
    ae: Option<PathBuf>,
    /// Output directory [default: {paths}]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Optimizer steps (config: train_steps)
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate (config: lr)
    #[arg(long)]
    lr: Option<f64>,
    /// Clips per optimizer step (config: batch)
    #[arg(long)]
    batch: Option<usize>,
    /// Diffusion schedule length (config: timesteps)
    #[arg(long)]
    timesteps: Option<usize>,
    /// Train only the conditional encoder (config: freeze_base)
    #[arg(long)]
    freeze_base: bool,
    /// Held-out clip directory for ablation scoring [default: {paths}/holdout]
    #[arg(long, value_name = "DIR")]
    holdout: Option<PathBuf>,
    /// Sampler steps for ablation scoring (config: steps_infer)
    #[arg(long)]
    eval_steps: Option<usize>,
    /// Evaluation worker threads [default: FRAMEGEN_THREADS or 1]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: TrainShared,
    /// Disconnect the temporal branch
    #[arg(long)]
    no_temporal: bool,
    /// Build without cross-frame attention
    #[arg(long)]
    no_xattn: bool,
    /// Run the four-variant grid instead of one training run (config: ablate)
    #[arg(long)]
    ablate: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    shared: TrainShared,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    common: Common,
    /// Trained checkpoint [default: {paths}/model.ckpt]
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Clip or tensor file; its first frame is keyframe 1
    #[arg(long, value_name = "FILE")]
    first: PathBuf,
    /// Clip or tensor file; its last frame is keyframe N
    #[arg(long, value_name = "FILE")]
    last: PathBuf,
    /// Output clip length including both keyframes (config: n_frames)
    #[arg(long)]
    n: Option<usize>,
    /// Sampler steps (config: steps_infer)
    #[arg(long)]
    steps: Option<usize>,
    /// Output clip file [default: {paths}/interp.vfic]
    #[arg(long, value_name = "FILE")]
    out_clip: Option<PathBuf>,
    /// Also export every frame as a PPM image into this directory
    #[arg(long, value_name = "DIR")]
    ppm: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Trained checkpoint [default: {paths}/model.ckpt]
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Held-out clip directory [default: {paths}/holdout]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Sampler steps (config: steps_infer)
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads [default: FRAMEGEN_THREADS or 1]
    #[arg(long)]
    threads: Option<usize>,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl Common {
    /// Defaults, then the config file, then the shared flags.
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg =
            load_config(self.config.as_deref()).map_err(|e| usage(e.to_string()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

/// `--threads`, else FRAMEGEN_THREADS, else 1.
fn resolve_threads(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(t) = flag {
        return Ok(t.max(1));
    }
    match std::env::var("FRAMEGEN_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map(|v| v.max(1))
            .map_err(|_| usage(format!("FRAMEGEN_THREADS must be an integer, got {s:?}"))),
        Err(_) => Ok(1),
    }
}

/// Stable per-item seed derivation (same mixing as the evaluator).
fn mix_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// All `.vfic` clips in `dir`, in file-name order.
fn load_clips(dir: &Path) -> Result<Vec<Clip>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "vfic"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Runtime(Error::Invalid(format!(
            "no .vfic clips in {}",
            dir.display()
        ))));
    }
    let mut clips = Vec::with_capacity(paths.len());
    for p in &paths {
        clips.push(read_clip(p)?);
    }
    Ok(clips)
}

/// Keyframe from a clip or tensor file: first frame when `first` is true,
/// last frame otherwise.
fn read_keyframe(path: &Path, first: bool) -> Result<Array3<f32>, CliError> {
    let t = read_tensor(path)?;
    let s = t.shape().to_vec();
    if s[0] == 0 || s[1] != 3 {
        return Err(CliError::Runtime(Error::Invalid(format!(
            "{}: expected [N>=1, 3, H, W] frames, got {s:?}",
            path.display()
        ))));
    }
    let idx = if first { 0 } else { s[0] - 1 };
    Ok(t.index_axis(Axis(0), idx).to_owned())
}

/// Desk-scale model (4-channel latents, 32/64-wide denoiser) with the
/// schedule length taken from the run config.
fn base_model(cfg: &RunConfig) -> ModelConfig {
    let mut model = ModelConfig::default();
    model.timesteps = cfg.timesteps;
    model
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = a.common.load()?;
    if let Some(v) = a.n_frames {
        cfg.n_frames = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.clips == 0 {
        return Err(usage("--clips must be >= 1"));
    }
    let out = a.out.unwrap_or_else(|| cfg.paths.join("data"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let scene = SceneConfig::default();
    for i in 0..a.clips {
        let clip = gen_clip(&scene, cfg.n_frames, cfg.height, cfg.width, mix_seed(cfg.seed, i))?;
        write_clip(&clip, &out.join(format!("clip_{i:03}.vfic")))?;
    }
    println!(
        "wrote {} clips ({} frames, {}x{}) to {}",
        a.clips,
        cfg.n_frames,
        cfg.height,
        cfg.width,
        out.display()
    );
    Ok(())
}

fn cmd_train_ae(a: TrainAeArgs) -> Result<(), CliError> {
    let cfg = a.common.load()?;
    if a.steps == 0 || a.frames_per_step == 0 {
        return Err(usage("--steps and --frames-per-step must be >= 1"));
    }
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return Err(usage(format!("--lr must be finite and positive, got {}", a.lr)));
    }
    let data = a.data.unwrap_or_else(|| cfg.paths.join("data"));
    let out = a.out.unwrap_or_else(|| cfg.paths.clone());
    let clips = load_clips(&data)?;
    let ae_cfg = AeTrainConfig {
        steps: a.steps,
        lr: a.lr,
        frames_per_step: a.frames_per_step,
        seed: cfg.seed,
    };
    let (ckpt, curve) = train_ae(&base_model(&cfg), &clips, &ae_cfg)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ckpt_path = out.join("ae.ckpt");
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_loss_csv(&out.join("ae_loss.csv"), &curve)?;
    let last = curve.last().map_or(f64::NAN, |&(_, l)| l);
    println!(
        "autoencoder: {} steps on {} clips, final loss {last:.6}; wrote {}",
        a.steps,
        clips.len(),
        ckpt_path.display()
    );
    Ok(())
}

fn train_config(cfg: &RunConfig, s: &TrainShared, no_temporal: bool, no_xattn: bool) -> TrainConfig {
    TrainConfig {
        timesteps: s.timesteps.unwrap_or(cfg.timesteps),
        lr: s.lr.unwrap_or(cfg.lr),
        batch: s.batch.unwrap_or(cfg.batch),
        steps: s.steps.unwrap_or(cfg.train_steps),
        seed: cfg.seed,
        freeze_base: s.freeze_base || cfg.freeze_base,
        no_temporal,
        no_xattn,
        n_frames: cfg.n_frames,
        height: cfg.height,
        width: cfg.width,
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = a.shared.common.load()?;
    if a.ablate || cfg.ablate {
        return run_ablation(&cfg, &a.shared);
    }
    let tc = train_config(&cfg, &a.shared, a.no_temporal, a.no_xattn);
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let data = a.shared.data.unwrap_or_else(|| cfg.paths.join("data"));
    let ae_path = a.shared.ae.unwrap_or_else(|| cfg.paths.join("ae.ckpt"));
    let out = a.shared.out.unwrap_or_else(|| cfg.paths.clone());
    let clips = load_clips(&data)?;
    let ae = load_checkpoint(&ae_path)?;
    let outcome = train(&tc, &ae, &clips)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ckpt_path = out.join("model.ckpt");
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.curve)?;
    let last = outcome.curve.last().map_or(f64::NAN, |&(_, l)| l);
    println!(
        "trained {} scalars for {} steps on {} clips, final loss {last:.6}; wrote {}",
        outcome.trained_scalars,
        tc.steps,
        clips.len(),
        ckpt_path.display()
    );
    Ok(())
}

fn run_ablation(cfg: &RunConfig, s: &TrainShared) -> Result<(), CliError> {
    let tc = train_config(cfg, s, false, false);
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let eval_steps = s.eval_steps.unwrap_or(cfg.steps_infer);
    if eval_steps == 0 {
        return Err(usage("--eval-steps must be >= 1"));
    }
    let threads = resolve_threads(s.threads)?;
    let data = s.data.clone().unwrap_or_else(|| cfg.paths.join("data"));
    let holdout = s.holdout.clone().unwrap_or_else(|| cfg.paths.join("holdout"));
    let ae_path = s.ae.clone().unwrap_or_else(|| cfg.paths.join("ae.ckpt"));
    let out = s.out.clone().unwrap_or_else(|| cfg.paths.clone());
    let train_set = load_clips(&data)?;
    let held_out = load_clips(&holdout)?;
    let ae = load_checkpoint(&ae_path)?;
    let rows = ablate(&tc, &ae, &train_set, &held_out, eval_steps, threads)?;
    let table = format_table(&rows);
    print!("{table}");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let report_path = out.join("ablation.txt");
    fs::write(&report_path, &table).map_err(|e| Error::io(&report_path, e))?;
    println!("wrote {}", report_path.display());
    Ok(())
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<(), CliError> {
    let cfg = a.common.load()?;
    let ckpt_path = a.ckpt.unwrap_or_else(|| cfg.paths.join("model.ckpt"));
    let out_clip = a.out_clip.unwrap_or_else(|| cfg.paths.join("interp.vfic"));
    let n = a.n.unwrap_or(cfg.n_frames);
    let steps = a.steps.unwrap_or(cfg.steps_infer);
    if steps == 0 {
        return Err(usage("--steps must be >= 1"));
    }
    let ckpt = load_checkpoint(&ckpt_path)?;
    let first = read_keyframe(&a.first, true)?;
    let last = read_keyframe(&a.last, false)?;
    let opts = SampleOpts { steps, seed: cfg.seed, clamp: Some(4.0) };
    let clip = interpolate(&ckpt, &first, &last, n, &opts)?;
    if let Some(parent) = out_clip.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_clip(&clip, &out_clip)?;
    if let Some(dir) = &a.ppm {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for i in 0..clip.n_frames() {
            let frame = clip.frames.index_axis(Axis(0), i);
            export_ppm(&frame, &dir.join(format!("frame_{i:03}.ppm")))?;
        }
    }
    println!("wrote {n}-frame clip to {}", out_clip.display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "{:>5} {:>11} {:>7} {:>12} {:>7} {:>11} {:>7}",
        "clip", "model psnr", "ssim", "repeat psnr", "ssim", "blend psnr", "ssim"
    );
    let row = |label: &str, e: &framegen_core::pipeline::ClipEval| {
        println!(
            "{label:>5} {:>11.2} {:>7.3} {:>12.2} {:>7.3} {:>11.2} {:>7.3}",
            e.model.psnr,
            e.model.ssim,
            e.repeat_first.psnr,
            e.repeat_first.ssim,
            e.linear_blend.psnr,
            e.linear_blend.ssim
        );
    };
    for (i, e) in report.per_clip.iter().enumerate() {
        row(&i.to_string(), e);
    }
    row("mean", &report.mean);
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = a.common.load()?;
    let threads = resolve_threads(a.threads)?;
    let steps = a.steps.unwrap_or(cfg.steps_infer);
    if steps == 0 {
        return Err(usage("--steps must be >= 1"));
    }
    let ckpt_path = a.ckpt.unwrap_or_else(|| cfg.paths.join("model.ckpt"));
    let data = a.data.unwrap_or_else(|| cfg.paths.join("holdout"));
    let ckpt = load_checkpoint(&ckpt_path)?;
    let clips = load_clips(&data)?;
    let report = evaluate(&ckpt, &clips, steps, cfg.seed, threads)?;
    print_report(&report);
    Ok(())
}

fn cmd_gradcheck() -> Result<(), CliError> {
    const TOL: f64 = 1e-4;
    let suite = gradcheck::standard_suite()?;
    let mut worst: Option<(&str, f64)> = None;
    for (name, report) in &suite {
        let ok = report.passes(TOL);
        println!(
            "{name}: max rel err {:.3e} {}",
            report.max_err,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok && worst.is_none_or(|(_, w)| report.max_err > w) {
            worst = Some((name, report.max_err));
        }
    }
    match worst {
        None => Ok(()),
        Some((name, err)) => Err(CliError::Runtime(Error::Invalid(format!(
            "gradient check failed: {name} at {err:.3e} (tolerance {TOL:.0e})"
        )))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::TrainAe(a) => cmd_train_ae(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Interpolate(a) => cmd_interpolate(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => {
            let cfg = a.shared.common.load()?;
            run_ablation(&cfg, &a.shared)
        }
        Cmd::Gradcheck => cmd_gradcheck(),
    }
}

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => ExitCode::SUCCESS,
            Err(CliError::Usage(msg)) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
            Err(CliError::Runtime(e)) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Err(e) => {
            // clap sends --help/--version to stdout and usage errors to
            // stderr on its own.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            ExitCode::from(code)
        }
    }
}
