use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use moblurf::data::{
    read_dataset, read_mask, read_png_rgb, read_poses, synthesize, write_dataset, write_mask, write_png_rgb, AnalyticScene,
    ExposureConfig, Image, Mask, PRESETS,
};
use moblurf::diffmath::gradcheck::{op_names, run_op_suite, CheckReport};
use moblurf::eval::{eval_frames, infer_frame, mask_iou, MetricReport};
use moblurf::fields::Model;
use moblurf::train::{end_to_end_gradchecks, Profile, TrainConfig, Trainer};
use moblurf::Error;

/// Exit code for invalid input or configuration.
const EXIT_VALIDATION: u8 = 1;
/// Exit code for a numerical failure (non-finite values, failed gradient check).
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(name = "moblurf", version, about = "Motion-deblurring dynamic radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; flags take precedence over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for matrix products.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_parser = ["paper", "desk"])]
    profile: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a blurry dataset from an analytic scene preset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "moving-quad-64")]
        preset: String,
        /// Sub-frames on each side of the frame instant.
        #[arg(long)]
        window: Option<usize>,
        /// Sub-frames per frame interval.
        #[arg(long)]
        rate: Option<usize>,
    },
    /// Train both stages on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Render sharp frames from a checkpoint.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `train` (every frame), `eval` (evaluation frames) or `file`.
        #[arg(long, default_value = "eval", value_parser = ["train", "eval", "file"])]
        poses: String,
        /// Pose file (12 values per line, line index = frame) for `--poses file`.
        #[arg(long)]
        pose_file: Option<PathBuf>,
        /// Explicit frame list, overriding the pose source's default.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Score rendered frames against the dataset's sharp ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every differentiable operation and the
    /// full objectives.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        points: usize,
        /// Corrupt the analytic gradient of the named operation.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Render { common, .. }
            | Command::Eval { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

/// Everything needed to rerun a command.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    seed: u64,
    config: Value,
    timings: Vec<(String, f64)>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            timings: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Marks numerical failures so they map to exit code 2.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Numerical>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } | Error::DegenerateAverage(_)) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.command.common().threads {
        // Read once by the matrix-product backend on first use.
        std::env::set_var("MATMUL_NUM_THREADS", n.max(1).to_string());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth {
            common,
            preset,
            window,
            rate,
        } => cmd_synth(&common, &preset, window, rate),
        Command::Train { common, data, resume } => cmd_train(&common, &data, resume),
        Command::Render {
            common,
            checkpoint,
            data,
            poses,
            pose_file,
            frames,
            samples,
        } => cmd_render(&common, &checkpoint, &data, &poses, pose_file.as_deref(), frames, samples),
        Command::Eval { common, renders, data } => cmd_eval(&common, &renders, &data),
        Command::Gradcheck {
            common,
            points,
            inject_fault,
        } => cmd_gradcheck(&common, points, inject_fault.as_deref()),
    }
}

fn read_config(path: Option<&Path>) -> anyhow::Result<Value> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            if !v.is_object() {
                bail!("config {} must be a JSON object", p.display());
            }
            Ok(v)
        }
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            bail!("output directory {} is not empty (use --force to overwrite)", dir.display());
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn out_dir(common: &Common) -> anyhow::Result<&Path> {
    common.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
}

fn cmd_synth(common: &Common, preset: &str, window: Option<usize>, rate: Option<usize>) -> anyhow::Result<()> {
    let file = read_config(common.config.as_deref())?;
    let out = out_dir(common)?;
    let seed = common.seed.or_else(|| file.get("seed").and_then(Value::as_u64)).unwrap_or(0);
    let mut exposure = ExposureConfig::default();
    if let Some(e) = file.get("exposure") {
        exposure = serde_json::from_value(e.clone()).context("config field `exposure`")?;
    }
    exposure.window = window.unwrap_or(exposure.window);
    exposure.rate = rate.unwrap_or(exposure.rate);
    let scene = AnalyticScene::preset(preset)?;
    prepare_out(out, common.force)?;
    let start = Instant::now();
    let ds = synthesize(&scene, preset, seed, exposure)?;
    write_dataset(out, &ds)?;
    let mut m = RunManifest::new(
        "synth",
        seed,
        serde_json::json!({ "preset": preset, "exposure": exposure, "presets": PRESETS }),
    );
    m.timings.push(("synth".into(), start.elapsed().as_secs_f64()));
    m.write(out)?;
    println!(
        "wrote {} frames ({}x{}) of `{preset}` to {}",
        ds.num_frames(),
        ds.meta.width,
        ds.meta.height,
        out.display()
    );
    Ok(())
}

fn resolve_train_config(common: &Common, file: &Value) -> anyhow::Result<TrainConfig> {
    let profile = match (&common.profile, file.get("profile").and_then(Value::as_str)) {
        (Some(p), _) => p.parse::<Profile>()?,
        (None, Some(p)) => p.parse::<Profile>()?,
        (None, None) => Profile::Desk,
    };
    let mut v = serde_json::to_value(TrainConfig::for_profile(profile))?;
    let mut overlay = file.clone();
    if let Value::Object(o) = &mut overlay {
        o.remove("num_frames");
        o.remove("profile");
    }
    merge(&mut v, &overlay);
    let mut cfg: TrainConfig = serde_json::from_value(v).context("invalid training config")?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(common: &Common, data: &Path, resume: bool) -> anyhow::Result<()> {
    let file = read_config(common.config.as_deref())?;
    let cfg = resolve_train_config(common, &file)?;
    let out = out_dir(common)?;
    let ds = read_dataset(data)?;
    if let Some(n) = file.get("num_frames").and_then(Value::as_u64) {
        if n as usize != ds.num_frames() {
            bail!("config expects {n} frames but dataset {} has {}", data.display(), ds.num_frames());
        }
    }
    let mut trainer = if resume {
        Trainer::resume(cfg.clone(), &ds, out)?
    } else {
        prepare_out(out, common.force)?;
        let mut t = Trainer::new(cfg.clone(), &ds)?;
        t.set_output(out)?;
        t
    };
    let mut manifest = RunManifest::new(
        "train",
        cfg.seed,
        serde_json::json!({ "train": cfg, "dataset": data, "resume": resume }),
    );
    manifest.write(out)?;
    let summary = trainer.run()?;
    manifest.timings.push(("bri".into(), summary.bri_seconds));
    manifest.timings.push(("mdd".into(), summary.mdd_seconds));
    manifest.write(out)?;
    println!(
        "trained {} + {} iterations; final {}; checksum {:016x}",
        summary.bri_iters, summary.mdd_iters, summary.final_loss, summary.checksum
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    poses: &str,
    pose_file: Option<&Path>,
    frames: Option<Vec<usize>>,
    samples: Option<usize>,
) -> anyhow::Result<()> {
    let out = out_dir(common)?;
    let model = Model::load(checkpoint)?;
    let ds = read_dataset(data)?;
    let n = model.num_frames();
    if n != ds.num_frames() {
        bail!("checkpoint has {n} frames but dataset {} has {}", data.display(), ds.num_frames());
    }
    let pose_list = match poses {
        "file" => {
            let p = pose_file.ok_or_else(|| anyhow!("--poses file needs --pose-file"))?;
            read_poses(p, ds.meta.intrinsics)?
        }
        _ => ds.poses_corrupt.clone(),
    };
    let frames = frames.unwrap_or_else(|| match poses {
        "eval" => eval_frames(n),
        _ => (0..pose_list.len().min(n)).collect(),
    });
    for &t in &frames {
        if t >= n || t >= pose_list.len() {
            return Err(Error::FrameOutOfRange {
                index: t,
                count: n.min(pose_list.len()),
            }
            .into());
        }
    }
    let file = read_config(common.config.as_deref())?;
    let samples = samples
        .or_else(|| file.get("n_samples").and_then(Value::as_u64).map(|x| x as usize))
        .unwrap_or_else(|| TrainConfig::for_profile(Profile::Desk).n_samples);
    prepare_out(out, common.force)?;
    let start = Instant::now();
    for &t in &frames {
        let f = infer_frame(&model, &pose_list[t], t, ds.meta.width, ds.meta.height, samples, ds.meta.near, ds.meta.far)?;
        write_png_rgb(&out.join(format!("frame_{t:04}.png")), &f.image)?;
        write_mask(&out.join(format!("mask_{t:04}.png")), &f.mask)?;
    }
    let mut m = RunManifest::new(
        "render",
        common.seed.unwrap_or(0),
        serde_json::json!({ "checkpoint": checkpoint, "dataset": data, "poses": poses, "pose_file": pose_file,
                            "frames": frames, "samples": samples }),
    );
    m.timings.push(("render".into(), start.elapsed().as_secs_f64()));
    m.write(out)?;
    println!("rendered {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn rendered_frames(dir: &Path) -> anyhow::Result<Vec<usize>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".png")) {
            frames.push(num.parse::<usize>().with_context(|| format!("bad frame file name {name}"))?);
        }
    }
    frames.sort_unstable();
    if frames.is_empty() {
        bail!("no frame_NNNN.png files in {}", dir.display());
    }
    Ok(frames)
}

fn cmd_eval(common: &Common, renders: &Path, data: &Path) -> anyhow::Result<()> {
    let out = common.out.clone().unwrap_or_else(|| renders.to_owned());
    let ds = read_dataset(data)?;
    let frames = rendered_frames(renders)?;
    let mut pred = Vec::new();
    let mut masks: Vec<Mask> = Vec::new();
    for &t in &frames {
        if t >= ds.num_frames() {
            return Err(Error::FrameOutOfRange {
                index: t,
                count: ds.num_frames(),
            }
            .into());
        }
        pred.push(read_png_rgb(&renders.join(format!("frame_{t:04}.png")))?);
        let mp = renders.join(format!("mask_{t:04}.png"));
        if mp.exists() {
            masks.push(read_mask(&mp)?);
        }
    }
    let truth: Vec<Image> = frames.iter().map(|&t| ds.sharp[t].clone()).collect();
    let blurry: Vec<Image> = frames.iter().map(|&t| ds.blurry[t].clone()).collect();
    let regions: Vec<Mask> = frames.iter().map(|&t| ds.mask_true[t].clone()).collect();
    let regions = regions.iter().all(|m| m.count() > 0).then_some(regions.as_slice());
    let report = MetricReport::compute("render vs sharp", &frames, &pred, &truth, regions)?;
    let baseline = MetricReport::compute("blurry input vs sharp", &frames, &blurry, &truth, regions)?;
    let iou = if masks.len() == frames.len() {
        let mut s = 0.0;
        for (m, &t) in masks.iter().zip(&frames) {
            s += mask_iou(m, &ds.mask_true[t])?;
        }
        Some(s / frames.len() as f64)
    } else {
        None
    };
    fs::create_dir_all(&out)?;
    let mut text = report.to_text() + "\n" + &baseline.to_text();
    text += &format!("\ngain_db {:.4}\n", report.mean_psnr - baseline.mean_psnr);
    if let Some(i) = iou {
        text += &format!("mask_iou {i:.4}\n");
    }
    fs::write(out.join("metrics.txt"), &text)?;
    fs::write(out.join("metrics.json"), report.to_json()? + "\n")?;
    fs::write(out.join("baseline.json"), baseline.to_json()? + "\n")?;
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(common: &Common, points: usize, fault: Option<&str>) -> anyhow::Result<()> {
    let seed = common.seed.unwrap_or(0);
    if let Some(f) = fault {
        if !op_names().contains(&f) {
            bail!("unknown operation `{f}`; known: {}", op_names().join(", "));
        }
    }
    let mut reports: Vec<CheckReport> = run_op_suite(seed, points, 1e-4, fault)?;
    reports.extend(end_to_end_gradchecks(seed, 1e-3)?);
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &reports {
        println!(
            "{:<width$}  max_rel_err {:.3e}  tol {:.0e}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Numerical(format!("gradient check failed for: {}", failed.join(", "))).into());
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}
