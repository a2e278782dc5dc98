//! `talkhead`: generate synthetic scenes, train both stages, render, evaluate,
//! self-verify and benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numeric
//! failure. Every failure prints one line `error[<kind>]: <message>` on
//! stderr.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use talkhead::attention::ConditionTrack;
use talkhead::checkpoint::Checkpoint;
use talkhead::config::KeyValues;
use talkhead::pipeline::bench::{bench_attention, bench_csv, ratio_throughput, BenchOptions, DEFAULT_NS, TABLE_RATIOS};
use talkhead::pipeline::eval::{evaluate_scene, heldout_psnr, neutral_l1};
use talkhead::pipeline::render::{render_sequence, Renderer};
use talkhead::pipeline::scene::{generate_scene, load_cameras, validate_layout, SceneSpec, SyntheticScene};
use talkhead::pipeline::train::{loss_csv, train_deform, train_static, TrainConfig};
use talkhead::verify::{run_all, VerifyOptions};

use manifest::{RunManifest, VERSION};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOSS_FILE: &str = "loss.csv";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Validation(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Validation(m) => ("validation", m),
            CliError::Numeric(m) => ("numeric", m),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}

impl From<talkhead::Error> for CliError {
    fn from(e: talkhead::Error) -> Self {
        match e {
            talkhead::Error::NonFinite(_) | talkhead::Error::NonScalarLoss(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "talkhead", version = VERSION, about = "Audio-driven Gaussian talking-head toolkit")]
struct Cli {
    /// Worker threads for parallel rendering (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory
    Gen(GenArgs),
    /// Train stage 1 (canonical cloud) or stage 2 (audio deformation)
    Train(TrainArgs),
    /// Render a condition track to PNG and raw float frames
    Render(RenderArgs),
    /// Evaluate a checkpoint on a scene's test split
    Eval(EvalArgs),
    /// Run gradient checks, oracle equivalences and invariants
    Verify(VerifyArgs),
    /// Time agent versus full attention
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,

    /// Write into an existing non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene spec (`scene.* = value` lines); defaults when omitted
    #[arg(long, visible_alias = "spec")]
    config: Option<PathBuf>,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,

    /// Scene directory written by `gen`
    #[arg(long)]
    scene: PathBuf,

    /// Training config (`train.*`, `loss.*`, `model.*`, `attention.*`, `triplane.*`)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Stage-1 checkpoint (file or `train --stage 1` output directory)
    #[arg(long = "static")]
    static_ckpt: Option<PathBuf>,

    /// Iterations for this stage, overriding the config
    #[arg(long)]
    iterations: Option<usize>,

    /// Overrides `train.seed` (default 42)
    #[arg(long)]
    seed: Option<u64>,

    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Checkpoint file or training output directory
    #[arg(long)]
    ckpt: PathBuf,

    /// Condition track (`.f32` track file)
    #[arg(long)]
    track: PathBuf,

    /// Camera file: one camera per line
    #[arg(long)]
    cameras: PathBuf,

    /// Use this camera of the file for every frame
    #[arg(long)]
    camera: Option<usize>,

    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,

    #[arg(long)]
    scene: PathBuf,

    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Randomized cases per suite
    #[arg(long, default_value_t = 100)]
    cases: usize,

    /// Random scenes per renderer-equivalence suite
    #[arg(long, default_value_t = 50)]
    render_scenes: usize,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Also write the report and a manifest here
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, requires = "out")]
    force: bool,

    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Spatial token counts
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_NS.to_vec())]
    ns: Vec<usize>,

    /// Agent ratios
    #[arg(long, value_delimiter = ',', default_values_t = TABLE_RATIOS.to_vec())]
    ratios: Vec<f64>,

    /// Attention width
    #[arg(long, default_value_t = 64)]
    d: usize,

    /// Timing repeats (minimum is reported)
    #[arg(long, default_value_t = 3)]
    repeats: usize,

    /// Count full-attention MACs without timing it
    #[arg(long)]
    skip_full_timing: bool,

    /// Points for the deformation-feature throughput table (0 disables it)
    #[arg(long, default_value_t = 16384)]
    throughput_points: usize,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    #[command(flatten)]
    out: OutArgs,
}

/// Create `dir`, refusing a non-empty existing one unless `force`.
fn prepare_out(out: &OutArgs) -> CliResult<&Path> {
    let dir = out.out.as_path();
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Validation(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?
            .next()
            .is_some();
        if non_empty && !out.force {
            return Err(CliError::Validation(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Reject keys that no known config field reads.
fn check_keys(kv: &KeyValues, known: &KeyValues, path: &Path) -> CliResult<()> {
    let unknown: Vec<&str> = kv.keys().filter(|k| known.get_str(k).is_none()).collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{}: unknown keys {}",
            path.display(),
            unknown.join(", ")
        )))
    }
}

fn load_config(path: &Path, known: &KeyValues) -> CliResult<KeyValues> {
    if !path.is_file() {
        return Err(CliError::Validation(format!("config file {} not found", path.display())));
    }
    let kv = KeyValues::load(path)?;
    check_keys(&kv, known, path)?;
    Ok(kv)
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_checkpoint(p: &Path) -> CliResult<Checkpoint> {
    let path = checkpoint_path(p);
    if !path.is_file() {
        return Err(CliError::Validation(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(&path)?)
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    Ok(talkhead::io::write_atomic(path, text.as_bytes())?)
}

fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    let mut spec = SceneSpec::default();
    let mut known = KeyValues::default();
    spec.write(&mut known);
    if let Some(path) = &args.config {
        spec.read(&load_config(path, &known)?)?;
    }
    let scene = generate_scene(&spec, args.seed)?;
    let dir = prepare_out(&args.out)?;
    scene.save(dir)?;
    let problems = validate_layout(dir);
    if !problems.is_empty() {
        return Err(CliError::Validation(format!("generated scene is invalid: {}", problems.join("; "))));
    }
    let mut resolved = KeyValues::default();
    spec.write(&mut resolved);
    let mut m = RunManifest::new("gen", Some(args.seed), resolved);
    for a in ["scene.txt", "cameras.txt", "points.txt", "frames.txt", "track.f32", "neutral", "frames", "masks"] {
        m.artifact(a);
    }
    m.write(dir)?;
    println!("scene: {} frames, {} cameras -> {}", spec.frames, spec.cameras, dir.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut config = TrainConfig::default();
    let mut known = KeyValues::default();
    config.write(&mut known);
    if let Some(path) = &args.config {
        config.read(&load_config(path, &known)?)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.iterations {
        match args.stage {
            1 => config.static_iterations = n,
            _ => config.deform_iterations = n,
        }
    }
    config.validate()?;
    let static_ckpt = match (args.stage, &args.static_ckpt) {
        (2, None) => return Err(CliError::Usage("stage 2 needs --static <stage-1 checkpoint>".into())),
        (2, Some(p)) => Some(load_checkpoint(p)?),
        (_, Some(_)) => return Err(CliError::Usage("--static only applies to --stage 2".into())),
        _ => None,
    };
    if !args.scene.is_dir() {
        return Err(CliError::Validation(format!("scene directory {} not found", args.scene.display())));
    }
    let scene = SyntheticScene::load(&args.scene)?;
    let dir = prepare_out(&args.out)?;
    let out = match &static_ckpt {
        None => train_static(&scene, &config)?,
        Some(ck) => train_deform(&scene, &config, ck)?,
    };
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join(LOSS_FILE), &loss_csv(&out.log))?;
    let mut resolved = KeyValues::default();
    config.write(&mut resolved);
    let mut m = RunManifest::new(&format!("train --stage {}", args.stage), Some(config.seed), resolved);
    m.artifact(CHECKPOINT_FILE);
    m.artifact(LOSS_FILE);
    m.write(dir)?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!(
            "stage {}: {} iterations, loss {:.6} -> {:.6}",
            args.stage,
            out.log.len(),
            first.total,
            last.total
        );
    } else {
        println!("stage {}: 0 iterations", args.stage);
    }
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    if !args.track.is_file() {
        return Err(CliError::Validation(format!("track {} not found", args.track.display())));
    }
    let track = ConditionTrack::load(&args.track)?;
    let mut cameras = load_cameras(&args.cameras)?;
    if let Some(k) = args.camera {
        if k >= cameras.len() {
            return Err(CliError::Usage(format!(
                "--camera {k} out of range: {} has {} cameras",
                args.cameras.display(),
                cameras.len()
            )));
        }
        cameras = vec![cameras.swap_remove(k)];
    }
    let renderer = Renderer::from_checkpoint(&ckpt)?;
    if renderer.model.esaa.audio_width != track.audio_width() && renderer.has_deform() {
        return Err(CliError::Validation(format!(
            "track audio width {} does not match the checkpoint ({})",
            track.audio_width(),
            renderer.model.esaa.audio_width
        )));
    }
    let frames = render_sequence(&renderer, &track, &cameras)?;
    let dir = prepare_out(&args.out)?;
    let mut m = RunManifest::new("render", None, ckpt.meta.clone());
    for (t, img) in frames.iter().enumerate() {
        img.save_png(&dir.join(format!("{t:04}.png")))?;
        img.save_raw(&dir.join(format!("{t:04}.f32")))?;
        m.artifact(format!("{t:04}.png"));
        m.artifact(format!("{t:04}.f32"));
    }
    m.write(dir)?;
    println!("rendered {} frames -> {}", frames.len(), dir.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let scene = SyntheticScene::load(&args.scene)?;
    let renderer = Renderer::from_checkpoint(&ckpt)?;
    let report = evaluate_scene(&renderer, &scene)?;
    let dir = prepare_out(&args.out)?;
    write_file(&dir.join("metrics.csv"), &report.metrics.to_csv())?;
    let mut summary = KeyValues::default();
    summary.set("eval.test_frames", report.metrics.psnr.len());
    summary.set("eval.psnr", report.metrics.mean_psnr());
    summary.set("eval.ssim", report.metrics.mean_ssim());
    summary.set("eval.keypoint_distance", report.metrics.mean_keypoint_distance());
    summary.set("eval.aperture_pearson", report.pearson);
    summary.set("eval.neutral_l1", neutral_l1(&renderer, &scene)?);
    summary.set("eval.heldout_psnr", heldout_psnr(&renderer, &scene)?);
    write_file(&dir.join("summary.txt"), &summary.to_text())?;
    let mut m = RunManifest::new("eval", None, ckpt.meta.clone());
    m.artifact("metrics.csv");
    m.artifact("summary.txt");
    m.write(dir)?;
    print!("{}", summary.to_text());
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    if args.cases == 0 || args.render_scenes == 0 {
        return Err(CliError::Usage("--cases and --render-scenes must be positive".into()));
    }
    talkhead::graph::set_fault_injection(args.inject_fault);
    let opts = VerifyOptions {
        cases: args.cases,
        render_scenes: args.render_scenes,
        seed: args.seed,
    };
    let report = run_all(&opts)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        let out = OutArgs {
            out: out.clone(),
            force: args.force,
        };
        let dir = prepare_out(&out)?;
        write_file(&dir.join("verify.txt"), &text)?;
        let mut m = RunManifest::new("verify", Some(args.seed), talkhead::verify::report_meta(&opts));
        m.artifact("verify.txt");
        m.write(dir)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{} of {} verification suites failed",
            report.failures(),
            report.suites.len()
        )))
    }
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    if args.ns.is_empty() || args.ratios.is_empty() {
        return Err(CliError::Usage("--ns and --ratios must be non-empty".into()));
    }
    if args.ns.contains(&0) || args.d == 0 {
        return Err(CliError::Usage("--ns entries and --d must be positive".into()));
    }
    let opts = BenchOptions {
        ns: args.ns.clone(),
        ratios: args.ratios.clone(),
        d_model: args.d,
        repeats: args.repeats,
        seed: args.seed,
        time_full: !args.skip_full_timing,
    };
    let rows = bench_attention(&opts)?;
    let dir = prepare_out(&args.out)?;
    let csv = bench_csv(&rows);
    write_file(&dir.join("bench.csv"), &csv)?;
    let mut resolved = KeyValues::default();
    resolved.set("bench.ns", join(&args.ns));
    resolved.set("bench.ratios", join(&args.ratios));
    resolved.set("bench.d", args.d);
    resolved.set("bench.repeats", args.repeats);
    resolved.set("bench.throughput_points", args.throughput_points);
    let mut m = RunManifest::new("bench", Some(args.seed), resolved);
    m.artifact("bench.csv");
    print!("{csv}");
    if args.throughput_points > 0 {
        let rows = ratio_throughput(&args.ratios, args.throughput_points, 24, 8, args.repeats, args.seed)?;
        let mut t = String::from("ratio,agents,points_per_sec\n");
        for r in &rows {
            t.push_str(&format!("{},{},{:.3}\n", r.ratio, r.agents, r.points_per_sec));
        }
        write_file(&dir.join("throughput.csv"), &t)?;
        m.artifact("throughput.csv");
        print!("{t}");
    }
    m.write(dir)?;
    Ok(())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.line());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
