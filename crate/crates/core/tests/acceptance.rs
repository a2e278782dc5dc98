//! Acceptance criteria, one PASS/FAIL line each. Runs the full seeded
//! training schedule, so expect several minutes in the optimized test
//! profile.

use std::process::ExitCode;
use std::time::Instant;

use talkhead::attention::{ppe, AgentConfig};
use talkhead::checkpoint::Checkpoint;
use talkhead::pipeline::bench::{complexity_sweep, fit_exponent, ratio_throughput, speedup, DEFAULT_NS, TABLE_RATIOS};
use talkhead::pipeline::eval::{evaluate_scene, heldout_psnr, neutral_l1};
use talkhead::pipeline::render::{render_sequence, Renderer};
use talkhead::pipeline::scene::{generate_scene, SceneSpec, SyntheticScene};
use talkhead::pipeline::train::{train_deform, train_static, TrainConfig};
use talkhead::pipeline::DEFORM_PREFIXES;
use talkhead::verify::{gradient_suites, renderer_oracle_suites, SuiteResult, VerifyOptions};

const SEED: u64 = 42;

const GRADIENT_CASES: usize = 100;
const GRADIENT_BUDGET_SECS: f64 = 300.0;
const ORACLE_SCENES: usize = 50;

const AGENT_EXPONENT_MAX: f64 = 1.1;
const FULL_EXPONENT_MIN: f64 = 1.9;
const SPEEDUP_N: usize = 4096;
const SPEEDUP_D: usize = 64;
const SPEEDUP_RATIO: f64 = 0.005;
const SPEEDUP_MIN: f64 = 5.0;
const COMPLEXITY_BUDGET_SECS: f64 = 120.0;

const IDENTITY_FRAMES: usize = 50;

const STAGE1_ITERATIONS: usize = 2000;
const STAGE1_L1_RATIO_MAX: f64 = 0.1;
const HELDOUT_PSNR_MIN: f64 = 28.0;
const STAGE1_BUDGET_SECS: f64 = 1800.0;

const STAGE2_ITERATIONS: usize = 2000;
const PEARSON_MIN: f64 = 0.8;
const STAGE2_BUDGET_SECS: f64 = 2700.0;

const THROUGHPUT_POINTS: usize = 16384;
const THROUGHPUT_REPEATS: usize = 5;
/// Short stage-2 runs per ratio for the (unasserted) quality column.
const QUALITY_ITERATIONS: usize = 300;

const DETERMINISM_ITERATIONS: usize = 40;

const PPE_PERIOD: usize = 25;
const PPE_WIDTH: usize = 64;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn suites_summary(suites: &[SuiteResult]) -> (bool, String) {
    let failed: Vec<&str> = suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
    let min_cases = suites.iter().map(|s| s.cases).min().unwrap_or(0);
    let worst = suites
        .iter()
        .map(|s| (s.max_error / s.tolerance.max(f64::MIN_POSITIVE), s))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, s)| format!("{} max_err={:.3e} tol={:.1e}", s.name, s.max_error, s.tolerance))
        .unwrap_or_default();
    let detail = format!(
        "{} suites, min cases {}, worst {}{}",
        suites.len(),
        min_cases,
        worst,
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
    );
    (failed.is_empty(), detail)
}

fn gradient_integrity() -> Outcome {
    let opts = VerifyOptions {
        cases: GRADIENT_CASES,
        render_scenes: ORACLE_SCENES,
        seed: SEED,
    };
    let start = Instant::now();
    let suites = gradient_suites(&opts).expect("gradient suites");
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = suites_summary(&suites);
    let min_cases = suites.iter().map(|s| s.cases).min().unwrap_or(0);
    Outcome {
        name: "gradient integrity",
        passed: ok && min_cases >= GRADIENT_CASES && secs < GRADIENT_BUDGET_SECS,
        detail: format!("{detail}, {secs:.1}s (budget {GRADIENT_BUDGET_SECS}s)"),
    }
}

fn renderer_oracle() -> Outcome {
    let opts = VerifyOptions {
        cases: GRADIENT_CASES,
        render_scenes: ORACLE_SCENES,
        seed: SEED,
    };
    let suites = renderer_oracle_suites(&opts).expect("renderer oracle suites");
    let (ok, detail) = suites_summary(&suites);
    let min_cases = suites.iter().map(|s| s.cases).min().unwrap_or(0);
    Outcome {
        name: "renderer oracle equivalence",
        passed: ok && min_cases >= ORACLE_SCENES,
        detail,
    }
}

fn attention_complexity() -> Outcome {
    let start = Instant::now();
    let agents = AgentConfig {
        ratio: SPEEDUP_RATIO,
        d_model: SPEEDUP_D,
        ..AgentConfig::default()
    }
    .agent_count(SPEEDUP_N);
    let sweep = complexity_sweep(&DEFAULT_NS, agents, SPEEDUP_D, SEED).expect("complexity sweep");
    let ns: Vec<f64> = sweep.iter().map(|r| r.0 as f64).collect();
    let agent: Vec<f64> = sweep.iter().map(|r| r.1 as f64).collect();
    let full: Vec<f64> = sweep.iter().map(|r| r.2 as f64).collect();
    let (ea, ef) = (fit_exponent(&ns, &agent), fit_exponent(&ns, &full));
    let (full_secs, agent_secs, n) = speedup(SPEEDUP_N, SPEEDUP_RATIO, SPEEDUP_D, 3, SEED).expect("speedup");
    let sp = full_secs / agent_secs;
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        name: "agent attention complexity",
        passed: ea <= AGENT_EXPONENT_MAX && ef >= FULL_EXPONENT_MIN && sp >= SPEEDUP_MIN && secs < COMPLEXITY_BUDGET_SECS,
        detail: format!(
            "n={agents} exponent agent={ea:.4} (<= {AGENT_EXPONENT_MAX}) full={ef:.4} (>= {FULL_EXPONENT_MIN}); \
             speedup at N={SPEEDUP_N} ({n} agents) {sp:.1}x (>= {SPEEDUP_MIN}x); {secs:.1}s"
        ),
    }
}

fn zero_deform_identity(scene: &SyntheticScene, stage2: &Checkpoint) -> Outcome {
    let mut ckpt = stage2.clone();
    for prefix in DEFORM_PREFIXES {
        ckpt.params.zero_prefix(prefix);
    }
    let r = Renderer::from_checkpoint(&ckpt).expect("renderer");
    let frames = IDENTITY_FRAMES.min(scene.track.len());
    let track = talkhead::attention::ConditionTrack::new(
        scene.track.audio[..frames].to_vec(),
        scene.track.blink[..frames].to_vec(),
        scene.track.pose[..frames].to_vec(),
    )
    .expect("track");
    let cameras: Vec<_> = (0..frames).map(|t| scene.cameras[scene.frame_cameras[t]].clone()).collect();
    let seq = render_sequence(&r, &track, &cameras).expect("render");
    let mut differing = 0;
    for (img, cam) in seq.iter().zip(&cameras) {
        let base = r.render_static(cam).expect("static render");
        if !img.data.iter().zip(&base.data).all(|(a, b)| a.to_bits() == b.to_bits()) {
            differing += 1;
        }
    }
    Outcome {
        name: "zero-deformation identity",
        passed: differing == 0 && frames == IDENTITY_FRAMES,
        detail: format!("{frames} frames, {differing} differ bitwise from the static render"),
    }
}

fn stage1(scene: &SyntheticScene, config: &TrainConfig) -> (Outcome, Checkpoint) {
    let start = Instant::now();
    let initial = train_static(
        scene,
        &TrainConfig {
            static_iterations: 0,
            ..config.clone()
        },
    )
    .expect("initial state");
    let l1_0 = neutral_l1(&Renderer::from_checkpoint(&initial.checkpoint).unwrap(), scene).unwrap();
    let out = train_static(scene, config).expect("stage 1");
    let secs = start.elapsed().as_secs_f64();
    let r = Renderer::from_checkpoint(&out.checkpoint).unwrap();
    let l1 = neutral_l1(&r, scene).unwrap();
    let held = heldout_psnr(&r, scene).unwrap();
    let ratio = l1 / l1_0;
    (
        Outcome {
            name: "stage-1 convergence",
            passed: ratio <= STAGE1_L1_RATIO_MAX && held >= HELDOUT_PSNR_MIN && secs < STAGE1_BUDGET_SECS,
            detail: format!(
                "{} iterations, L1 {l1_0:.5} -> {l1:.5} (ratio {ratio:.4} <= {STAGE1_L1_RATIO_MAX}), \
                 held-out PSNR {held:.2} dB (>= {HELDOUT_PSNR_MIN}), {secs:.0}s",
                config.static_iterations
            ),
        },
        out.checkpoint,
    )
}

fn stage2(scene: &SyntheticScene, config: &TrainConfig, s1: &Checkpoint) -> (Outcome, Checkpoint) {
    let start = Instant::now();
    let out = train_deform(scene, config, s1).expect("stage 2");
    let secs = start.elapsed().as_secs_f64();
    let r = Renderer::from_checkpoint(&out.checkpoint).unwrap();
    let report = evaluate_scene(&r, scene).expect("evaluate");
    (
        Outcome {
            name: "stage-2 audio-motion coupling",
            passed: report.pearson >= PEARSON_MIN && secs < STAGE2_BUDGET_SECS,
            detail: format!(
                "{} iterations, Pearson r {:.4} (>= {PEARSON_MIN}) over {} test frames, PSNR {:.2} dB, {secs:.0}s",
                config.deform_iterations,
                report.pearson,
                report.apertures.len(),
                report.metrics.mean_psnr()
            ),
        },
        out.checkpoint,
    )
}

fn ratio_trend(scene: &SyntheticScene, config: &TrainConfig, s1: &Checkpoint) -> Outcome {
    let rows = ratio_throughput(
        &TABLE_RATIOS,
        THROUGHPUT_POINTS,
        config.model.triplane.output_width(),
        scene.spec.audio_width,
        THROUGHPUT_REPEATS,
        SEED,
    )
    .expect("throughput");
    let monotone = rows.windows(2).all(|w| w[1].points_per_sec < w[0].points_per_sec);
    let mut parts = Vec::new();
    for row in &rows {
        let cfg = TrainConfig {
            deform_iterations: QUALITY_ITERATIONS,
            model: talkhead::pipeline::ModelConfig {
                agent: AgentConfig {
                    ratio: row.ratio,
                    ..config.model.agent
                },
                ..config.model.clone()
            },
            ..config.clone()
        };
        let out = train_deform(scene, &cfg, s1).expect("short stage 2");
        let r = Renderer::from_checkpoint(&out.checkpoint).unwrap();
        let report = evaluate_scene(&r, scene).expect("evaluate");
        parts.push(format!(
            "{}%: {} agents {:.0} pts/s r={:.3}",
            row.ratio * 100.0,
            row.agents,
            row.points_per_sec,
            report.pearson
        ));
    }
    Outcome {
        name: "agent-ratio throughput trend",
        passed: monotone,
        detail: format!(
            "{} points; {} (throughput asserted decreasing, sync r reported only)",
            THROUGHPUT_POINTS,
            parts.join("; ")
        ),
    }
}

fn determinism(scene: &SyntheticScene, config: &TrainConfig) -> Outcome {
    let short = TrainConfig {
        static_iterations: DETERMINISM_ITERATIONS,
        deform_iterations: DETERMINISM_ITERATIONS / 2,
        ..config.clone()
    };
    let a1 = train_static(scene, &short).unwrap().checkpoint;
    let b1 = train_static(scene, &short).unwrap().checkpoint;
    let a2 = train_deform(scene, &short, &a1).unwrap().checkpoint;
    let b2 = train_deform(scene, &short, &b1).unwrap().checkpoint;
    let same_ckpt = a1.to_bytes() == b1.to_bytes() && a2.to_bytes() == b2.to_bytes();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    a2.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let before = Renderer::from_checkpoint(&a2).unwrap();
    let after = Renderer::from_checkpoint(&loaded).unwrap();
    let cams = [scene.cameras[0].clone()];
    let x = render_sequence(&before, &scene.track, &cams).unwrap();
    let y = render_sequence(&after, &scene.track, &cams).unwrap();
    let same_render = x
        .iter()
        .zip(&y)
        .all(|(p, q)| p.data.iter().zip(&q.data).all(|(u, v)| u.to_bits() == v.to_bits()));
    Outcome {
        name: "determinism and round trip",
        passed: same_ckpt && same_render,
        detail: format!(
            "repeat checkpoints identical: {same_ckpt}; {} frames identical after save/load: {same_render}; threads={}",
            x.len(),
            rayon::current_num_threads()
        ),
    }
}

fn ppe_exactness() -> Outcome {
    let mut bad = 0;
    let mut checked = 0;
    for t in 0..10 * PPE_PERIOD {
        for k in 1..4 {
            checked += 1;
            if ppe(t, PPE_WIDTH, PPE_PERIOD).unwrap() != ppe(t + k * PPE_PERIOD, PPE_WIDTH, PPE_PERIOD).unwrap() {
                bad += 1;
            }
        }
    }
    let zero = ppe(0, PPE_WIDTH, PPE_PERIOD).unwrap();
    let exact = zero.iter().enumerate().all(|(c, &v)| v == if c % 2 == 0 { 0.0 } else { 1.0 });
    Outcome {
        name: "periodic encoding exactness",
        passed: bad == 0 && exact,
        detail: format!("{checked} periodic pairs, {bad} unequal; t=0 exact 0/1 pattern: {exact}"),
    }
}

fn main() -> ExitCode {
    // libtest-style filters (`cargo test foo`) select nothing here
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && a != "acceptance") {
        return ExitCode::SUCCESS;
    }
    let report = |o: &Outcome| println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    let mut outcomes = Vec::new();
    let mut run = |o: Outcome| {
        report(&o);
        outcomes.push(o.passed);
    };

    run(ppe_exactness());
    run(gradient_integrity());
    run(renderer_oracle());
    run(attention_complexity());

    let scene = generate_scene(&SceneSpec::default(), SEED).expect("scene");
    let config = TrainConfig {
        static_iterations: STAGE1_ITERATIONS,
        deform_iterations: STAGE2_ITERATIONS,
        seed: SEED,
        ..TrainConfig::default()
    };
    let (o, s1) = stage1(&scene, &config);
    run(o);
    let (o, s2) = stage2(&scene, &config, &s1);
    run(o);
    run(zero_deform_identity(&scene, &s2));
    run(ratio_trend(&scene, &config, &s1));
    run(determinism(&scene, &config));

    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} criteria, {} failed", outcomes.len(), failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
