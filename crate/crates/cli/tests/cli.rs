use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use talkhead::attention::ConditionTrack;
use talkhead::checkpoint::Checkpoint;
use talkhead::pipeline::render::{render_sequence, Renderer};
use talkhead::pipeline::scene::load_cameras;

const SMALL_SPEC: &str = "scene.frames = 24\nscene.points = 160\nscene.width = 32\nscene.height = 32\nscene.focal = 45\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_talkhead"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn talkhead")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_scene(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.txt");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let out = dir.join("scene");
    let o = run(&["gen", "--spec", s(&spec), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

/// Sorted (relative path, FNV-1a hash) of every file below `dir`.
fn checksums(dir: &Path) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let h = fs::read(&p)
                    .unwrap()
                    .iter()
                    .fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3));
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), h));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_scene(tmp.path());
    let b = tmp.path().join("again");
    let o = run(&["gen", "--spec", s(&tmp.path().join("spec.txt")), "--out", s(&b)]);
    assert!(o.status.success());
    let (ca, cb) = (checksums(&a), checksums(&b));
    assert!(ca.len() > 24 * 2);
    assert_eq!(ca, cb);
    let c = tmp.path().join("other_seed");
    let o = run(&["gen", "--spec", s(&tmp.path().join("spec.txt")), "--seed", "7", "--out", s(&c)]);
    assert!(o.status.success());
    assert_ne!(ca, checksums(&c));
}

#[test]
fn gen_layout_has_documented_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_scene(tmp.path());
    for f in ["scene.txt", "cameras.txt", "points.txt", "frames.txt", "track.f32", "manifest.txt"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read_dir(dir.join("frames")).unwrap().count(), 24);
    assert_eq!(fs::read_dir(dir.join("masks")).unwrap().count(), 24);
    assert!(talkhead::pipeline::scene::validate_layout(&dir).is_empty());
    fs::remove_file(dir.join("frames/0003.f32")).unwrap();
    assert!(!talkhead::pipeline::scene::validate_layout(&dir).is_empty());
}

#[test]
fn missing_spec_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_spec.txt");
    let o = run(&["gen", "--spec", s(&missing), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_spec.txt"), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[validation]"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.txt");
    fs::write(&spec, "scene.framez = 3\n").unwrap();
    let o = run(&["gen", "--spec", s(&spec), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scene.framez"));
}

#[test]
fn refuses_non_empty_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_scene(tmp.path());
    let spec = tmp.path().join("spec.txt");
    let o = run(&["gen", "--spec", s(&spec), "--out", s(&dir)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["gen", "--spec", s(&spec), "--out", s(&dir), "--force"]);
    assert!(o.status.success());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--stage", "3", "--scene", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(run(&["--threads", "0", "verify"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let v = run(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn stage_two_requires_static_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_scene(tmp.path());
    let out = tmp.path().join("t2");
    let o = run(&["train", "--stage", "2", "--scene", s(&scene), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--static"));
    assert!(!out.exists());
    let o = run(&["train", "--stage", "2", "--scene", s(&scene), "--static", s(&tmp.path().join("nope")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_render_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_scene(tmp.path());
    let t1 = tmp.path().join("t1");
    let o = run(&["train", "--stage", "1", "--scene", s(&scene), "--iterations", "12", "--out", s(&t1)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(t1.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);

    // same seed, same bytes
    let t1b = tmp.path().join("t1b");
    let o = run(&["train", "--stage", "1", "--scene", s(&scene), "--iterations", "12", "--out", s(&t1b)]);
    assert!(o.status.success());
    assert_eq!(checksums(&t1), checksums(&t1b));

    let t2 = tmp.path().join("t2");
    let o = run(&[
        "train", "--stage", "2", "--scene", s(&scene), "--static", s(&t1), "--iterations", "6", "--out", s(&t2),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(t2.join("loss.csv")).unwrap().lines().count(), 1 + 6);
    let manifest = fs::read_to_string(t2.join("manifest.txt")).unwrap();
    assert!(manifest.contains("run.command = train --stage 2"));
    assert!(manifest.contains("train.deform_iterations = 6"));

    let r = tmp.path().join("render");
    let track = scene.join("track.f32");
    let cams = scene.join("cameras.txt");
    let o = run(&[
        "render", "--ckpt", s(&t2), "--track", s(&track), "--cameras", s(&cams), "--camera", "1", "--out", s(&r),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pngs = fs::read_dir(&r).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
    assert_eq!(pngs, 24);

    let renderer = Renderer::from_checkpoint(&Checkpoint::load(&t2.join("checkpoint.bin")).unwrap()).unwrap();
    let track = ConditionTrack::load(&track).unwrap();
    let cameras = vec![load_cameras(&cams).unwrap().swap_remove(1)];
    let frames = render_sequence(&renderer, &track, &cameras).unwrap();
    for (t, img) in frames.iter().enumerate() {
        let written = fs::read(r.join(format!("{t:04}.f32"))).unwrap();
        assert_eq!(written, img.to_raw_bytes(), "frame {t}");
    }

    let o = run(&[
        "render", "--ckpt", s(&t2), "--track", s(&scene.join("track.f32")), "--cameras", s(&cams), "--camera", "99",
        "--out", s(&tmp.path().join("bad")),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let e = tmp.path().join("eval");
    let o = run(&["eval", "--ckpt", s(&t2), "--scene", s(&scene), "--out", s(&e)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(e.join("summary.txt")).unwrap();
    for k in ["eval.psnr", "eval.aperture_pearson", "eval.neutral_l1", "eval.heldout_psnr"] {
        assert!(summary.contains(k), "{k}");
    }
    assert!(fs::read_to_string(e.join("metrics.csv")).unwrap().lines().last().unwrap().starts_with("mean,"));

    // inputs untouched
    assert_eq!(checksums(&t1), checksums(&t1b));
}

#[test]
fn verify_passes_and_detects_fault() {
    let o = run(&["verify", "--cases", "8", "--render-scenes", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failed"));
    let o = run(&["verify", "--cases", "8", "--render-scenes", "6", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL grad/"));
}

#[test]
fn bench_rows_and_counts_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "bench".to_string(),
            "--ns".into(),
            "64,128".into(),
            "--ratios".into(),
            "0.01,0.05".into(),
            "--d".into(),
            "16".into(),
            "--repeats".into(),
            "1".into(),
            "--throughput-points".into(),
            "256".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(bin().args(args(&a)).output().unwrap().status.success());
    assert!(bin().args(args(&b)).output().unwrap().status.success());
    let counts = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("bench.csv"))
            .unwrap()
            .lines()
            .map(|l| l.split(',').take(5).collect::<Vec<_>>().join(","))
            .collect()
    };
    let ca = counts(&a);
    assert_eq!(ca.len(), 1 + 4);
    assert_eq!(ca, counts(&b));
    assert_eq!(fs::read_to_string(a.join("throughput.csv")).unwrap().lines().count(), 1 + 2);
}
