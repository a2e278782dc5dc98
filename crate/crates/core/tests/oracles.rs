//! Module-level oracles: closed forms and direct re-implementations checked
//! against the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use talkhead::attention::{ppe, sdp_forward};
use talkhead::checkpoint::Checkpoint;
use talkhead::gaussians::{Gaussian, GaussianCloud};
use talkhead::image::Image;
use talkhead::kan::{KanNetwork, SplineGrid};
use talkhead::losses::{psnr, ssim};
use talkhead::pipeline::eval::{aperture_proxy, evaluate, pearson};
use talkhead::pipeline::render::{render_sequence, Renderer};
use talkhead::pipeline::scene::{generate_scene, SceneSpec};
use talkhead::pipeline::train::{train_static, TrainConfig};
use talkhead::splat::{project, render_cloud, COV_FLOOR};
use talkhead::triplane::{corners, hash_index};
use talkhead::verify::{random_track, ssim_direct, test_camera, tiny_model};
use talkhead::{Graph, NdArray, ParamStore};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> NdArray {
    NdArray::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn hash_matches_worked_examples() {
    assert_eq!(hash_index(0, 0, 1024), 0);
    assert_eq!(hash_index(1, 0, 1024), 1);
    // 2654435761 = 0x9E3779B1, low ten bits 0x1B1
    assert_eq!(hash_index(0, 1, 1024), 0x1B1);
    assert_eq!(hash_index(7, 0, 4), 3);
    let c = corners([0.3, -0.55], 16, 4096);
    let w: f64 = c.iter().map(|(_, w)| w).sum();
    assert!((w - 1.0).abs() < 1e-15);
    assert!(c.iter().all(|&(i, w)| i < 4096 && (0.0..=1.0).contains(&w)));
}

#[test]
fn sdp_matches_loop() {
    let mut r = rng(1);
    let (q, k, v) = (random(&mut r, 7, 5), random(&mut r, 4, 5), random(&mut r, 4, 3));
    let out = sdp_forward(&q, &k, &v).unwrap();
    let scale = 1.0 / 5f64.sqrt();
    for i in 0..7 {
        let s: Vec<f64> = (0..4)
            .map(|j| (0..5).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..3 {
            let want: f64 = (0..4).map(|j| e[j] / z * v.at(j, c)).sum();
            assert!((out.at(i, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ssim_matches_direct_window_sum() {
    let mut r = rng(2);
    let (h, w) = (13, 17);
    let x: Vec<f64> = (0..h * w * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| (v + r.gen_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
    let fast = ssim(&x, &y, h, w).unwrap();
    assert!((fast - ssim_direct(&x, &y, h, w)).abs() < 1e-12);
    assert!((ssim(&x, &x, h, w).unwrap() - 1.0).abs() < 1e-12);
    assert!(fast < 1.0);
}

#[test]
fn ppe_closed_form() {
    let p = ppe(0, 6, 25).unwrap();
    assert_eq!(p, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let p = ppe(1, 4, 25).unwrap();
    let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in p.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(ppe(3, 8, 25).unwrap(), ppe(28, 8, 25).unwrap());
    assert_eq!(ppe(3, 8, 25).unwrap(), ppe(53, 8, 25).unwrap());
    assert!(ppe(1, 8, 0).is_err());
}

#[test]
fn spline_basis_partitions_unity() {
    let grid = SplineGrid::default();
    for i in 0..=200 {
        let x = -1.0 + 2.0 * i as f64 / 200.0;
        let b = grid.basis(x);
        assert_eq!(b.len(), grid.num_basis());
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "x={x}");
        assert!(b.iter().all(|&v| v >= -1e-15));
    }
}

#[test]
fn kan_graph_matches_scalar_path() {
    let mut r = rng(3);
    let kan = KanNetwork::new("k", &[4, 6, 3], SplineGrid::default()).unwrap();
    let mut store = ParamStore::new();
    kan.init(&mut store, &mut r, 0.3, false);
    let x = random(&mut r, 5, 4);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = kan.forward(&mut g, &store, xv).unwrap();
    let y = g.value(y).clone();
    for i in 0..5 {
        let v = kan.forward_vector(&store, x.row(i)).unwrap();
        for c in 0..3 {
            assert!((y.at(i, c) - v[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn projected_covariance_closed_form() {
    let (w, h, f) = (64, 64, 50.0);
    let cam = test_camera(w, h, f).unwrap();
    let g = Gaussian {
        position: [0.0, 0.0, 0.0],
        scale: [0.2, 0.05, 0.1],
        rotation: [1.0, 0.0, 0.0, 0.0],
        sh: vec![0.0; 3],
        opacity: 0.5,
    };
    let s = project(&g, &cam).expect("visible");
    let z = 4.0;
    assert!((s.cov2d[0] - ((f * 0.2 / z) * (f * 0.2 / z) + COV_FLOOR)).abs() < 1e-12);
    assert!((s.cov2d[2] - ((f * 0.05 / z) * (f * 0.05 / z) + COV_FLOOR)).abs() < 1e-12);
    assert!(s.cov2d[1].abs() < 1e-12);
    assert!((s.depth - z).abs() < 1e-12);
    let det = s.cov2d[0] * s.cov2d[2] - s.cov2d[1] * s.cov2d[1];
    assert!((s.conic[0] - s.cov2d[2] / det).abs() < 1e-12);
    let behind = Gaussian {
        position: [0.0, 0.0, -5.0],
        ..g
    };
    assert!(project(&behind, &cam).is_none());
}

#[test]
fn evaluate_closed_forms() {
    let a = Image::filled(12, 12, [0.5, 0.5, 0.5]);
    let b = Image::filled(12, 12, [0.6, 0.6, 0.6]);
    assert!((psnr(&a.data, &b.data) - 20.0).abs() < 1e-9);
    let k = [[[0.0, 0.0], [0.0, 4.0]]];
    let kg = [[[3.0, 4.0], [0.0, 4.0]]];
    let m = evaluate(&[a.clone()], &[b], &k, &kg).unwrap();
    assert!((m.mean_psnr() - 20.0).abs() < 1e-9);
    assert!((m.mean_keypoint_distance() - 2.5).abs() < 1e-12);
    let same = evaluate(&[a.clone()], &[a.clone()], &k, &k).unwrap();
    assert!(same.psnr[0].is_infinite());
    assert!((same.mean_ssim() - 1.0).abs() < 1e-12);
    assert!(same.to_csv().contains("inf"));
    assert_eq!(aperture_proxy(&[[1.0, 10.0], [1.5, 14.0]]), 4.0);
    assert!(evaluate(&[a], &[], &k, &kg).is_err());
}

#[test]
fn pearson_closed_forms() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert!((pearson(&x, &[3.0, 5.0, 7.0, 9.0]) - 1.0).abs() < 1e-12);
    assert!((pearson(&x, &[2.0, 1.0, 0.0, -1.0]) + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&x, &[1.0; 4]), 0.0);
    // cov 2, variances 5 and 1
    assert!((pearson(&x, &[1.0, 1.0, 2.0, 2.0]) - 2.0 / 5f64.sqrt()).abs() < 1e-12);
}

fn small_spec() -> SceneSpec {
    SceneSpec {
        frames: 20,
        points: 120,
        width: 32,
        height: 32,
        focal: 45.0,
        ..SceneSpec::default()
    }
}

#[test]
fn scene_is_seed_deterministic_and_aperture_follows_audio() {
    let a = generate_scene(&small_spec(), 5).unwrap();
    let b = generate_scene(&small_spec(), 5).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.points, b.points);
    assert_eq!(a.track, b.track);
    let c = generate_scene(&small_spec(), 6).unwrap();
    assert_ne!(a.frames, c.frames);
    for t in 0..a.frames.len() {
        let want = a.spec.mouth_rest + a.spec.mouth_gain * a.track.audio[t][0];
        assert_eq!(a.aperture(t), want);
    }
    // same camera: wider mouth, larger vertical marker gap
    let same_cam: Vec<usize> = (0..a.frames.len()).filter(|&t| a.frame_cameras[t] == 0).collect();
    let gaps: Vec<f64> = same_cam.iter().map(|&t| aperture_proxy(&a.keypoints[t])).collect();
    let aps: Vec<f64> = same_cam.iter().map(|&t| a.aperture(t)).collect();
    assert!(pearson(&gaps, &aps) > 0.999);
    assert_eq!(a.test_start(), 16);
}

#[test]
fn scene_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_scene(&small_spec(), 9).unwrap();
    a.save(dir.path()).unwrap();
    let b = talkhead::pipeline::scene::SyntheticScene::load(dir.path()).unwrap();
    assert_eq!(a.cameras.len(), b.cameras.len());
    assert_eq!(a.track.audio.len(), b.track.audio.len());
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() < 1e-6));
    }
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.frame_cameras, b.frame_cameras);
}

#[test]
fn zero_iteration_checkpoint_is_the_initial_state() {
    let scene = generate_scene(&small_spec(), 1).unwrap();
    let config = TrainConfig {
        static_iterations: 0,
        ..TrainConfig::default()
    };
    let out = train_static(&scene, &config).unwrap();
    assert!(out.log.is_empty());
    let (model, mut store) = talkhead::pipeline::train::init_static(&scene, &config).unwrap();
    // checkpoints hold f32 values
    store.quantize_f32();
    let want = model.static_raw_value(&store).unwrap();
    let r = Renderer::from_checkpoint(&out.checkpoint).unwrap();
    let got = r.model.static_raw_value(&r.params).unwrap();
    assert_eq!(want, got);
    let bytes = out.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn render_sequence_matches_manual_chain() {
    let mut r = rng(4);
    let (model, store) = tiny_model(&mut r, 30, 3).unwrap();
    let track = random_track(&mut r, 6, 3).unwrap();
    let cam = test_camera(24, 24, 30.0).unwrap();
    let renderer = Renderer::new(model.clone(), store.clone()).unwrap();
    let seq = render_sequence(&renderer, &track, &[cam.clone()]).unwrap();
    assert_eq!(seq.len(), 6);
    for t in 0..6 {
        let mut g = Graph::new();
        let raw = model.frame_raw(&mut g, &store, &track.row(t).unwrap()).unwrap();
        let cloud = GaussianCloud::from_raw(g.value(raw), model.layout).unwrap();
        let img = render_cloud(&cloud, &cam, talkhead::pipeline::scene::BACKGROUND).unwrap();
        let diff = img.data.iter().zip(&seq[t].data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "frame {t}: {diff}");
    }
    let cams = vec![cam; 5];
    assert!(render_sequence(&renderer, &track, &cams).is_err());
}

proptest::proptest! {
    #[test]
    fn ppe_is_periodic(t in 0usize..10_000, period in 1usize..64, half in 1usize..16) {
        let d = 2 * half;
        proptest::prop_assert_eq!(ppe(t, d, period).unwrap(), ppe(t + period, d, period).unwrap());
    }

    #[test]
    fn corner_weights_sum_to_one(u in -1.5f64..1.5, v in -1.5f64..1.5, level in 0u32..6) {
        let c = corners([u, v], 4 << level, 1 << 12);
        let w: f64 = c.iter().map(|(_, w)| w).sum();
        proptest::prop_assert!((w - 1.0).abs() < 1e-12);
        proptest::prop_assert!(c.iter().all(|&(i, _)| i < 1 << 12));
    }
}
