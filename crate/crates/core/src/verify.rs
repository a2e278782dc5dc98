//! Self-verification: analytic gradients against central differences,
//! fast paths against brute-force oracles, and structural invariants.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    agent_cross_attention, fuse_conditions, names, ppe, sdp_forward, AgentConfig, ConditionRow, Esaa, COND_TOKENS,
};
use crate::camera::Camera;
use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::gaussians::{GaussianCloud, RawLayout};
use crate::gradcheck::{finite_diff, relative_error, FD_STEP};
use crate::graph::{Graph, Var};
use crate::kan::{map_deform, map_static, KanNetwork, SplineGrid};
use crate::losses::{dssim_loss, l1_loss, lip_loss, ssim, stage1_loss, stage2_loss, LossWeights, SSIM_C1, SSIM_C2};
use crate::params::ParamStore;
use crate::pipeline::render::Renderer;
use crate::pipeline::{Model, ModelConfig};
use crate::splat::{project_cloud, rasterize_reference, rasterize_with_stats, render_node};
use crate::tensor::NdArray;
use crate::triplane::{SpatialPoint, TriplaneConfig, TriplaneEncoder};

pub const GRAD_TOL: f64 = 1e-4;
pub const RENDER_GRAD_TOL: f64 = 1e-3;
pub const RENDER_TOL: f64 = 1e-5;
pub const RENDER_TERMINATED_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-12;
/// Gradient norms below this are compared absolutely.
const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteKind {
    Gradient,
    Oracle,
    Invariant,
}

impl SuiteKind {
    fn tag(self) -> &'static str {
        match self {
            SuiteKind::Gradient => "grad",
            SuiteKind::Oracle => "oracle",
            SuiteKind::Invariant => "invariant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub kind: SuiteKind,
    pub cases: usize,
    pub tolerance: f64,
    pub max_error: f64,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}/{} cases={} tol={:.1e} max_err={:.3e} time={:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.kind.tag(),
            self.name,
            self.cases,
            self.tolerance,
            self.max_error,
            self.seconds
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub suites: Vec<SuiteResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn failures(&self) -> usize {
        self.suites.iter().filter(|s| !s.passed()).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            let _ = writeln!(s, "{}", r.line());
        }
        let _ = writeln!(
            s,
            "{} suites, {} failed",
            self.suites.len(),
            self.failures()
        );
        s
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Randomized cases per gradient and oracle suite.
    pub cases: usize,
    /// Random scenes per renderer-equivalence suite.
    pub render_scenes: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            cases: 100,
            render_scenes: 50,
            seed: 42,
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `Σ out ⊙ weights`, the random linear functional every gradient suite uses.
fn weighted_sum(g: &mut Graph, out: Var, weights: &NdArray) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type LossFn<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'a;

fn eval_loss(f: &LossFn, store: &ParamStore, inputs: &[NdArray]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    match f(&mut g, store, &vars) {
        Ok(l) => g.value(l).data()[0],
        Err(_) => f64::NAN,
    }
}

/// Relative error of the analytic gradient, over the trainable parameters
/// whose names start with one of `prefixes` and every input, against
/// central differences.
fn gradient_case(f: &LossFn, store: &ParamStore, prefixes: &[&str], inputs: &[NdArray]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    let grads = g.backward(loss)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();

    let names: Vec<String> = store
        .iter()
        .filter(|(n, p)| p.trainable && prefixes.iter().any(|pre| n.starts_with(pre)))
        .map(|(n, _)| n.clone())
        .collect();
    let mut probe = store.clone();
    for name in &names {
        let value = store.get(name)?.clone();
        match grads.params().get(name.as_str()) {
            Some(a) => analytic.extend_from_slice(a.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(value.len())),
        }
        let fd = finite_diff(
            |x| {
                *probe.get_mut(name).expect("present") = x.clone();
                eval_loss(f, &probe, inputs)
            },
            &value,
            FD_STEP,
        )?;
        *probe.get_mut(name)? = value;
        numeric.extend_from_slice(fd.data());
    }
    for (k, x) in inputs.iter().enumerate() {
        match grads.get(vars[k]) {
            Some(a) => analytic.extend_from_slice(a.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(x.len())),
        }
        let mut xs = inputs.to_vec();
        let fd = finite_diff(
            |v| {
                xs[k] = v.clone();
                eval_loss(f, store, &xs)
            },
            x,
            FD_STEP,
        )?;
        numeric.extend_from_slice(fd.data());
    }
    Ok(relative_error(&analytic, &numeric, NORM_FLOOR))
}

struct SuiteTimer {
    name: String,
    kind: SuiteKind,
    tolerance: f64,
    start: Instant,
    cases: usize,
    max_error: f64,
}

impl SuiteTimer {
    fn new(name: &str, kind: SuiteKind, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            tolerance,
            start: Instant::now(),
            cases: 0,
            max_error: 0.0,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        // NaN counts as a failure
        self.max_error = if err.is_nan() { f64::INFINITY } else { self.max_error.max(err) };
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            kind: self.kind,
            cases: self.cases,
            tolerance: self.tolerance,
            max_error: self.max_error,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

fn small_triplane() -> TriplaneConfig {
    TriplaneConfig {
        levels: 2,
        base_resolution: 4,
        growth_factor: 2.0,
        table_size: 64,
        features: 2,
    }
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<SpatialPoint> {
    (0..n)
        .map(|_| SpatialPoint::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

fn grad_triplane(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("triplane", SuiteKind::Gradient, GRAD_TOL);
    let enc = TriplaneEncoder::new(small_triplane())?;
    for _ in 0..opts.cases {
        let mut store = ParamStore::new();
        enc.init(&mut store, rng, 0.5);
        let pts = random_points(rng, 5);
        let w = uniform(rng, &[5, enc.config.output_width()], -1.0, 1.0);
        let f = |g: &mut Graph, st: &ParamStore, _: &[Var]| {
            let out = enc.encode_batch(g, st, &pts)?;
            weighted_sum(g, out, &w)
        };
        s.record(gradient_case(&f, &store, &[TriplaneEncoder::PREFIX], &[])?);
    }
    Ok(s.finish())
}

fn grad_kan(opts: &VerifyOptions, rng: &mut ChaCha8Rng, deform: bool) -> Result<SuiteResult> {
    let name = if deform { "kan_deform" } else { "kan_static" };
    let mut s = SuiteTimer::new(name, SuiteKind::Gradient, GRAD_TOL);
    let layout = RawLayout::new(0)?;
    let kan = KanNetwork::new(name, &[4, 5, layout.width()], SplineGrid::default())?;
    for _ in 0..opts.cases {
        let mut store = ParamStore::new();
        kan.init(&mut store, rng, 0.5, false);
        // a little beyond the spline span to exercise the clamped branch
        let x = uniform(rng, &[3, 4], -1.2, 1.2);
        let w = uniform(rng, &[3, layout.width()], -1.0, 1.0);
        let f = |g: &mut Graph, st: &ParamStore, v: &[Var]| {
            let out = if deform {
                map_deform(&kan, g, st, v[0], &layout)?
            } else {
                map_static(&kan, g, st, v[0], &layout)?
            };
            weighted_sum(g, out, &w)
        };
        s.record(gradient_case(&f, &store, &[name], &[x])?);
    }
    Ok(s.finish())
}

fn small_esaa(d: usize, feature_width: usize, audio_width: usize) -> Result<Esaa> {
    Esaa::new(
        AgentConfig {
            d_model: d,
            ..AgentConfig::default()
        },
        feature_width,
        audio_width,
    )
}

fn grad_esaa(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("esaa", SuiteKind::Gradient, GRAD_TOL);
    let (n_rows, d) = (10, 4);
    let esaa = small_esaa(d, 3, 2)?;
    for case in 0..opts.cases {
        let mut store = ParamStore::new();
        esaa.init(&mut store, rng);
        let agents = [1, 2, 3, n_rows][case % 4];
        let f_v = uniform(rng, &[n_rows, d], -1.0, 1.0);
        let cond = uniform(rng, &[COND_TOKENS, d], -1.0, 1.0);
        let w = uniform(rng, &[n_rows, d], -1.0, 1.0);
        let f = |g: &mut Graph, st: &ParamStore, v: &[Var]| {
            let out = agent_cross_attention(g, st, v[0], v[1], agents)?;
            weighted_sum(g, out, &w)
        };
        s.record(gradient_case(&f, &store, &["esaa/agent/"], &[f_v, cond])?);
    }
    Ok(s.finish())
}

fn grad_fusion(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("fusion", SuiteKind::Gradient, GRAD_TOL);
    let (n_rows, fw, aw, d) = (8, 3, 5, 4);
    let esaa = small_esaa(d, fw, aw)?;
    for case in 0..opts.cases {
        let mut store = ParamStore::new();
        esaa.init(&mut store, rng);
        // the null token starts at zero; move it so its gradient is exercised
        *store.get_mut(names::NULL)? = uniform(rng, &[1, d], -0.5, 0.5);
        let audio: Vec<f64> = (0..aw).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pose: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
        let blink = rng.gen_range(0.0..1.0);
        let row = ConditionRow {
            audio: &audio,
            blink,
            pose,
            t: case,
        };
        let f_v = uniform(rng, &[n_rows, fw], -1.0, 1.0);
        let w = uniform(rng, &[n_rows, d], -1.0, 1.0);
        let cw = uniform(rng, &[COND_TOKENS, d], -1.0, 1.0);
        let f = |g: &mut Graph, st: &ParamStore, v: &[Var]| {
            let out = esaa.deform_features(g, st, v[0], &row)?;
            let a = weighted_sum(g, out, &w)?;
            let c = fuse_conditions(g, st, &row, &esaa.config)?;
            let b = weighted_sum(g, c, &cw)?;
            g.add(a, b)
        };
        s.record(gradient_case(&f, &store, &["fusion/", "esaa/"], &[f_v])?);
    }
    Ok(s.finish())
}

/// Camera at `(0, 0, -4)` looking at the origin.
pub fn test_camera(width: usize, height: usize, focal: f64) -> Result<Camera> {
    Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], focal, width, height)
}

/// Raw rows of random Gaussians in view of [`test_camera`], with colours
/// away from the clamp and opacity logits in `opacity`.
pub fn random_raw(rng: &mut impl Rng, n: usize, layout: RawLayout, spread: f64, opacity: (f64, f64)) -> NdArray {
    let w = layout.width();
    let mut data = vec![0.0; n * w];
    for row in data.chunks_mut(w) {
        for v in &mut row[..2] {
            *v = rng.gen_range(-spread..spread);
        }
        row[2] = rng.gen_range(-0.8..0.8);
        for v in &mut row[RawLayout::SCALE..RawLayout::SCALE + 3] {
            *v = rng.gen_range(0.06f64..0.25).ln();
        }
        row[RawLayout::ROTATION] = rng.gen_range(0.5..1.0);
        for v in &mut row[RawLayout::ROTATION + 1..RawLayout::ROTATION + 4] {
            *v = rng.gen_range(-0.5..0.5);
        }
        for ch in 0..3 {
            row[RawLayout::SH + ch] = rng.gen_range(-0.6..0.6);
        }
        for v in &mut row[RawLayout::SH + 3..RawLayout::SH + layout.sh_width()] {
            *v = rng.gen_range(-0.1..0.1);
        }
        row[layout.opacity()] = rng.gen_range(opacity.0..opacity.1);
    }
    NdArray::matrix(n, w, data).expect("shape")
}

fn grad_renderer(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("renderer", SuiteKind::Gradient, RENDER_GRAD_TOL);
    let layout = RawLayout::new(1)?;
    let cam = test_camera(20, 20, 25.0)?;
    let bg = [0.1, 0.2, 0.3];
    for _ in 0..opts.cases {
        let raw = random_raw(rng, 5, layout, 0.6, (-2.0, 0.5));
        let w = uniform(rng, &[20, 20, 3], -1.0, 1.0);
        let f = |g: &mut Graph, _: &ParamStore, v: &[Var]| {
            let img = render_node(g, v[0], layout, &cam, bg)?;
            weighted_sum(g, img, &w)
        };
        s.record(gradient_case(&f, &ParamStore::new(), &[], &[raw])?);
    }
    Ok(s.finish())
}

#[derive(Clone, Copy)]
enum LossKind {
    L1,
    Dssim,
    Lip,
    Stage1,
    Stage2,
}

fn grad_loss(opts: &VerifyOptions, rng: &mut ChaCha8Rng, kind: LossKind) -> Result<SuiteResult> {
    let name = match kind {
        LossKind::L1 => "loss_l1",
        LossKind::Dssim => "loss_dssim",
        LossKind::Lip => "loss_lip",
        LossKind::Stage1 => "loss_stage1",
        LossKind::Stage2 => "loss_stage2",
    };
    let mut s = SuiteTimer::new(name, SuiteKind::Gradient, GRAD_TOL);
    let (h, w) = (12, 12);
    let weights = LossWeights {
        dssim: 0.2,
        lpips: 0.0,
        lip: 0.5,
    };
    for _ in 0..opts.cases {
        let img = uniform(rng, &[h, w, 3], 0.0, 1.0);
        let gt = uniform(rng, &[h, w, 3], 0.0, 1.0);
        let mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
        let f = |g: &mut Graph, _: &ParamStore, v: &[Var]| {
            let t = g.constant(gt.clone());
            match kind {
                LossKind::L1 => l1_loss(g, v[0], t),
                LossKind::Dssim => dssim_loss(g, v[0], t),
                LossKind::Lip => lip_loss(g, v[0], t, &mask),
                LossKind::Stage1 => stage1_loss(g, v[0], t, &weights),
                LossKind::Stage2 => stage2_loss(g, v[0], t, &mask, &weights),
            }
        };
        s.record(gradient_case(&f, &ParamStore::new(), &[], &[img])?);
    }
    Ok(s.finish())
}

/// Every graph primitive chained in one expression.
fn grad_primitives(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("primitives", SuiteKind::Gradient, GRAD_TOL);
    for _ in 0..opts.cases {
        let a = uniform(rng, &[3, 4], -1.0, 1.0);
        let b = uniform(rng, &[4, 3], -1.0, 1.0);
        let c = uniform(rng, &[1, 3], 0.5, 1.5);
        let f = |g: &mut Graph, _: &ParamStore, v: &[Var]| {
            let m = g.matmul(v[0], v[1])?;
            let sm = g.softmax(m);
            let sg = g.sigmoid(m);
            let si = g.silu(sm);
            let e = g.exp(sg);
            let cb = g.broadcast_rows(v[2], 3)?;
            let q = g.div(e, cb)?;
            let l = g.log(cb);
            let sn = g.sin(q);
            let cs = g.cos(l);
            let p = g.mul(sn, cs)?;
            let d = g.sub(p, si)?;
            let n = g.neg(d);
            let sc = g.scale(n, 0.7);
            let ad = g.add_scalar(sc, 0.3);
            let ab = g.abs(ad);
            let tr = g.transpose(ab)?;
            let cat = g.concat_cols(&[tr, tr])?;
            let rows = g.concat_rows(&[cat, cat])?;
            let sl = g.slice_cols(rows, 1, 3)?;
            let sr = g.slice_rows(sl, 2, 3)?;
            let rs = g.reshape(sr, vec![9])?;
            let af = g.affine(rs, 1.3, -0.2);
            let m1 = g.mean(af);
            let s1 = g.sum(ad);
            let t = g.mul(m1, s1)?;
            g.add(t, m1)
        };
        s.record(gradient_case(&f, &ParamStore::new(), &[], &[a, b, c])?);
    }
    Ok(s.finish())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Tile rasterizer against the per-pixel reference. `dense` scenes are
/// opaque enough to trigger early termination.
fn oracle_render(opts: &VerifyOptions, rng: &mut ChaCha8Rng, dense: bool) -> Result<SuiteResult> {
    let (name, tol) = if dense {
        ("render_terminated", RENDER_TERMINATED_TOL)
    } else {
        ("render", RENDER_TOL)
    };
    let mut s = SuiteTimer::new(name, SuiteKind::Oracle, tol);
    let cam = test_camera(64, 64, 80.0)?;
    let layout = RawLayout::new(1)?;
    let mut terminated = 0;
    while s.cases < opts.render_scenes {
        let n = rng.gen_range(1..=200);
        let raw = if dense {
            random_raw(rng, n.max(60), layout, 0.9, (1.5, 5.0))
        } else {
            random_raw(rng, n, layout, 1.0, (-6.0, -2.5))
        };
        let cloud = GaussianCloud::from_raw(&raw, layout)?;
        let splats = project_cloud(&cloud, &cam);
        let (tiled, stats) = rasterize_with_stats(&splats, &cam, [0.2, 0.1, 0.0])?;
        let hit = stats.terminated.iter().any(|&t| t);
        // light scenes must not terminate, dense ones must
        if hit != dense {
            continue;
        }
        terminated += usize::from(hit);
        let reference = rasterize_reference(&splats, &cam, [0.2, 0.1, 0.0])?;
        s.record(max_abs_diff(&tiled.data, &reference.data));
    }
    debug_assert!(!dense || terminated == s.cases);
    Ok(s.finish())
}

fn oracle_sdp(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("sdp_loop", SuiteKind::Oracle, ORACLE_TOL);
    for _ in 0..opts.cases {
        let (nq, nk, d, dv) = (rng.gen_range(1..70), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..6));
        let q = uniform(rng, &[nq, d], -2.0, 2.0);
        let k = uniform(rng, &[nk, d], -2.0, 2.0);
        let v = uniform(rng, &[nk, dv], -2.0, 2.0);
        let out = sdp_forward(&q, &k, &v)?;
        let mut err: f64 = 0.0;
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dv {
                let want: f64 = (0..nk).map(|j| e[j] / z * v.at(j, c)).sum();
                err = err.max((want - out.at(i, c)).abs());
            }
        }
        s.record(err);
    }
    Ok(s.finish())
}

/// SSIM by explicit 11×11 windows with zero padding.
pub fn ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let sigma = crate::losses::SSIM_SIGMA;
    let r = (crate::losses::SSIM_WINDOW / 2) as isize;
    let g1: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / z).collect();
    let mut total = 0.0;
    for ch in 0..3 {
        for py in 0..h as isize {
            for px in 0..w as isize {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (py + dy, px + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let wt = g1[(dy + r) as usize] * g1[(dx + r) as usize];
                        let idx = (yy as usize * w + xx as usize) * 3 + ch;
                        mx += wt * x[idx];
                        my += wt * y[idx];
                        sxx += wt * x[idx] * x[idx];
                        syy += wt * y[idx] * y[idx];
                        sxy += wt * x[idx] * y[idx];
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    total / (3 * h * w) as f64
}

fn oracle_ssim(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("ssim_direct", SuiteKind::Oracle, ORACLE_TOL);
    for _ in 0..opts.cases.min(20) {
        let (h, w) = (rng.gen_range(11..20), rng.gen_range(11..20));
        let x = uniform(rng, &[h * w * 3], 0.0, 1.0);
        let y = uniform(rng, &[h * w * 3], 0.0, 1.0);
        let fast = ssim(x.data(), y.data(), h, w)?;
        s.record((fast - ssim_direct(x.data(), y.data(), h, w)).abs());
    }
    Ok(s.finish())
}

fn oracle_triplane(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("triplane_scalar", SuiteKind::Oracle, ORACLE_TOL);
    let enc = TriplaneEncoder::new(small_triplane())?;
    for _ in 0..opts.cases {
        let mut store = ParamStore::new();
        enc.init(&mut store, rng, 0.5);
        let pts = random_points(rng, 4);
        let mut g = Graph::new();
        let out = enc.encode_batch(&mut g, &store, &pts)?;
        let mut err: f64 = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let want = enc.encode_point(&store, *p)?;
            err = err.max(max_abs_diff(g.value(out).row(i), &want));
        }
        s.record(err);
    }
    Ok(s.finish())
}

fn oracle_kan(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("kan_vector", SuiteKind::Oracle, ORACLE_TOL);
    let kan = KanNetwork::new("k", &[3, 6, 4], SplineGrid::default())?;
    for _ in 0..opts.cases {
        let mut store = ParamStore::new();
        kan.init(&mut store, rng, 0.5, false);
        let x = uniform(rng, &[2, 3], -1.3, 1.3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = kan.forward(&mut g, &store, xv)?;
        let mut err: f64 = 0.0;
        for i in 0..2 {
            err = err.max(max_abs_diff(g.value(out).row(i), &kan.forward_vector(&store, x.row(i))?));
        }
        s.record(err);
    }
    Ok(s.finish())
}

fn invariant_ppe(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("ppe_period", SuiteKind::Invariant, 0.0);
    let p = AgentConfig::default().period;
    let zero = ppe(0, 64, p)?;
    let origin: f64 = zero
        .iter()
        .enumerate()
        .map(|(i, &v)| if i % 2 == 0 { v.abs() } else { (v - 1.0).abs() })
        .fold(0.0, f64::max);
    s.record(origin);
    for _ in 0..opts.cases {
        let t = rng.gen_range(0..10_000);
        let a = ppe(t, 64, p)?;
        let b = ppe(t + p, 64, p)?;
        s.record(max_abs_diff(&a, &b));
    }
    Ok(s.finish())
}

fn invariant_partition(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("spline_partition", SuiteKind::Invariant, ORACLE_TOL);
    for _ in 0..opts.cases {
        let grid = SplineGrid {
            lo: -1.0,
            hi: 1.0,
            intervals: rng.gen_range(1..9),
            degree: rng.gen_range(1..4),
        };
        let x = rng.gen_range(-1.0..1.0);
        s.record((grid.basis(x).iter().sum::<f64>() - 1.0).abs());
    }
    Ok(s.finish())
}

fn invariant_softmax(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("softmax_rows", SuiteKind::Invariant, ORACLE_TOL);
    for _ in 0..opts.cases {
        let cols = rng.gen_range(1..12);
        let x = uniform(rng, &[5, cols], -30.0, 30.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.softmax(v);
        let y = g.value(y);
        let err = (0..5).map(|i| (y.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        s.record(err);
    }
    Ok(s.finish())
}

/// A tiny model with random static parameters, for pipeline invariants.
pub fn tiny_model(rng: &mut impl Rng, gaussians: usize, audio_width: usize) -> Result<(Model, ParamStore)> {
    let config = ModelConfig {
        triplane: TriplaneConfig {
            levels: 2,
            base_resolution: 4,
            growth_factor: 2.0,
            table_size: 256,
            features: 2,
        },
        kan_hidden: 6,
        agent: AgentConfig {
            d_model: 8,
            ..AgentConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = Model::new(config, audio_width)?;
    let points: Vec<[f64; 3]> = (0..gaussians)
        .map(|_| [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)])
        .collect();
    let colors: Vec<[f64; 3]> = (0..gaussians).map(|_| std::array::from_fn(|_| rng.gen_range(0.2..0.8))).collect();
    let mut store = ParamStore::new();
    model.init_static(&mut store, rng, &points, &colors)?;
    model.static_kan.init(&mut store, rng, 0.1, false);
    model.init_deform(&mut store, rng);
    model.deform_kan.init(&mut store, rng, 0.1, false);
    Ok((model, store))
}

pub fn random_track(rng: &mut impl Rng, frames: usize, audio_width: usize) -> Result<crate::attention::ConditionTrack> {
    crate::attention::ConditionTrack::new(
        (0..frames)
            .map(|_| (0..audio_width).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect(),
        (0..frames).map(|_| rng.gen_range(0.0..1.0)).collect(),
        (0..frames).map(|_| std::array::from_fn(|_| rng.gen_range(-0.3..0.3))).collect(),
    )
}

/// Zeroed deformation parameters leave every frame identical to the static
/// render, bit for bit.
fn invariant_zero_deform(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("zero_deform_identity", SuiteKind::Invariant, 0.0);
    let (model, mut store) = tiny_model(rng, 40, 3)?;
    for prefix in crate::pipeline::DEFORM_PREFIXES {
        store.zero_prefix(prefix);
    }
    let cam = test_camera(32, 32, 40.0)?;
    let track = random_track(rng, 10, 3)?;
    let r = Renderer::new(model, store)?;
    let base = r.render_static(&cam)?;
    for t in 0..track.len() {
        let img = r.render_frame(&track, t, &cam)?;
        let same = img.data.iter().zip(&base.data).all(|(a, b)| a.to_bits() == b.to_bits());
        s.record(if same { 0.0 } else { max_abs_diff(&img.data, &base.data).max(f64::MIN_POSITIVE) });
    }
    Ok(s.finish())
}

/// Saving and reloading a checkpoint reproduces renders bit for bit.
fn invariant_checkpoint(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteTimer::new("checkpoint_round_trip", SuiteKind::Invariant, 0.0);
    let (model, store) = tiny_model(rng, 30, 2)?;
    let ckpt = Checkpoint::new(model.meta(), store);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes(), std::path::Path::new("<memory>"))?;
    let cam = test_camera(24, 24, 30.0)?;
    let track = random_track(rng, 3, 2)?;
    let a = Renderer::from_checkpoint(&ckpt)?;
    let b = Renderer::from_checkpoint(&back)?;
    for t in 0..track.len() {
        let x = a.render_frame(&track, t, &cam)?;
        let y = b.render_frame(&track, t, &cam)?;
        let same = x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits());
        s.record(if same { 0.0 } else { f64::INFINITY });
    }
    let meta_ok = back.meta == ckpt.meta && back.params == ckpt.params;
    s.record(if meta_ok { 0.0 } else { f64::INFINITY });
    Ok(s.finish())
}

/// Gradient suites only (one per trainable module and loss).
pub fn gradient_suites(opts: &VerifyOptions) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = &mut rng;
    Ok(vec![
        grad_primitives(opts, r)?,
        grad_triplane(opts, r)?,
        grad_kan(opts, r, false)?,
        grad_kan(opts, r, true)?,
        grad_esaa(opts, r)?,
        grad_fusion(opts, r)?,
        grad_renderer(opts, r)?,
        grad_loss(opts, r, LossKind::L1)?,
        grad_loss(opts, r, LossKind::Dssim)?,
        grad_loss(opts, r, LossKind::Lip)?,
        grad_loss(opts, r, LossKind::Stage1)?,
        grad_loss(opts, r, LossKind::Stage2)?,
    ])
}

/// Tile rasterizer against the brute-force renderer, light and dense scenes.
pub fn renderer_oracle_suites(opts: &VerifyOptions) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    Ok(vec![oracle_render(opts, &mut rng, false)?, oracle_render(opts, &mut rng, true)?])
}

/// Every suite: gradients, oracles, invariants.
pub fn run_all(opts: &VerifyOptions) -> Result<Report> {
    if opts.cases == 0 || opts.render_scenes == 0 {
        return Err(Error::invalid("verify: case counts must be positive"));
    }
    let mut suites = gradient_suites(opts)?;
    suites.extend(renderer_oracle_suites(opts)?);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let r = &mut rng;
    suites.push(oracle_sdp(opts, r)?);
    suites.push(oracle_ssim(opts, r)?);
    suites.push(oracle_triplane(opts, r)?);
    suites.push(oracle_kan(opts, r)?);
    suites.push(invariant_ppe(opts, r)?);
    suites.push(invariant_partition(opts, r)?);
    suites.push(invariant_softmax(opts, r)?);
    suites.push(invariant_zero_deform(r)?);
    suites.push(invariant_checkpoint(r)?);
    Ok(Report { suites })
}

/// Metadata lines written next to a verification report.
pub fn report_meta(opts: &VerifyOptions) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("verify.cases", opts.cases);
    kv.set("verify.render_scenes", opts.render_scenes);
    kv.set("verify.seed", opts.seed);
    kv
}
