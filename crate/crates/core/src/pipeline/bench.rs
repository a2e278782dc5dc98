//! Attention cost measurements: counted multiply-accumulates and wall time
//! of agent versus full cross-attention, and deformation-feature throughput
//! across agent ratios.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{agent_cross_attention, full_cross_attention, AgentConfig, ConditionRow, Esaa, COND_TOKENS};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::tensor::NdArray;

/// Default agent ratios for the throughput sweep.
pub const TABLE_RATIOS: [f64; 4] = [0.0016, 0.0025, 0.005, 0.01];
pub const DEFAULT_NS: [usize; 5] = [256, 512, 1024, 2048, 4096];

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> NdArray {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    NdArray::matrix(rows, cols, data).expect("shape")
}

fn agent_params(d: usize, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    Esaa::new(
        AgentConfig {
            d_model: d,
            ..AgentConfig::default()
        },
        d,
        1,
    )
    .expect("valid config")
    .init(&mut store, rng);
    store
}

/// One forward pass; returns counted MACs and elapsed seconds.
fn run_once(store: &ParamStore, f_v: &NdArray, cond: &NdArray, agents: Option<usize>) -> Result<(u64, f64)> {
    let start = Instant::now();
    let mut g = Graph::new();
    let f = g.constant(f_v.clone());
    let c = g.constant(cond.clone());
    match agents {
        Some(n) => agent_cross_attention(&mut g, store, f, c, n)?,
        None => full_cross_attention(&mut g, f, c)?,
    };
    Ok((g.macs(), start.elapsed().as_secs_f64()))
}

/// Minimum wall time over `repeats` runs, with the (deterministic) MAC count.
fn measure(store: &ParamStore, f_v: &NdArray, cond: &NdArray, agents: Option<usize>, repeats: usize) -> Result<(u64, f64)> {
    let mut best = f64::INFINITY;
    let mut macs = 0;
    for _ in 0..repeats.max(1) {
        let (m, t) = run_once(store, f_v, cond, agents)?;
        macs = m;
        best = best.min(t);
    }
    Ok((macs, best))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub ratio: f64,
    pub agents: usize,
    pub agent_macs: u64,
    pub full_macs: u64,
    pub agent_secs: f64,
    pub full_secs: f64,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub ns: Vec<usize>,
    pub ratios: Vec<f64>,
    pub d_model: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Skip timing the quadratic baseline (its MACs are still counted).
    pub time_full: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            ns: DEFAULT_NS.to_vec(),
            ratios: TABLE_RATIOS.to_vec(),
            d_model: 64,
            repeats: 3,
            seed: 42,
            time_full: true,
        }
    }
}

/// Full-attention MACs are counted analytically from the same formula the
/// fused kernel reports, so the quadratic baseline only runs when timed.
fn full_macs(n: usize, d: usize) -> u64 {
    (n * COND_TOKENS * 2 * d + n * n * 2 * d) as u64
}

/// Agent versus full attention over the `(N, ratio)` grid; one row per pair.
pub fn bench_attention(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.ns.is_empty() || opts.ratios.is_empty() {
        return Err(Error::invalid("bench_attention: empty N or ratio list"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let store = agent_params(opts.d_model, &mut rng);
    let cond = random_matrix(&mut rng, COND_TOKENS, opts.d_model);
    let mut rows = Vec::new();
    for &n in &opts.ns {
        let f_v = random_matrix(&mut rng, n, opts.d_model);
        let (fm, fs) = if opts.time_full {
            measure(&store, &f_v, &cond, None, 1)?
        } else {
            (full_macs(n, opts.d_model), f64::NAN)
        };
        for &ratio in &opts.ratios {
            let cfg = AgentConfig {
                ratio,
                d_model: opts.d_model,
                ..AgentConfig::default()
            };
            cfg.validate()?;
            let agents = cfg.agent_count(n).min(n);
            let (am, at) = measure(&store, &f_v, &cond, Some(agents), opts.repeats)?;
            rows.push(BenchRow {
                n,
                ratio,
                agents,
                agent_macs: am,
                full_macs: fm,
                agent_secs: at,
                full_secs: fs,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("n,ratio,agents,agent_macs,full_macs,agent_secs,full_secs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6e},{:.6e}",
            r.n, r.ratio, r.agents, r.agent_macs, r.full_macs, r.agent_secs, r.full_secs
        );
    }
    s
}

/// Counted MACs of agent attention (fixed `agents`) and full attention at
/// each `N`.
pub fn complexity_sweep(ns: &[usize], agents: usize, d: usize, seed: u64) -> Result<Vec<(usize, u64, u64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = agent_params(d, &mut rng);
    let cond = random_matrix(&mut rng, COND_TOKENS, d);
    ns.iter()
        .map(|&n| {
            let f_v = random_matrix(&mut rng, n, d);
            let (am, _) = run_once(&store, &f_v, &cond, Some(agents))?;
            let (fm, _) = run_once(&store, &f_v, &cond, None)?;
            Ok((n, am, fm))
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

/// Wall-clock ratio full / agent at one size, minimum over `repeats`.
pub fn speedup(n: usize, ratio: f64, d: usize, repeats: usize, seed: u64) -> Result<(f64, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = agent_params(d, &mut rng);
    let cond = random_matrix(&mut rng, COND_TOKENS, d);
    let f_v = random_matrix(&mut rng, n, d);
    let cfg = AgentConfig {
        ratio,
        d_model: d,
        ..AgentConfig::default()
    };
    let agents = cfg.agent_count(n).min(n);
    let (_, at) = measure(&store, &f_v, &cond, Some(agents), repeats)?;
    let (_, ft) = measure(&store, &f_v, &cond, None, repeats)?;
    Ok((ft, at, agents))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputRow {
    pub ratio: f64,
    pub agents: usize,
    /// Spatial points processed per second by the deformation-feature stage.
    pub points_per_sec: f64,
}

/// Throughput of the stage-2 feature path (projection, condition fusion and
/// agent attention) on `points` spatial tokens for each ratio.
pub fn ratio_throughput(
    ratios: &[f64],
    points: usize,
    feature_width: usize,
    audio_width: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ThroughputRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = random_matrix(&mut rng, points, feature_width);
    let audio: Vec<f64> = (0..audio_width).map(|_| rng.gen_range(0.0..1.0)).collect();
    let row = ConditionRow {
        audio: &audio,
        blink: 0.0,
        pose: [0.0; 6],
        t: 3,
    };
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let esaa = Esaa::new(
            AgentConfig {
                ratio,
                ..AgentConfig::default()
            },
            feature_width,
            audio_width,
        )?;
        let mut store = ParamStore::new();
        esaa.init(&mut store, &mut rng);
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let mut g = Graph::new();
            let f = g.constant(features.clone());
            esaa.deform_features(&mut g, &store, f, &row)?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        out.push(ThroughputRow {
            ratio,
            agents: esaa.config.agent_count(points),
            points_per_sec: points as f64 / best,
        });
    }
    Ok(out)
}
