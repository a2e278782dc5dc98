//! Scaled dot-product attention, agent cross-attention between spatial
//! features and per-frame condition tokens, periodic positional encoding and
//! condition fusion.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, CustomOp, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{dot, NdArray};

/// Number of condition tokens: audio, eye, pose, global.
pub const COND_TOKENS: usize = 4;
pub const POSE_WIDTH: usize = 6;

/// Per-frame driving signals.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTrack {
    pub audio: Vec<Vec<f64>>,
    pub blink: Vec<f64>,
    pub pose: Vec<[f64; POSE_WIDTH]>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConditionRow<'a> {
    pub audio: &'a [f64],
    pub blink: f64,
    pub pose: [f64; POSE_WIDTH],
    pub t: usize,
}

const TRACK_MAGIC: &str = "AVTRACK";

impl ConditionTrack {
    pub fn new(audio: Vec<Vec<f64>>, blink: Vec<f64>, pose: Vec<[f64; POSE_WIDTH]>) -> Result<Self> {
        let n = audio.len();
        if blink.len() != n || pose.len() != n {
            return Err(Error::invalid(format!(
                "track lengths differ: audio {n}, blink {}, pose {}",
                blink.len(),
                pose.len()
            )));
        }
        let width = audio.first().map_or(0, Vec::len);
        if audio.iter().any(|a| a.len() != width) {
            return Err(Error::invalid("audio rows have different widths"));
        }
        if let Some(b) = blink.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::invalid(format!("blink value {b} outside [0, 1]")));
        }
        let finite = audio.iter().flatten().chain(&blink).chain(pose.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("condition track".into()));
        }
        Ok(Self { audio, blink, pose })
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn audio_width(&self) -> usize {
        self.audio.first().map_or(0, Vec::len)
    }

    pub fn row(&self, t: usize) -> Result<ConditionRow<'_>> {
        if t >= self.len() {
            return Err(Error::invalid(format!("frame {t} beyond track of {} frames", self.len())));
        }
        Ok(ConditionRow {
            audio: &self.audio[t],
            blink: self.blink[t],
            pose: self.pose[t],
            t,
        })
    }

    /// Text header line `AVTRACK frames=<T> audio=<A>` followed by `T` rows of
    /// little-endian f32: audio (A), blink (1), pose (6).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{TRACK_MAGIC} frames={} audio={}\n", self.len(), self.audio_width()).into_bytes();
        for t in 0..self.len() {
            let vals = self.audio[t].iter().chain(std::iter::once(&self.blink[t])).chain(&self.pose[t]);
            for v in vals {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(origin, "missing track header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(origin, "header not UTF-8"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(TRACK_MAGIC) {
            return Err(Error::format(origin, "not a condition track"));
        }
        let mut frames = None;
        let mut width = None;
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::format(origin, format!("bad header field `{p}`")))?;
            let v: usize = v.parse().map_err(|_| Error::format(origin, format!("bad number in `{p}`")))?;
            match k {
                "frames" => frames = Some(v),
                "audio" => width = Some(v),
                _ => return Err(Error::format(origin, format!("unknown header field `{k}`"))),
            }
        }
        let (frames, width) = frames
            .zip(width)
            .ok_or_else(|| Error::format(origin, "header needs frames and audio"))?;
        let row = width + 1 + POSE_WIDTH;
        let body = &bytes[nl + 1..];
        if body.len() != frames * row * 4 {
            return Err(Error::format(origin, "track body length does not match header"));
        }
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut audio = Vec::with_capacity(frames);
        let mut blink = Vec::with_capacity(frames);
        let mut pose = Vec::with_capacity(frames);
        for r in vals.chunks_exact(row) {
            audio.push(r[..width].to_vec());
            blink.push(r[width]);
            let mut p = [0.0; POSE_WIDTH];
            p.copy_from_slice(&r[width + 1..]);
            pose.push(p);
        }
        Self::new(audio, blink, pose).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentConfig {
    /// Agent tokens as a fraction of the spatial sequence length.
    pub ratio: f64,
    pub d_model: usize,
    pub period: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            ratio: 0.005,
            d_model: 64,
            period: 25,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(format!("agent ratio {} outside (0, 1]", self.ratio)));
        }
        if self.d_model == 0 || self.period == 0 {
            return Err(Error::invalid("d_model and period must be positive"));
        }
        Ok(())
    }

    /// `max(1, round(ratio·N))`.
    pub fn agent_count(&self, n: usize) -> usize {
        ((self.ratio * n as f64).round() as usize).max(1)
    }
}

/// Rows handled per block when accumulating key/value gradients.
const SDP_BLOCK: usize = 64;

/// Fused `softmax(Q Kᵀ / √d) V`, evaluated one query row at a time so no
/// `n_q × n_k` matrix is materialized.
struct SdpOp {
    scale: f64,
}

fn sdp_row(q: &[f64], k: &NdArray, v: &NdArray, scale: f64, probs: &mut [f64], out: &mut [f64]) {
    for (j, p) in probs.iter_mut().enumerate() {
        *p = dot(q, k.row(j)) * scale;
    }
    softmax_in_place(probs);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &p) in probs.iter().enumerate() {
        for (o, &vv) in out.iter_mut().zip(v.row(j)) {
            *o += p * vv;
        }
    }
}

/// Forward value of attention without recording a graph node.
pub fn sdp_forward(q: &NdArray, k: &NdArray, v: &NdArray) -> Result<NdArray> {
    check_sdp(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let (nq, nk, dv) = (q.rows(), k.rows(), v.cols());
    let mut out = vec![0.0; nq * dv];
    out.par_chunks_mut(dv.max(1)).enumerate().for_each_init(
        || vec![0.0; nk],
        |probs, (i, o)| sdp_row(q.row(i), k, v, scale, probs, o),
    );
    NdArray::matrix(nq, dv, out)
}

fn check_sdp(q: &NdArray, k: &NdArray, v: &NdArray) -> Result<()> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::shape("sdp", "operands must be matrices"));
    }
    if q.cols() == 0 {
        return Err(Error::invalid("sdp: key width d = 0"));
    }
    if q.cols() != k.cols() {
        return Err(Error::shape("sdp", format!("query width {} != key width {}", q.cols(), k.cols())));
    }
    if k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::shape(
            "sdp",
            format!("{} keys but {} values", k.rows(), v.rows()),
        ));
    }
    Ok(())
}

impl CustomOp for SdpOp {
    fn name(&self) -> &'static str {
        "sdp"
    }

    fn backward(&self, inputs: &[&NdArray], output: &NdArray, grad: &NdArray, needs: &[bool]) -> Vec<Option<NdArray>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (nq, d, nk, dv) = (q.rows(), q.cols(), k.rows(), v.cols());
        let scale = self.scale;
        let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..nq.div_ceil(SDP_BLOCK))
            .into_par_iter()
            .map(|b| {
                let rows = b * SDP_BLOCK..((b + 1) * SDP_BLOCK).min(nq);
                let mut dq = vec![0.0; rows.len() * d];
                let mut dk = vec![0.0; nk * d];
                let mut dvv = vec![0.0; nk * dv];
                let mut p = vec![0.0; nk];
                let mut scratch = vec![0.0; dv];
                for (local, i) in rows.enumerate() {
                    let qi = q.row(i);
                    sdp_row(qi, k, v, scale, &mut p, &mut scratch);
                    let go = grad.row(i);
                    let go_o = dot(go, output.row(i));
                    let dqi = &mut dq[local * d..(local + 1) * d];
                    for j in 0..nk {
                        let ds = p[j] * (dot(go, v.row(j)) - go_o) * scale;
                        let kj = k.row(j);
                        for a in 0..d {
                            dqi[a] += ds * kj[a];
                        }
                        let dkj = &mut dk[j * d..(j + 1) * d];
                        for a in 0..d {
                            dkj[a] += ds * qi[a];
                        }
                        let dvj = &mut dvv[j * dv..(j + 1) * dv];
                        for a in 0..dv {
                            dvj[a] += p[j] * go[a];
                        }
                    }
                }
                (dq, dk, dvv)
            })
            .collect();
        let mut dq = Vec::with_capacity(nq * d);
        let mut dk = NdArray::zeros(&[nk, d]);
        let mut dvv = NdArray::zeros(&[nk, dv]);
        for (bq, bk, bv) in blocks {
            dq.extend(bq);
            dk.data_mut().iter_mut().zip(bk).for_each(|(a, b)| *a += b);
            dvv.data_mut().iter_mut().zip(bv).for_each(|(a, b)| *a += b);
        }
        let dq = NdArray::matrix(nq, d, dq).expect("dq shape");
        vec![
            needs[0].then_some(dq),
            needs[1].then_some(dk),
            needs[2].then_some(dvv),
        ]
    }
}

/// `softmax(Q Kᵀ / √d) V` with a row-wise softmax.
pub fn sdp(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qa, ka, va) = (g.value(q), g.value(k), g.value(v));
    let out = sdp_forward(qa, ka, va)?;
    let macs = (qa.rows() * ka.rows() * (qa.cols() + va.cols())) as u64;
    let scale = 1.0 / (qa.cols() as f64).sqrt();
    Ok(g.custom(SdpOp { scale }, &[q, k, v], out, macs))
}

/// Row range of pooling group `j` out of `n` over `rows` rows.
pub fn pool_group(j: usize, n: usize, rows: usize) -> std::ops::Range<usize> {
    j * rows / n..(j + 1) * rows / n
}

fn pooling_matrix(n: usize, rows: usize) -> NdArray {
    let mut p = NdArray::zeros(&[n, rows]);
    for j in 0..n {
        let r = pool_group(j, n, rows);
        let w = 1.0 / r.len() as f64;
        for i in r {
            p.data_mut()[j * rows + i] = w;
        }
    }
    p
}

/// Parameter names of the attention stack.
pub mod names {
    pub const PROJ_W: &str = "esaa/proj/w";
    pub const PROJ_B: &str = "esaa/proj/b";
    pub const AGENT_W1: &str = "esaa/agent/w1";
    pub const AGENT_B1: &str = "esaa/agent/b1";
    pub const AGENT_W2: &str = "esaa/agent/w2";
    pub const AGENT_B2: &str = "esaa/agent/b2";
    pub const AUDIO_W: &str = "fusion/audio/w";
    pub const AUDIO_B: &str = "fusion/audio/b";
    pub const EYE_W: &str = "fusion/eye/w";
    pub const EYE_B: &str = "fusion/eye/b";
    pub const POSE_W: &str = "fusion/pose/w";
    pub const POSE_B: &str = "fusion/pose/b";
    pub const NULL: &str = "fusion/null";
}

/// Pool `f_v` into `n` contiguous near-equal groups, then apply the agent
/// perceptron `silu(x W1 + b1) W2 + b2`.
pub fn make_agents(g: &mut Graph, store: &ParamStore, f_v: Var, n: usize) -> Result<Var> {
    let rows = g.shape(f_v).first().copied().unwrap_or(0);
    if n == 0 || n > rows {
        return Err(Error::invalid(format!("make_agents: {n} agents for {rows} spatial tokens")));
    }
    let pooled = if n == rows {
        f_v
    } else {
        let p = g.constant(pooling_matrix(n, rows));
        g.matmul(p, f_v)?
    };
    let w1 = store.leaf(g, names::AGENT_W1)?;
    let b1 = store.leaf(g, names::AGENT_B1)?;
    let w2 = store.leaf(g, names::AGENT_W2)?;
    let b2 = store.leaf(g, names::AGENT_B2)?;
    let h = g.matmul(pooled, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.silu(h);
    let a = g.matmul(h, w2)?;
    g.add_row(a, b2)
}

/// Agent aggregation `V_A = SDP(A, cond, cond)` then broadcast
/// `SDP(f_v, A, V_A)` with `n` agents.
pub fn agent_cross_attention(g: &mut Graph, store: &ParamStore, f_v: Var, cond: Var, n: usize) -> Result<Var> {
    if g.shape(f_v).last() != g.shape(cond).last() {
        return Err(Error::shape(
            "agent_cross_attention",
            format!("spatial width {:?} != condition width {:?}", g.shape(f_v), g.shape(cond)),
        ));
    }
    if g.shape(cond).first() == Some(&0) {
        return Err(Error::invalid("agent_cross_attention: empty condition sequence"));
    }
    let agents = make_agents(g, store, f_v, n)?;
    let va = sdp(g, agents, cond, cond)?;
    sdp(g, f_v, agents, va)
}

/// The quadratic baseline: every spatial token acts as an agent.
pub fn full_cross_attention(g: &mut Graph, f_v: Var, cond: Var) -> Result<Var> {
    let va = sdp(g, f_v, cond, cond)?;
    sdp(g, f_v, f_v, va)
}

/// Periodic positional encoding of frame `t`.
pub fn ppe(t: usize, d_model: usize, period: usize) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(Error::invalid("ppe: period must be at least 1"));
    }
    let pos = (t % period) as f64;
    Ok((0..d_model)
        .map(|c| {
            let i = c / 2;
            let arg = pos / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            if c % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect())
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = store.leaf(g, w)?;
    let bv = store.leaf(g, b)?;
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

/// Condition sequence `[proj(f_a), proj(f_e), proj(f_p), f_∅] + PPE(t)`.
pub fn fuse_conditions(g: &mut Graph, store: &ParamStore, row: &ConditionRow, config: &AgentConfig) -> Result<Var> {
    let wa = store.get(names::AUDIO_W)?;
    if wa.rows() != row.audio.len() {
        return Err(Error::shape(
            names::AUDIO_W,
            format!("audio row has {} values, projection expects {}", row.audio.len(), wa.rows()),
        ));
    }
    if wa.cols() != config.d_model {
        return Err(Error::shape(
            names::AUDIO_W,
            format!("projection width {} != d_model {}", wa.cols(), config.d_model),
        ));
    }
    let fa = g.constant(NdArray::matrix(1, row.audio.len(), row.audio.to_vec())?);
    let fe = g.constant(NdArray::matrix(1, 1, vec![row.blink])?);
    let fp = g.constant(NdArray::matrix(1, POSE_WIDTH, row.pose.to_vec())?);
    let ta = linear(g, store, fa, names::AUDIO_W, names::AUDIO_B)?;
    let te = linear(g, store, fe, names::EYE_W, names::EYE_B)?;
    let tp = linear(g, store, fp, names::POSE_W, names::POSE_B)?;
    let null = store.leaf(g, names::NULL)?;
    let seq = g.concat_rows(&[ta, te, tp, null])?;
    let enc = ppe(row.t, config.d_model, config.period)?;
    let pe = g.constant(NdArray::matrix(1, config.d_model, enc)?);
    g.add_row(seq, pe)
}

/// Dimensions of the attention stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Esaa {
    pub config: AgentConfig,
    /// Width of the spatial features entering the projection.
    pub feature_width: usize,
    pub audio_width: usize,
}

impl Esaa {
    pub fn new(config: AgentConfig, feature_width: usize, audio_width: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            feature_width,
            audio_width,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.config.d_model;
        let mut dense = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            store.insert(name, NdArray::matrix(rows, cols, data).expect("dense shape"), true);
        };
        dense(store, names::PROJ_W, self.feature_width, d);
        dense(store, names::AGENT_W1, d, d);
        dense(store, names::AGENT_W2, d, d);
        dense(store, names::AUDIO_W, self.audio_width.max(1), d);
        dense(store, names::EYE_W, 1, d);
        dense(store, names::POSE_W, POSE_WIDTH, d);
        for b in [
            names::PROJ_B,
            names::AGENT_B1,
            names::AGENT_B2,
            names::AUDIO_B,
            names::EYE_B,
            names::POSE_B,
            names::NULL,
        ] {
            store.insert(b, NdArray::zeros(&[1, d]), true);
        }
    }

    /// `f_d = P(f_v) + ACA(P(f_v), cond)` where `P` is the input projection.
    pub fn deform_features(&self, g: &mut Graph, store: &ParamStore, f_v: Var, row: &ConditionRow) -> Result<Var> {
        let rows = g.shape(f_v).first().copied().unwrap_or(0);
        let p = linear(g, store, f_v, names::PROJ_W, names::PROJ_B)?;
        let cond = fuse_conditions(g, store, row, &self.config)?;
        let n = self.config.agent_count(rows).min(rows.max(1));
        let att = agent_cross_attention(g, store, p, cond, n)?;
        g.add(p, att)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agent_count_rounds_with_floor_of_one() {
        let c = AgentConfig::default();
        assert_eq!(c.agent_count(4096), 20);
        assert_eq!(c.agent_count(50), 1);
        assert_eq!(c.agent_count(1), 1);
    }

    #[test]
    fn pool_groups_cover_rows_once() {
        for (n, rows) in [(3, 10), (1, 7), (7, 7), (4, 9)] {
            let mut seen = vec![0; rows];
            for j in 0..n {
                for i in pool_group(j, n, rows) {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn sdp_rejects_zero_width() {
        let q = NdArray::zeros(&[2, 0]);
        let v = NdArray::zeros(&[1, 3]);
        assert!(sdp_forward(&q, &q.clone(), &v).is_err());
    }

    #[test]
    fn track_round_trip() {
        let t = ConditionTrack::new(
            vec![vec![0.5, -1.0], vec![0.25, 2.0]],
            vec![0.0, 1.0],
            vec![[0.1, 0.2, 0.3, 0.4, 0.5, 0.625]; 2],
        )
        .unwrap();
        let back = ConditionTrack::from_bytes(&t.to_bytes(), Path::new("t")).unwrap();
        assert_eq!(back.audio, t.audio);
        assert_eq!(back.blink, t.blink);
        assert!((back.pose[0][0] - 0.1).abs() < 1e-7);
        assert!(ConditionTrack::new(vec![vec![0.0]], vec![1.5], vec![[0.0; 6]]).is_err());
    }
}
