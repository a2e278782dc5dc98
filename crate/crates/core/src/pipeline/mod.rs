//! End-to-end plumbing: the model assembled from the modules, synthetic
//! scenes, two-stage training, sequence rendering, evaluation and the
//! attention benchmark.

pub mod bench;
pub mod eval;
pub mod render;
pub mod scene;
pub mod train;

use rand::Rng;

use crate::attention::{AgentConfig, ConditionRow, Esaa};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::gaussians::{RawLayout, FEATURE_SCALE, FEATURE_SHIFT, SEED_RAW};
use crate::graph::{Graph, Var};
use crate::kan::{map_deform, map_static, KanNetwork, SplineGrid};
use crate::params::ParamStore;
use crate::sh::rgb_to_dc;
use crate::tensor::NdArray;
use crate::triplane::{SpatialPoint, TriplaneConfig, TriplaneEncoder};

/// Fixed per-Gaussian anchor positions at which the triplane is queried.
pub const ANCHORS: &str = "scene/anchors";
pub const STATIC_KAN: &str = "kan_static";
pub const DEFORM_KAN: &str = "kan_deform";

/// Parameter prefixes trained in stage 1.
pub const STATIC_PREFIXES: [&str; 3] = ["triplane/", "kan_static/", "seeds/"];
/// Parameter prefixes trained in stage 2.
pub const DEFORM_PREFIXES: [&str; 3] = ["kan_deform/", "esaa/", "fusion/"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub sh_degree: usize,
    pub triplane: TriplaneConfig,
    pub kan_hidden: usize,
    pub grid: SplineGrid,
    pub agent: AgentConfig,
    /// Opacity of freshly seeded Gaussians.
    pub init_opacity: f64,
    /// Fixed factor on the position columns of both the static rows and
    /// the deltas; with Adam it acts as a per-attribute step size.
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sh_degree: 1,
            triplane: TriplaneConfig::default(),
            kan_hidden: 64,
            grid: SplineGrid::default(),
            agent: AgentConfig::default(),
            init_opacity: 0.1,
            position_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn write(&self, kv: &mut KeyValues) {
        kv.set("model.sh_degree", self.sh_degree);
        kv.set("model.kan_hidden", self.kan_hidden);
        kv.set("model.grid_intervals", self.grid.intervals);
        kv.set("model.spline_degree", self.grid.degree);
        kv.set("model.init_opacity", self.init_opacity);
        kv.set("model.position_scale", self.position_scale);
        kv.set("attention.ratio", self.agent.ratio);
        kv.set("attention.d_model", self.agent.d_model);
        kv.set("attention.period", self.agent.period);
        self.triplane.write(kv);
    }

    pub fn read(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("model.sh_degree", &mut self.sh_degree)?;
        kv.read_into("model.kan_hidden", &mut self.kan_hidden)?;
        kv.read_into("model.grid_intervals", &mut self.grid.intervals)?;
        kv.read_into("model.spline_degree", &mut self.grid.degree)?;
        kv.read_into("model.init_opacity", &mut self.init_opacity)?;
        kv.read_into("model.position_scale", &mut self.position_scale)?;
        kv.read_into("attention.ratio", &mut self.agent.ratio)?;
        kv.read_into("attention.d_model", &mut self.agent.d_model)?;
        kv.read_into("attention.period", &mut self.agent.period)?;
        self.triplane.read(kv)?;
        self.agent.validate()?;
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::invalid("model.init_opacity must lie in (0, 1)"));
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return Err(Error::invalid("model.position_scale must be positive"));
        }
        Ok(())
    }
}

/// The assembled network: triplane → KAN-static for the canonical cloud,
/// ESAA → KAN-deform for per-frame offsets.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: RawLayout,
    pub encoder: TriplaneEncoder,
    pub static_kan: KanNetwork,
    pub deform_kan: KanNetwork,
    pub esaa: Esaa,
}

impl Model {
    pub fn new(config: ModelConfig, audio_width: usize) -> Result<Self> {
        let layout = RawLayout::new(config.sh_degree)?;
        let encoder = TriplaneEncoder::new(config.triplane.clone())?;
        let fw = config.triplane.output_width();
        let w = layout.width();
        let static_kan = KanNetwork::new(STATIC_KAN, &[fw, config.kan_hidden, w], config.grid)?;
        let deform_kan = KanNetwork::new(DEFORM_KAN, &[config.agent.d_model, config.kan_hidden, w], config.grid)?;
        let esaa = Esaa::new(config.agent, fw, audio_width)?;
        Ok(Self {
            config,
            layout,
            encoder,
            static_kan,
            deform_kan,
            esaa,
        })
    }

    /// Rebuild from checkpoint metadata.
    pub fn from_meta(meta: &KeyValues) -> Result<Self> {
        let mut config = ModelConfig::default();
        config.read(meta)?;
        let audio_width = meta
            .get::<usize>("model.audio_width")?
            .ok_or_else(|| Error::invalid("checkpoint metadata lacks model.audio_width"))?;
        Self::new(config, audio_width)
    }

    pub fn meta(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        self.config.write(&mut kv);
        kv.set("model.audio_width", self.esaa.audio_width);
        kv
    }

    /// Stage-1 parameters: anchors, raw seed rows from coloured points,
    /// triplane tables and KAN-static (last layer zero, so the initial cloud
    /// is exactly the seeds).
    pub fn init_static(
        &self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        points: &[[f64; 3]],
        colors: &[[f64; 3]],
    ) -> Result<()> {
        if points.is_empty() || points.len() != colors.len() {
            return Err(Error::invalid("init_static: need one colour per seed point and at least one point"));
        }
        let n = points.len();
        let w = self.layout.width();
        let scales = neighbour_scales(points);
        let logit = (self.config.init_opacity / (1.0 - self.config.init_opacity)).ln();
        let mut raw = vec![0.0; n * w];
        for (i, (p, c)) in points.iter().zip(colors).enumerate() {
            let row = &mut raw[i * w..(i + 1) * w];
            for k in 0..3 {
                row[k] = p[k] / self.config.position_scale;
            }
            for k in 0..3 {
                row[RawLayout::SCALE + k] = scales[i].ln();
            }
            row[RawLayout::ROTATION] = 1.0;
            for ch in 0..3 {
                row[RawLayout::SH + ch] = rgb_to_dc(c[ch]);
            }
            row[self.layout.opacity()] = logit;
        }
        store.insert(SEED_RAW, NdArray::matrix(n, w, raw)?, true);
        let anchors: Vec<f64> = points.iter().flatten().copied().collect();
        store.insert(ANCHORS, NdArray::matrix(n, 3, anchors)?, false);
        self.encoder.init(store, rng, 0.1);
        self.static_kan.init(store, rng, 0.1, true);
        Ok(())
    }

    /// Stage-2 parameters; KAN-deform starts with a zero last layer so the
    /// initial deltas are exactly zero.
    pub fn init_deform(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.esaa.init(store, rng);
        self.deform_kan.init(store, rng, 0.1, true);
    }

    pub fn anchors(store: &ParamStore) -> Result<Vec<SpatialPoint>> {
        let a = store.get(ANCHORS)?;
        Ok((0..a.rows()).map(|i| SpatialPoint::from_slice(a.row(i))).collect())
    }

    pub fn num_gaussians(store: &ParamStore) -> Result<usize> {
        Ok(store.get(ANCHORS)?.rows())
    }

    /// Standardized triplane features `3·f_v − 3` at the anchors.
    pub fn features(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let anchors = Self::anchors(store)?;
        let f_v = self.encoder.encode_batch(g, store, &anchors)?;
        Ok(g.affine(f_v, FEATURE_SCALE, FEATURE_SHIFT))
    }

    /// Multiply the position columns of `raw` by the position scale.
    fn scale_positions(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        let w = self.layout.width();
        let mut row = vec![1.0; w];
        row[..3].fill(self.config.position_scale);
        let row = g.constant(NdArray::matrix(1, w, row)?);
        let n = g.shape(raw)[0];
        let factors = g.broadcast_rows(row, n)?;
        g.mul(raw, factors)
    }

    /// Canonical raw rows from standardized features.
    pub fn static_raw(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let mut raw = map_static(&self.static_kan, g, store, features, &self.layout)?;
        if store.contains(SEED_RAW) {
            let seeds = store.leaf(g, SEED_RAW)?;
            raw = g.add(raw, seeds)?;
        }
        self.scale_positions(g, raw)
    }

    /// Per-frame raw offsets.
    pub fn deltas(&self, g: &mut Graph, store: &ParamStore, features: Var, row: &ConditionRow) -> Result<Var> {
        let f_d = self.esaa.deform_features(g, store, features, row)?;
        let d = map_deform(&self.deform_kan, g, store, f_d, &self.layout)?;
        self.scale_positions(g, d)
    }

    /// Static rows plus offsets for one frame.
    pub fn frame_raw(&self, g: &mut Graph, store: &ParamStore, row: &ConditionRow) -> Result<Var> {
        let f = self.features(g, store)?;
        let base = self.static_raw(g, store, f)?;
        let d = self.deltas(g, store, f, row)?;
        g.add(base, d)
    }

    /// Canonical raw rows as a plain array.
    pub fn static_raw_value(&self, store: &ParamStore) -> Result<NdArray> {
        let mut g = Graph::new();
        let f = self.features(&mut g, store)?;
        let raw = self.static_raw(&mut g, store, f)?;
        Ok(g.value(raw).clone())
    }
}

/// Root-mean-square distance to the three nearest other points, floored.
fn neighbour_scales(points: &[[f64; 3]]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
                if d < best[2] {
                    best[2] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let finite: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            if finite.is_empty() {
                0.05
            } else {
                (finite.iter().sum::<f64>() / finite.len() as f64).sqrt().max(1e-3)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbour_scale_of_unit_grid() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let s = neighbour_scales(&pts);
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn meta_round_trip() {
        let m = Model::new(ModelConfig::default(), 8).unwrap();
        let back = Model::from_meta(&m.meta()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.esaa.audio_width, 8);
    }
}
