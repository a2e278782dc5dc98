//! Two-stage training: the canonical cloud from neutral views, then the
//! audio-driven deformation over all training frames.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{SyntheticScene, BACKGROUND};
use super::{Model, ModelConfig, DEFORM_PREFIXES, STATIC_PREFIXES};
use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{l1_loss, stage1_loss, stage2_loss, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::splat::render_node;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub static_iterations: usize,
    pub deform_iterations: usize,
    pub static_lr: f64,
    pub deform_lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Keep training stage-1 parameters during stage 2.
    pub fine_tune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            static_iterations: 2000,
            deform_iterations: 2000,
            static_lr: 5e-3,
            deform_lr: 1e-3,
            weights: LossWeights::default(),
            seed: 42,
            fine_tune: false,
        }
    }
}

impl TrainConfig {
    pub fn write(&self, kv: &mut KeyValues) {
        self.model.write(kv);
        kv.set("train.static_iterations", self.static_iterations);
        kv.set("train.deform_iterations", self.deform_iterations);
        kv.set("train.static_lr", self.static_lr);
        kv.set("train.deform_lr", self.deform_lr);
        kv.set("train.seed", self.seed);
        kv.set("train.fine_tune", self.fine_tune);
        kv.set("loss.dssim", self.weights.dssim);
        kv.set("loss.lpips", self.weights.lpips);
        kv.set("loss.lip", self.weights.lip);
    }

    pub fn read(&mut self, kv: &KeyValues) -> Result<()> {
        self.model.read(kv)?;
        kv.read_into("train.static_iterations", &mut self.static_iterations)?;
        kv.read_into("train.deform_iterations", &mut self.deform_iterations)?;
        kv.read_into("train.static_lr", &mut self.static_lr)?;
        kv.read_into("train.deform_lr", &mut self.deform_lr)?;
        kv.read_into("train.seed", &mut self.seed)?;
        kv.read_into("train.fine_tune", &mut self.fine_tune)?;
        kv.read_into("loss.dssim", &mut self.weights.dssim)?;
        kv.read_into("loss.lpips", &mut self.weights.lpips)?;
        kv.read_into("loss.lip", &mut self.weights.lip)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, lr) in [("static_lr", self.static_lr), ("deform_lr", self.deform_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::invalid(format!("train.{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    /// Camera index in stage 1, frame index in stage 2.
    pub sample: usize,
    pub total: f64,
    pub l1: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("iteration,sample,total,l1,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{},{:.9e},{:.9e},{:.6e}", r.iteration, r.sample, r.total, r.l1, r.lr);
    }
    s
}

pub fn write_loss_csv(log: &[LossRecord], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, loss_csv(log).as_bytes())
}

fn check_finite(v: f64, stage: &str, iteration: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{stage} loss diverged at iteration {iteration}")))
    }
}

/// Model and initial stage-1 parameters for a scene.
pub fn init_static(scene: &SyntheticScene, config: &TrainConfig) -> Result<(Model, ParamStore)> {
    let model = Model::new(config.model.clone(), scene.spec.audio_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    model.init_static(&mut store, &mut rng, &scene.points, &scene.point_colors)?;
    Ok((model, store))
}

fn checkpoint(model: &Model, store: &ParamStore, config: &TrainConfig, stage: usize) -> Checkpoint {
    let mut meta = KeyValues::default();
    config.write(&mut meta);
    meta.overlay(&model.meta());
    meta.set("stage", stage);
    Checkpoint::new(meta, store.clone())
}

/// Stage 1: fit triplane, KAN-static and seed rows to the neutral views,
/// cycling through the ring cameras.
pub fn train_static(scene: &SyntheticScene, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if scene.neutral.is_empty() {
        return Err(Error::invalid("train_static: scene has no neutral views"));
    }
    let (model, mut store) = init_static(scene, config)?;
    let mut opt = Adam::new(AdamConfig::with_lr(config.static_lr), config.static_iterations);
    let mut log = Vec::with_capacity(config.static_iterations);
    for it in 0..config.static_iterations {
        let view = it % scene.neutral.len();
        let mut g = Graph::new();
        let f = model.features(&mut g, &store)?;
        let raw = model.static_raw(&mut g, &store, f)?;
        let img = render_node(&mut g, raw, model.layout, &scene.cameras[view], BACKGROUND)?;
        let gt = g.constant(scene.neutral[view].to_ndarray());
        let l1 = l1_loss(&mut g, img, gt)?;
        let loss = stage1_loss(&mut g, img, gt, &config.weights)?;
        let total = g.value(loss).data()[0];
        check_finite(total, "stage-1", it)?;
        log.push(LossRecord {
            iteration: it,
            sample: view,
            total,
            l1: g.value(l1).data()[0],
            lr: opt.current_lr(),
        });
        let grads = g.backward(loss)?;
        opt.step(&mut store, grads.params())?;
    }
    Ok(TrainOutput {
        checkpoint: checkpoint(&model, &store, config, 1),
        log,
    })
}

/// Stage 2: learn ESAA, fusion and KAN-deform over the training frames
/// (all but the last 20%), sampled uniformly with the seeded generator.
pub fn train_deform(scene: &SyntheticScene, config: &TrainConfig, static_ckpt: &Checkpoint) -> Result<TrainOutput> {
    config.validate()?;
    if static_ckpt.meta.get::<usize>("stage")? != Some(1) && static_ckpt.meta.get::<usize>("stage")? != Some(2) {
        return Err(Error::invalid("train_deform: checkpoint is not a stage-1 checkpoint"));
    }
    for prefix in STATIC_PREFIXES {
        if !static_ckpt.params.iter().any(|(n, _)| n.starts_with(prefix)) {
            return Err(Error::invalid(format!("train_deform: checkpoint has no `{prefix}` parameters")));
        }
    }
    let mut model_cfg = ModelConfig::default();
    model_cfg.read(&static_ckpt.meta)?;
    // stage-2 settings from the run config take precedence
    model_cfg.agent = config.model.agent;
    let model = Model::new(model_cfg, scene.spec.audio_width)?;
    let mut store = static_ckpt.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    model.init_deform(&mut store, &mut rng);
    for prefix in STATIC_PREFIXES {
        store.set_trainable(prefix, config.fine_tune);
    }
    for prefix in DEFORM_PREFIXES {
        store.set_trainable(prefix, true);
    }

    let train_frames = scene.test_start().max(1);
    let frozen = if config.fine_tune {
        None
    } else {
        let mut g = Graph::new();
        let f = model.features(&mut g, &store)?;
        let raw = model.static_raw(&mut g, &store, f)?;
        Some((g.value(f).clone(), g.value(raw).clone()))
    };

    let mut opt = Adam::new(AdamConfig::with_lr(config.deform_lr), config.deform_iterations);
    let mut log = Vec::with_capacity(config.deform_iterations);
    for it in 0..config.deform_iterations {
        let t = rng.gen_range(0..train_frames);
        let row = scene.track.row(t)?;
        let mut g = Graph::new();
        let (f, base) = match &frozen {
            Some((f, raw)) => (g.constant(f.clone()), g.constant(raw.clone())),
            None => {
                let f = model.features(&mut g, &store)?;
                let raw = model.static_raw(&mut g, &store, f)?;
                (f, raw)
            }
        };
        let d = model.deltas(&mut g, &store, f, &row)?;
        let raw = g.add(base, d)?;
        let cam = &scene.cameras[scene.frame_cameras[t]];
        let img = render_node(&mut g, raw, model.layout, cam, BACKGROUND)?;
        let gt = g.constant(scene.frames[t].to_ndarray());
        let l1 = l1_loss(&mut g, img, gt)?;
        let loss = stage2_loss(&mut g, img, gt, &scene.masks[t], &config.weights)?;
        let total = g.value(loss).data()[0];
        check_finite(total, "stage-2", it)?;
        log.push(LossRecord {
            iteration: it,
            sample: t,
            total,
            l1: g.value(l1).data()[0],
            lr: opt.current_lr(),
        });
        let grads = g.backward(loss)?;
        opt.step(&mut store, grads.params())?;
    }
    Ok(TrainOutput {
        checkpoint: checkpoint(&model, &store, config, 2),
        log,
    })
}
