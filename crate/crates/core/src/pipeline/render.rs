//! Per-frame rendering of a trained model: features, offsets, composition,
//! rasterization.

use rayon::prelude::*;

use super::scene::BACKGROUND;
use super::Model;
use crate::attention::ConditionTrack;
use crate::camera::Camera;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gaussians::{compose, GaussianCloud};
use crate::graph::Graph;
use crate::image::Image;
use crate::params::ParamStore;
use crate::splat::render_cloud;
use crate::tensor::NdArray;

/// A model with its parameters, ready to render.
pub struct Renderer {
    pub model: Model,
    pub params: ParamStore,
    features: NdArray,
    static_raw: NdArray,
}

impl Renderer {
    pub fn new(model: Model, params: ParamStore) -> Result<Self> {
        let mut g = Graph::new();
        let f = model.features(&mut g, &params)?;
        let raw = model.static_raw(&mut g, &params, f)?;
        let (features, static_raw) = (g.value(f).clone(), g.value(raw).clone());
        Ok(Self {
            model,
            params,
            features,
            static_raw,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(Model::from_meta(&ckpt.meta)?, ckpt.params.clone())
    }

    pub fn has_deform(&self) -> bool {
        self.params.contains(crate::attention::names::PROJ_W)
    }

    /// The canonical cloud, no offsets.
    pub fn static_cloud(&self) -> Result<GaussianCloud> {
        GaussianCloud::from_raw(&self.static_raw, self.model.layout)
    }

    /// Raw offsets for frame `t` (zeros for a stage-1 checkpoint).
    pub fn deltas(&self, track: &ConditionTrack, t: usize) -> Result<NdArray> {
        if !self.has_deform() {
            return Ok(NdArray::zeros(self.static_raw.shape()));
        }
        let row = track.row(t)?;
        let mut g = Graph::new();
        let f = g.constant(self.features.clone());
        let d = self.model.deltas(&mut g, &self.params, f, &row)?;
        Ok(g.value(d).clone())
    }

    pub fn frame_cloud(&self, track: &ConditionTrack, t: usize) -> Result<GaussianCloud> {
        compose(&self.static_raw, &self.deltas(track, t)?, self.model.layout)
    }

    pub fn render_static(&self, camera: &Camera) -> Result<Image> {
        render_cloud(&self.static_cloud()?, camera, BACKGROUND)
    }

    pub fn render_frame(&self, track: &ConditionTrack, t: usize, camera: &Camera) -> Result<Image> {
        render_cloud(&self.frame_cloud(track, t)?, camera, BACKGROUND)
    }
}

/// Render every frame of `track`. `cameras` holds one camera per frame, or a
/// single camera used for all frames. Frames render in parallel; each is
/// computed independently, so the output does not depend on thread count.
pub fn render_sequence(renderer: &Renderer, track: &ConditionTrack, cameras: &[Camera]) -> Result<Vec<Image>> {
    if track.is_empty() {
        return Err(Error::invalid("render_sequence: empty track"));
    }
    if cameras.len() != 1 && cameras.len() != track.len() {
        return Err(Error::invalid(format!(
            "render_sequence: {} cameras for {} frames",
            cameras.len(),
            track.len()
        )));
    }
    (0..track.len())
        .into_par_iter()
        .map(|t| renderer.render_frame(track, t, &cameras[if cameras.len() == 1 { 0 } else { t }]))
        .collect()
}
