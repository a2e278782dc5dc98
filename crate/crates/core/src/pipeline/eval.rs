//! Image metrics, the synthetic keypoint distance and the mouth-aperture
//! proxy.

use std::fmt::Write as _;

use super::render::Renderer;
use super::scene::SyntheticScene;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::image::Image;
use crate::losses::{mean_abs, mse, psnr, ssim};

/// Per-frame metrics plus their means.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub keypoint_distance: Vec<f64>,
}

impl Metrics {
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    pub fn mean_keypoint_distance(&self) -> f64 {
        mean(&self.keypoint_distance)
    }

    /// CSV with one row per frame and a final `mean` row. Infinite PSNR is
    /// written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim,keypoint_distance\n");
        let fmt = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.6}") };
        for i in 0..self.psnr.len() {
            let _ = writeln!(
                s,
                "{i},{},{},{}",
                fmt(self.psnr[i]),
                fmt(self.ssim[i]),
                fmt(self.keypoint_distance[i])
            );
        }
        let _ = writeln!(
            s,
            "mean,{},{},{}",
            fmt(self.mean_psnr()),
            fmt(self.mean_ssim()),
            fmt(self.mean_keypoint_distance())
        );
        s
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// PSNR, SSIM and mean marker distance for aligned frame lists. Keypoints are
/// `[upper, lower]` pixel positions per frame.
pub fn evaluate(
    frames: &[Image],
    gt: &[Image],
    keypoints: &[[[f64; 2]; 2]],
    gt_keypoints: &[[[f64; 2]; 2]],
) -> Result<Metrics> {
    if frames.len() != gt.len() || keypoints.len() != frames.len() || gt_keypoints.len() != frames.len() {
        return Err(Error::invalid(format!(
            "evaluate: {} frames, {} ground-truth frames, {} / {} keypoint rows",
            frames.len(),
            gt.len(),
            keypoints.len(),
            gt_keypoints.len()
        )));
    }
    let mut m = Metrics {
        psnr: Vec::with_capacity(frames.len()),
        ssim: Vec::with_capacity(frames.len()),
        keypoint_distance: Vec::with_capacity(frames.len()),
    };
    for ((a, b), (k, kg)) in frames.iter().zip(gt).zip(keypoints.iter().zip(gt_keypoints)) {
        if (a.width, a.height) != (b.width, b.height) {
            return Err(Error::shape("evaluate", "frame sizes differ"));
        }
        m.psnr.push(psnr(&a.data, &b.data));
        m.ssim.push(ssim(&a.data, &b.data, a.height, a.width)?);
        let d: f64 = (0..2).map(|j| ((k[j][0] - kg[j][0]).powi(2) + (k[j][1] - kg[j][1]).powi(2)).sqrt()).sum();
        m.keypoint_distance.push(d / 2.0);
    }
    Ok(m)
}

/// Pearson correlation; zero when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Gaussians standing in for each lip marker: the `MARKER_NEIGHBOURS`
/// canonical Gaussians nearest to a marker's rest position among those
/// closer to it than to the other marker.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerAssignment {
    pub members: [Vec<usize>; 2],
}

pub const MARKER_NEIGHBOURS: usize = 8;

impl MarkerAssignment {
    pub fn new(canonical: &GaussianCloud, markers: [[f64; 3]; 2]) -> Result<Self> {
        let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        let mut sides: [Vec<(f64, usize)>; 2] = [Vec::new(), Vec::new()];
        for (i, g) in canonical.gaussians.iter().enumerate() {
            let d = [dist(g.position, markers[0]), dist(g.position, markers[1])];
            let j = if d[0] <= d[1] { 0 } else { 1 };
            sides[j].push((d[j], i));
        }
        if sides.iter().any(Vec::is_empty) {
            return Err(Error::invalid("no Gaussians on one side of the lip markers"));
        }
        let members = sides.map(|mut v| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            v.into_iter().take(MARKER_NEIGHBOURS).map(|(_, i)| i).collect()
        });
        Ok(Self { members })
    }

    /// Opacity-weighted mean position of each marker's Gaussians, projected.
    pub fn project(&self, cloud: &GaussianCloud, camera: &Camera) -> Result<[[f64; 2]; 2]> {
        let mut out = [[0.0; 2]; 2];
        for (j, idx) in self.members.iter().enumerate() {
            let mut p = [0.0; 3];
            let mut wsum = 0.0;
            for &i in idx {
                let g = &cloud.gaussians[i];
                for k in 0..3 {
                    p[k] += g.opacity * g.position[k];
                }
                wsum += g.opacity;
            }
            let p = p.map(|v| v / wsum.max(1e-12));
            out[j] = camera
                .project_point(p)
                .ok_or_else(|| Error::invalid("lip marker behind camera"))?;
        }
        Ok(out)
    }
}

/// Rendered-cloud keypoints for frames `range` of a scene.
pub fn predicted_keypoints(
    renderer: &Renderer,
    scene: &SyntheticScene,
    frames: std::ops::Range<usize>,
) -> Result<Vec<[[f64; 2]; 2]>> {
    let assign = MarkerAssignment::new(&renderer.static_cloud()?, scene.rest_markers())?;
    frames
        .map(|t| {
            let cloud = renderer.frame_cloud(&scene.track, t)?;
            assign.project(&cloud, &scene.cameras[scene.frame_cameras[t]])
        })
        .collect()
}

/// Vertical image gap between the lower and upper projected markers
/// (image y points down, so an open mouth is positive).
pub fn aperture_proxy(k: &[[f64; 2]; 2]) -> f64 {
    k[1][1] - k[0][1]
}

/// Mean L1 of the canonical render against every neutral ring view.
pub fn neutral_l1(renderer: &Renderer, scene: &SyntheticScene) -> Result<f64> {
    let mut total = 0.0;
    for (cam, gt) in scene.cameras.iter().zip(&scene.neutral) {
        total += mean_abs(&renderer.render_static(cam)?.data, &gt.data);
    }
    Ok(total / scene.cameras.len() as f64)
}

pub fn heldout_psnr(renderer: &Renderer, scene: &SyntheticScene) -> Result<f64> {
    let img = renderer.render_static(&scene.heldout)?;
    Ok(psnr(&img.data, &scene.heldout_neutral.data))
}

/// Report on the test split: image metrics, marker distance and the
/// correlation of the aperture proxy with audio channel 0.
#[derive(Clone, Debug)]
pub struct SceneReport {
    pub metrics: Metrics,
    pub apertures: Vec<f64>,
    pub audio: Vec<f64>,
    pub pearson: f64,
}

pub fn evaluate_scene(renderer: &Renderer, scene: &SyntheticScene) -> Result<SceneReport> {
    let range = scene.test_start()..scene.frames.len();
    let frames = range
        .clone()
        .map(|t| renderer.render_frame(&scene.track, t, &scene.cameras[scene.frame_cameras[t]]))
        .collect::<Result<Vec<_>>>()?;
    let keypoints = predicted_keypoints(renderer, scene, range.clone())?;
    let metrics = evaluate(&frames, &scene.frames[range.clone()], &keypoints, &scene.keypoints[range.clone()])?;
    let apertures: Vec<f64> = keypoints.iter().map(aperture_proxy).collect();
    let audio: Vec<f64> = range.map(|t| scene.track.audio[t][0]).collect();
    let r = pearson(&apertures, &audio);
    Ok(SceneReport {
        metrics,
        apertures,
        audio,
        pearson: r,
    })
}

/// Mean squared error, exposed for oracle checks of the PSNR column.
pub fn frame_mse(a: &Image, b: &Image) -> f64 {
    mse(&a.data, &b.data)
}
