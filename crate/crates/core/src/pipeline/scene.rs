//! Synthetic talking-head stand-in: a hidden oracle cloud of coloured
//! ellipsoids with scripted eyes and mouth, rendered by the reference
//! rasterizer from a ring of cameras.
//!
//! World axes: +y points down in every image, the face looks towards −z and
//! the cameras sit on a ring at `z < 0`.
//!
//! On-disk layout of a scene directory:
//!
//! ```text
//! scene.txt            key = value: generation spec, seed, markers, held-out camera
//! cameras.txt          one camera per line (fx fy cx cy w h, then 3×4 [R|t] row-wise);
//!                      ring cameras first, held-out camera last
//! points.txt           seed points "x y z r g b"
//! frames.txt           "frame camera upper_u upper_v lower_u lower_v" (ground-truth keypoints)
//! track.f32            condition track
//! neutral/camNN.f32    neutral-expression view per camera (raw float image)
//! frames/NNNN.f32      ground-truth frame (raw float image)
//! masks/NNNN.png       lip mask (8-bit grayscale, 255 = lip region)
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{ConditionTrack, POSE_WIDTH};
use crate::camera::Camera;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::gaussians::{Gaussian, GaussianCloud, RawLayout};
use crate::image::{load_mask_png, save_mask_png, Image};
use crate::sh::rgb_to_dc;
use crate::splat::{project_cloud, rasterize_reference};

pub const BACKGROUND: [f64; 3] = [0.0; 3];
/// Mouth centre in world space.
pub const MOUTH: [f64; 3] = [0.0, 0.33, -0.62];
const EYE_Y: f64 = -0.18;
const EYE_X: f64 = 0.25;
const EYE_Z: f64 = -0.6;
const LIP_HALF_WIDTH: f64 = 0.16;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Oracle ellipsoids, including eyes and mouth.
    pub ellipsoids: usize,
    /// Seed points handed to the model (a sparse reconstruction stand-in).
    pub points: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    pub audio_width: usize,
    pub focal: f64,
    pub radius: f64,
    /// Ring spans `[-ring_degrees, ring_degrees]` around the face.
    pub ring_degrees: f64,
    /// Mouth aperture is `mouth_rest + mouth_gain · audio[t][0]`.
    pub mouth_rest: f64,
    pub mouth_gain: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            ellipsoids: 40,
            points: 500,
            frames: 200,
            width: 64,
            height: 64,
            cameras: 5,
            audio_width: 8,
            focal: 90.0,
            radius: 4.0,
            ring_degrees: 40.0,
            mouth_rest: 0.05,
            mouth_gain: 0.2,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ellipsoids < 8 {
            return Err(Error::invalid("scene needs at least 8 ellipsoids (face, eyes, mouth)"));
        }
        if self.frames == 0 || self.cameras == 0 || self.audio_width == 0 {
            return Err(Error::invalid("scene frames, cameras and audio width must be positive"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::invalid("scene images must be at least 16x16"));
        }
        if self.points < self.ellipsoids {
            return Err(Error::invalid("scene needs at least one seed point per ellipsoid"));
        }
        if !(self.focal > 0.0 && self.radius > 1.5) {
            return Err(Error::invalid("scene focal must be positive and radius > 1.5"));
        }
        if !(self.mouth_rest > 0.0 && self.mouth_gain >= 0.0) {
            return Err(Error::invalid("mouth_rest must be > 0 and mouth_gain >= 0"));
        }
        Ok(())
    }

    pub fn write(&self, kv: &mut KeyValues) {
        kv.set("scene.ellipsoids", self.ellipsoids);
        kv.set("scene.points", self.points);
        kv.set("scene.frames", self.frames);
        kv.set("scene.width", self.width);
        kv.set("scene.height", self.height);
        kv.set("scene.cameras", self.cameras);
        kv.set("scene.audio_width", self.audio_width);
        kv.set("scene.focal", self.focal);
        kv.set("scene.radius", self.radius);
        kv.set("scene.ring_degrees", self.ring_degrees);
        kv.set("scene.mouth_rest", self.mouth_rest);
        kv.set("scene.mouth_gain", self.mouth_gain);
    }

    pub fn read(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("scene.ellipsoids", &mut self.ellipsoids)?;
        kv.read_into("scene.points", &mut self.points)?;
        kv.read_into("scene.frames", &mut self.frames)?;
        kv.read_into("scene.width", &mut self.width)?;
        kv.read_into("scene.height", &mut self.height)?;
        kv.read_into("scene.cameras", &mut self.cameras)?;
        kv.read_into("scene.audio_width", &mut self.audio_width)?;
        kv.read_into("scene.focal", &mut self.focal)?;
        kv.read_into("scene.radius", &mut self.radius)?;
        kv.read_into("scene.ring_degrees", &mut self.ring_degrees)?;
        kv.read_into("scene.mouth_rest", &mut self.mouth_rest)?;
        kv.read_into("scene.mouth_gain", &mut self.mouth_gain)?;
        self.validate()
    }

    pub fn aperture(&self, audio0: f64) -> f64 {
        self.mouth_rest + self.mouth_gain * audio0
    }
}

/// The seeded, expression-independent part of the oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleFace {
    pub skin: Vec<Gaussian>,
}

fn gaussian(position: [f64; 3], scale: [f64; 3], rotation: [f64; 4], color: [f64; 3], opacity: f64) -> Gaussian {
    let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    Gaussian {
        position,
        scale,
        rotation: rotation.map(|v| v / n),
        sh: color.map(rgb_to_dc).to_vec(),
        opacity,
    }
}

impl OracleFace {
    pub fn generate(spec: &SceneSpec, rng: &mut impl Rng) -> Self {
        let mut skin = vec![gaussian(
            [0.0, 0.0, 0.05],
            [0.55, 0.7, 0.42],
            [1.0, 0.0, 0.0, 0.0],
            [0.8, 0.58, 0.47],
            0.95,
        )];
        // eyes (2), lips (2), mouth interior (1), core (1)
        for _ in 0..spec.ellipsoids - 6 {
            let (dir, hair) = loop {
                let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..0.4)];
                let n: f64 = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
                if n > 0.2 && n <= 1.0 {
                    let d = [v[0] / n, v[1] / n, v[2] / n];
                    break (d, d[1] < -0.55);
                }
            };
            let pos = [0.62 * dir[0], 0.78 * dir[1], 0.5 * dir[2]];
            let s = rng.gen_range(0.12..0.2);
            let scale = [s * rng.gen_range(0.8..1.3), s * rng.gen_range(0.8..1.3), s * 0.6];
            let rotation = [1.0, rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            let jitter = rng.gen_range(-0.07..0.07);
            let color = if hair {
                [0.28 + jitter, 0.18 + jitter, 0.1 + jitter]
            } else {
                [0.85 + jitter, 0.62 + jitter, 0.5 + jitter * 0.5]
            };
            skin.push(gaussian(pos, scale, rotation, color, rng.gen_range(0.8..0.95)));
        }
        Self { skin }
    }

    /// Full oracle cloud for a mouth aperture and blink level.
    pub fn cloud(&self, aperture: f64, blink: f64) -> GaussianCloud {
        let mut gs = self.skin.clone();
        let eye_h = 0.045 * (1.0 - 0.85 * blink) + 0.004;
        for sx in [-1.0, 1.0] {
            gs.push(gaussian(
                [sx * EYE_X, EYE_Y, EYE_Z],
                [0.08, eye_h, 0.03],
                [1.0, 0.0, 0.0, 0.0],
                [0.08, 0.08, 0.14],
                0.97,
            ));
        }
        let [mx, my, mz] = MOUTH;
        gs.push(gaussian(
            [mx, my, mz + 0.015],
            [0.12, 0.01 + 0.45 * aperture, 0.02],
            [1.0, 0.0, 0.0, 0.0],
            [0.15, 0.03, 0.05],
            0.95,
        ));
        for sy in [-1.0, 1.0] {
            gs.push(gaussian(
                [mx, my + sy * aperture * 0.5, mz],
                [LIP_HALF_WIDTH, 0.035, 0.05],
                [1.0, 0.0, 0.0, 0.0],
                [0.78, 0.2, 0.25],
                0.97,
            ));
        }
        GaussianCloud {
            layout: RawLayout { sh_degree: 0 },
            gaussians: gs,
        }
    }
}

/// World positions of the upper and lower lip markers.
pub fn lip_markers(aperture: f64) -> [[f64; 3]; 2] {
    let [mx, my, mz] = MOUTH;
    [[mx, my - aperture * 0.5, mz], [mx, my + aperture * 0.5, mz]]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    /// Ring cameras used for training.
    pub cameras: Vec<Camera>,
    pub heldout: Camera,
    /// Neutral view per ring camera.
    pub neutral: Vec<Image>,
    pub heldout_neutral: Image,
    pub frames: Vec<Image>,
    pub frame_cameras: Vec<usize>,
    pub track: ConditionTrack,
    pub masks: Vec<Vec<bool>>,
    /// Ground-truth `[upper, lower]` marker projections per frame.
    pub keypoints: Vec<[[f64; 2]; 2]>,
    pub points: Vec<[f64; 3]>,
    pub point_colors: Vec<[f64; 3]>,
}

fn ring_camera(spec: &SceneSpec, degrees: f64) -> Result<Camera> {
    let a = degrees.to_radians();
    let eye = [spec.radius * a.sin(), -0.1 * spec.radius, -spec.radius * a.cos()];
    Camera::look_at(eye, [0.0, 0.05, 0.0], [0.0, -1.0, 0.0], spec.focal, spec.width, spec.height)
}

fn ring_angles(spec: &SceneSpec) -> Vec<f64> {
    if spec.cameras == 1 {
        return vec![0.0];
    }
    (0..spec.cameras)
        .map(|k| -spec.ring_degrees + 2.0 * spec.ring_degrees * k as f64 / (spec.cameras - 1) as f64)
        .collect()
}

/// Scripted audio: channel 0 is a smooth signal in `[0, 1]`; the remaining
/// channels are unrelated sinusoids.
fn audio_track(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let p0 = rng.gen_range(0.0..2.0 * PI);
    let p1 = rng.gen_range(0.0..2.0 * PI);
    let others: Vec<(f64, f64)> = (1..spec.audio_width)
        .map(|_| (rng.gen_range(5.0..40.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    (0..spec.frames)
        .map(|t| {
            let tf = t as f64;
            let a0 = 0.5 + 0.3 * (2.0 * PI * tf / 23.0 + p0).sin() + 0.2 * (2.0 * PI * tf / 9.3 + p1).sin();
            let mut row = vec![a0.clamp(0.0, 1.0)];
            row.extend(others.iter().map(|(period, phase)| 0.5 * (2.0 * PI * tf / period + phase).sin()));
            row
        })
        .collect()
}

/// Triangular blink pulses of five frames, roughly every 45 frames.
fn blink_track(frames: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut b = vec![0.0; frames];
    let mut start = rng.gen_range(5..30);
    while start < frames {
        for (k, v) in [0.4, 0.8, 1.0, 0.8, 0.4].iter().enumerate() {
            if start + k < frames {
                b[start + k] = *v;
            }
        }
        start += rng.gen_range(35..55);
    }
    b
}

fn lip_mask(cam: &Camera, aperture: f64) -> Vec<bool> {
    let [mx, my, mz] = MOUTH;
    let hw = LIP_HALF_WIDTH + 0.1;
    let hh = aperture * 0.5 + 0.12;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for dz in [-0.05, 0.05] {
                if let Some(p) = cam.project_point([mx + sx * hw, my + sy * hh, mz + dz]) {
                    for k in 0..2 {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                }
            }
        }
    }
    let mut mask = vec![false; cam.width * cam.height];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (xf, yf) = (x as f64, y as f64);
            mask[y * cam.width + x] = xf >= lo[0] && xf <= hi[0] && yf >= lo[1] && yf <= hi[1];
        }
    }
    mask
}

/// Share of the seed budget reserved for the eyes, mouth interior and lips
/// (the last five oracle ellipsoids, in that order).
const FEATURE_SHARE: [f64; 5] = [0.02, 0.02, 0.03, 0.06, 0.06];

/// Points scattered inside each oracle ellipsoid of the neutral cloud. The
/// facial features get a fixed share of the budget, the remaining skin
/// blobs split the rest by surface area. Colours are slightly noisy.
fn seed_points(spec: &SceneSpec, cloud: &GaussianCloud, rng: &mut impl Rng) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let skin = cloud.len() - FEATURE_SHARE.len();
    let areas: Vec<f64> = cloud.gaussians[..skin]
        .iter()
        .map(|g| g.scale[0] * g.scale[1] + g.scale[1] * g.scale[2] + g.scale[0] * g.scale[2])
        .collect();
    let total: f64 = areas.iter().sum();
    let budget = (spec.points - cloud.len()) as f64;
    let mut counts: Vec<usize> = vec![1; cloud.len()];
    for (c, share) in counts[skin..].iter_mut().zip(FEATURE_SHARE) {
        *c += (share * budget).floor() as usize;
    }
    let spare = spec.points.saturating_sub(counts.iter().sum::<usize>());
    for (c, a) in counts.iter_mut().zip(&areas) {
        *c += (a / total * spare as f64).floor() as usize;
    }
    let mut k = 0;
    while counts.iter().sum::<usize>() < spec.points {
        counts[k % skin] += 1;
        k += 1;
    }
    let mut pts = Vec::with_capacity(spec.points);
    let mut cols = Vec::with_capacity(spec.points);
    for (g, &c) in cloud.gaussians.iter().zip(&counts) {
        let rot = crate::splat::quat_to_mat(g.rotation);
        let color = crate::sh::eval_color(&g.sh, &[crate::sh::sh_basis([0.0, 0.0, 1.0], 0)[0]]);
        for _ in 0..c {
            let z: [f64; 3] = std::array::from_fn(|k| rng.gen_range(-1.0..1.0) * g.scale[k]);
            let off = crate::camera::mat_vec(&rot, z);
            pts.push([
                (g.position[0] + off[0]).clamp(-1.0, 1.0),
                (g.position[1] + off[1]).clamp(-1.0, 1.0),
                (g.position[2] + off[2]).clamp(-1.0, 1.0),
            ]);
            cols.push(color.map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)));
        }
    }
    (pts, cols)
}

fn render(cloud: &GaussianCloud, cam: &Camera) -> Result<Image> {
    rasterize_reference(&project_cloud(cloud, cam), cam, BACKGROUND)
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let face = OracleFace::generate(spec, &mut rng);
    let angles = ring_angles(spec);
    let cameras = angles.iter().map(|&a| ring_camera(spec, a)).collect::<Result<Vec<_>>>()?;
    let heldout_angle = if angles.len() > 1 { 0.5 * (angles[0] + angles[1]) } else { 10.0 };
    let heldout = ring_camera(spec, heldout_angle)?;

    let neutral_cloud = face.cloud(spec.mouth_rest, 0.0);
    let neutral = cameras.iter().map(|c| render(&neutral_cloud, c)).collect::<Result<Vec<_>>>()?;
    let heldout_neutral = render(&neutral_cloud, &heldout)?;

    let audio = audio_track(spec, &mut rng);
    let blink = blink_track(spec.frames, &mut rng);
    let frame_cameras: Vec<usize> = (0..spec.frames).map(|t| t % spec.cameras).collect();
    let pose: Vec<[f64; POSE_WIDTH]> = frame_cameras.iter().map(|&c| cameras[c].pose_vector()).collect();
    let track = ConditionTrack::new(audio, blink, pose)?;

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut keypoints = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let cam = &cameras[frame_cameras[t]];
        let ap = spec.aperture(track.audio[t][0]);
        frames.push(render(&face.cloud(ap, track.blink[t]), cam)?);
        masks.push(lip_mask(cam, ap));
        let m = lip_markers(ap);
        let proj = |p: [f64; 3]| cam.project_point(p).ok_or_else(|| Error::invalid("lip marker behind camera"));
        keypoints.push([proj(m[0])?, proj(m[1])?]);
    }
    let (points, point_colors) = seed_points(spec, &neutral_cloud, &mut rng);
    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        cameras,
        heldout,
        neutral,
        heldout_neutral,
        frames,
        frame_cameras,
        track,
        masks,
        keypoints,
        points,
        point_colors,
    })
}

impl SyntheticScene {
    /// Index of the first test frame; the last 20% of frames are held out.
    pub fn test_start(&self) -> usize {
        let n = self.frames.len();
        (n - n / 5).min(n.saturating_sub(1)).max(if n > 1 { 1 } else { 0 })
    }

    pub fn aperture(&self, t: usize) -> f64 {
        self.spec.aperture(self.track.audio[t][0])
    }

    pub fn rest_markers(&self) -> [[f64; 3]; 2] {
        lip_markers(self.spec.mouth_rest)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["neutral", "frames", "masks"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut kv = KeyValues::default();
        self.spec.write(&mut kv);
        kv.set("scene.seed", self.seed);
        kv.set("scene.heldout_camera", self.cameras.len());
        kv.set("scene.background", "0 0 0");
        crate::io::write_atomic(&dir.join("scene.txt"), kv.to_text().as_bytes())?;

        let mut cams = String::new();
        for c in self.cameras.iter().chain(std::iter::once(&self.heldout)) {
            cams.push_str(&c.to_line());
            cams.push('\n');
        }
        crate::io::write_atomic(&dir.join("cameras.txt"), cams.as_bytes())?;

        let mut pts = String::from("# x y z r g b\n");
        for (p, c) in self.points.iter().zip(&self.point_colors) {
            let _ = writeln!(pts, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
        }
        crate::io::write_atomic(&dir.join("points.txt"), pts.as_bytes())?;

        let mut fr = String::from("# frame camera upper_u upper_v lower_u lower_v\n");
        for (t, (c, k)) in self.frame_cameras.iter().zip(&self.keypoints).enumerate() {
            let _ = writeln!(fr, "{t} {c} {} {} {} {}", k[0][0], k[0][1], k[1][0], k[1][1]);
        }
        crate::io::write_atomic(&dir.join("frames.txt"), fr.as_bytes())?;
        self.track.save(&dir.join("track.f32"))?;

        for (k, img) in self.neutral.iter().chain(std::iter::once(&self.heldout_neutral)).enumerate() {
            img.save_raw(&dir.join(format!("neutral/cam{k:02}.f32")))?;
        }
        for (t, (img, mask)) in self.frames.iter().zip(&self.masks).enumerate() {
            img.save_raw(&dir.join(format!("frames/{t:04}.f32")))?;
            save_mask_png(&dir.join(format!("masks/{t:04}.png")), img.width, img.height, mask)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::load(&dir.join("scene.txt"))?;
        let mut spec = SceneSpec::default();
        spec.read(&kv)?;
        let seed = kv.get::<u64>("scene.seed")?.unwrap_or(0);
        let cam_path = dir.join("cameras.txt");
        let mut all = load_cameras(&cam_path)?;
        if all.len() != spec.cameras + 1 {
            return Err(Error::format(&cam_path, format!("expected {} cameras", spec.cameras + 1)));
        }
        let heldout = all.pop().expect("non-empty");
        let cameras = all;

        let pts_path = dir.join("points.txt");
        let rows = read_numeric_rows(&pts_path, 6)?;
        let points = rows.iter().map(|r| [r[0], r[1], r[2]]).collect();
        let point_colors = rows.iter().map(|r| [r[3], r[4], r[5]]).collect();

        let fr_path = dir.join("frames.txt");
        let rows = read_numeric_rows(&fr_path, 6)?;
        if rows.len() != spec.frames {
            return Err(Error::format(&fr_path, format!("expected {} frame rows", spec.frames)));
        }
        let mut frame_cameras = Vec::with_capacity(rows.len());
        let mut keypoints = Vec::with_capacity(rows.len());
        for r in &rows {
            let c = r[1] as usize;
            if c >= cameras.len() {
                return Err(Error::format(&fr_path, format!("camera index {c} out of range")));
            }
            frame_cameras.push(c);
            keypoints.push([[r[2], r[3]], [r[4], r[5]]]);
        }
        let track = ConditionTrack::load(&dir.join("track.f32"))?;
        if track.len() != spec.frames {
            return Err(Error::format(dir.join("track.f32"), "track length differs from frame count"));
        }
        let neutral = (0..spec.cameras)
            .map(|k| Image::load_raw(&dir.join(format!("neutral/cam{k:02}.f32"))))
            .collect::<Result<Vec<_>>>()?;
        let heldout_neutral = Image::load_raw(&dir.join(format!("neutral/cam{:02}.f32", spec.cameras)))?;
        let mut frames = Vec::with_capacity(spec.frames);
        let mut masks = Vec::with_capacity(spec.frames);
        for t in 0..spec.frames {
            frames.push(Image::load_raw(&dir.join(format!("frames/{t:04}.f32")))?);
            let mpath = dir.join(format!("masks/{t:04}.png"));
            let (w, h, m) = load_mask_png(&mpath)?;
            if (w, h) != (spec.width, spec.height) {
                return Err(Error::format(&mpath, "mask size differs from image size"));
            }
            masks.push(m);
        }
        Ok(Self {
            spec,
            seed,
            cameras,
            heldout,
            neutral,
            heldout_neutral,
            frames,
            frame_cameras,
            track,
            masks,
            keypoints,
            points,
            point_colors,
        })
    }
}

/// One camera per non-empty, non-`#` line.
pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(Camera::from_line)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_numeric_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("bad number in `{l}`")))?;
            if vals.len() != width {
                return Err(Error::format(path, format!("expected {width} fields in `{l}`")));
            }
            Ok(vals)
        })
        .collect()
}

/// Check that a directory follows the documented scene layout; returns the
/// list of problems found (empty when valid).
pub fn validate_layout(dir: &Path) -> Vec<String> {
    let mut problems = Vec::new();
    for f in ["scene.txt", "cameras.txt", "points.txt", "frames.txt", "track.f32"] {
        if !dir.join(f).is_file() {
            problems.push(format!("missing {f}"));
        }
    }
    if !problems.is_empty() {
        return problems;
    }
    if let Err(e) = SyntheticScene::load(dir) {
        problems.push(e.to_string());
    }
    problems
}
