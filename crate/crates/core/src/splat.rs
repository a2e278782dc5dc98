//! CPU splatting renderer: EWA projection, depth-sorted tile compositing,
//! a brute-force per-pixel oracle and the analytic backward pass.
//!
//! The footprint of a splat is `exp(-½ dᵀ Σ⁻¹ d)` truncated at Mahalanobis
//! radius 6 and shifted down by the tail value so it reaches zero
//! continuously there; the deviation from the untruncated Gaussian is below
//! 2e-8. Both renderers use the same footprint.

use rayon::prelude::*;

use crate::camera::{Camera, Mat3};
use crate::error::{Error, Result};
use crate::gaussians::{activate, Gaussian, GaussianCloud, RawLayout};
use crate::graph::CustomOp;
use crate::image::Image;
use crate::sh::{eval_color, sh_basis_with_grad};
use crate::tensor::NdArray;

pub const TILE: usize = 16;
/// Added to the diagonal of every screen-space covariance (px²).
pub const COV_FLOOR: f64 = 0.3;
pub const T_MIN: f64 = 1e-4;
pub const NEAR: f64 = 0.01;
/// Splats whose centre lies beyond this multiple of the half field of view
/// are culled.
pub const FRUSTUM_MARGIN: f64 = 1.3;
/// Squared Mahalanobis cutoff of the footprint.
pub const CUTOFF_SQ: f64 = 36.0;

fn tail() -> f64 {
    (-0.5 * CUTOFF_SQ).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian.
    pub index: usize,
    pub mean2d: [f64; 2],
    /// `(xx, xy, yy)` entries of the symmetric covariance.
    pub cov2d: [f64; 3],
    /// Entries of the inverse covariance, same order.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl Splat2D {
    /// Pixel radius enclosing the truncated footprint.
    pub fn radius(&self) -> f64 {
        let [a, b, c] = self.cov2d;
        let mid = 0.5 * (a + c);
        let lambda = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        CUTOFF_SQ.sqrt() * lambda.sqrt()
    }
}

/// Truncated, shifted Gaussian weight and `exp(power)` for an offset.
#[inline]
fn footprint(conic: &[f64; 3], dx: f64, dy: f64) -> Option<(f64, f64)> {
    let power = -0.5 * (conic[0] * dx * dx + conic[2] * dy * dy) - conic[1] * dx * dy;
    if -2.0 * power > CUTOFF_SQ {
        return None;
    }
    let e = power.exp();
    let t = tail();
    Some(((e - t) / (1.0 - t), e))
}

/// Everything the backward pass needs about one projected Gaussian.
#[derive(Clone, Debug)]
struct Projection {
    splat: Splat2D,
    gaussian: Gaussian,
    quat_norm: f64,
    rot: Mat3,
    sigma: Mat3,
    p_cam: [f64; 3],
    jw: [[f64; 3]; 2],
    view: [f64; 3],
    basis: Vec<f64>,
    basis_grad: Vec<[f64; 3]>,
    raw_color: [f64; 3],
}

pub fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Vector-Jacobian product of `quat_to_mat` for a gradient `g` on the matrix.
fn quat_to_mat_vjp(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    [
        2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]),
        2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]),
        2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
            - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]),
        2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]),
    ]
}

fn covariance_3d(rot: &Mat3, scale: [f64; 3]) -> Mat3 {
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = (0..3).map(|k| rot[i][k] * scale[k] * scale[k] * rot[j][k]).sum();
        }
    }
    s
}

fn project_full(g: &Gaussian, cam: &Camera, index: usize, quat_norm: f64) -> Option<Projection> {
    let p_cam = cam.to_camera(g.position);
    let [x, y, z] = p_cam;
    if z <= NEAR {
        return None;
    }
    let lim_x = FRUSTUM_MARGIN * (cam.cx + 0.5).max(cam.width as f64 - 0.5 - cam.cx) / cam.fx;
    let lim_y = FRUSTUM_MARGIN * (cam.cy + 0.5).max(cam.height as f64 - 0.5 - cam.cy) / cam.fy;
    if (x / z).abs() > lim_x || (y / z).abs() > lim_y {
        return None;
    }
    let rot = quat_to_mat(g.rotation);
    let sigma = covariance_3d(&rot, g.scale);
    let j = [
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ];
    let w = &cam.rotation;
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|k| j[r][k] * w[k][c]).sum();
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += jw[r][a] * sigma[a][b] * jw[c][b];
                }
            }
            cov[r][c] = acc;
        }
    }
    let cov2d = [cov[0][0] + COV_FLOOR, 0.5 * (cov[0][1] + cov[1][0]), cov[1][1] + COV_FLOOR];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];

    let center = cam.center();
    let v = [
        g.position[0] - center[0],
        g.position[1] - center[1],
        g.position[2] - center[2],
    ];
    let vn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let dir = if vn > 0.0 { [v[0] / vn, v[1] / vn, v[2] / vn] } else { [0.0, 0.0, 1.0] };
    let degree = ((g.sh.len() / 3) as f64).sqrt().round() as usize - 1;
    let (basis, basis_grad) = sh_basis_with_grad(dir, degree);
    let raw_color = eval_color(&g.sh, &basis);
    let color = raw_color.map(|c| c.max(0.0));

    let splat = Splat2D {
        index,
        mean2d: [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy],
        cov2d,
        conic,
        depth: z,
        color,
        opacity: g.opacity,
    };
    Some(Projection {
        splat,
        gaussian: g.clone(),
        quat_norm,
        rot,
        sigma,
        p_cam,
        jw,
        view: v,
        basis,
        basis_grad,
        raw_color,
    })
}

/// Project one activated Gaussian; `None` when culled.
pub fn project(gaussian: &Gaussian, camera: &Camera) -> Option<Splat2D> {
    project_full(gaussian, camera, 0, 1.0).map(|p| p.splat)
}

/// Project every Gaussian of a cloud and sort globally by depth, ties by index.
pub fn project_cloud(cloud: &GaussianCloud, camera: &Camera) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_full(g, camera, i, 1.0).map(|p| p.splat))
        .collect();
    sort_splats(&mut splats);
    splats
}

pub fn sort_splats(splats: &mut [Splat2D]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
}

fn check_sorted(splats: &[Splat2D]) -> Result<()> {
    for (k, w) in splats.windows(2).enumerate() {
        let ordered = w[0].depth < w[1].depth || (w[0].depth == w[1].depth && w[0].index < w[1].index);
        if !ordered {
            return Err(Error::invalid(format!(
                "rasterize: splats {k} and {} are not in depth order",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Per-tile lists of splat positions (indices into the sorted slice).
struct TileBins {
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<u32>>,
}

impl TileBins {
    fn build(splats: &[Splat2D], width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, s) in splats.iter().enumerate() {
            let r = s.radius();
            let x0 = (s.mean2d[0] - r).ceil().max(0.0);
            let x1 = (s.mean2d[0] + r).floor().min(width as f64 - 1.0);
            let y0 = (s.mean2d[1] - r).ceil().max(0.0);
            let y1 = (s.mean2d[1] + r).floor().min(height as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
            let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Self { tiles_x, tiles_y, lists }
    }

    fn pixel_range(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        (x0, (x0 + TILE).min(width), y0, (y0 + TILE).min(height))
    }
}

/// Per-pixel diagnostics of a tiled render.
#[derive(Clone, Debug, Default)]
pub struct RenderStats {
    /// Pixels whose compositing stopped because transmittance fell below `T_MIN`.
    pub terminated: Vec<bool>,
    pub final_transmittance: Vec<f64>,
}

/// Tile-based front-to-back compositing. `splats` must be depth-sorted.
pub fn rasterize(splats: &[Splat2D], camera: &Camera, background: [f64; 3]) -> Result<Image> {
    Ok(rasterize_with_stats(splats, camera, background)?.0)
}

pub fn rasterize_with_stats(
    splats: &[Splat2D],
    camera: &Camera,
    background: [f64; 3],
) -> Result<(Image, RenderStats)> {
    camera.validate()?;
    check_sorted(splats)?;
    let (w, h) = (camera.width, camera.height);
    let bins = TileBins::build(splats, w, h);
    let tiles: Vec<Vec<(usize, [f64; 3], f64, bool)>> = (0..bins.tiles_x * bins.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = bins.pixel_range(tile, w, h);
            let list = &bins.lists[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for py in y0..y1 {
                for px in x0..x1 {
                    let mut c = [0.0; 3];
                    let mut t = 1.0;
                    let mut stopped = false;
                    for &pos in list {
                        let s = &splats[pos as usize];
                        let Some((fp, _)) = footprint(&s.conic, px as f64 - s.mean2d[0], py as f64 - s.mean2d[1]) else {
                            continue;
                        };
                        let alpha = s.opacity * fp;
                        for ch in 0..3 {
                            c[ch] += s.color[ch] * alpha * t;
                        }
                        t *= 1.0 - alpha;
                        if t < T_MIN {
                            stopped = true;
                            break;
                        }
                    }
                    for ch in 0..3 {
                        c[ch] += t * background[ch];
                    }
                    out.push((py * w + px, c, t, stopped));
                }
            }
            out
        })
        .collect();
    let mut img = Image::filled(w, h, background);
    let mut stats = RenderStats {
        terminated: vec![false; w * h],
        final_transmittance: vec![1.0; w * h],
    };
    for tile in tiles {
        for (p, c, t, stopped) in tile {
            img.data[p * 3..p * 3 + 3].copy_from_slice(&c);
            stats.terminated[p] = stopped;
            stats.final_transmittance[p] = t;
        }
    }
    Ok((img, stats))
}

/// Direct per-pixel loop over every splat; no tiles, no early termination.
pub fn rasterize_reference(splats: &[Splat2D], camera: &Camera, background: [f64; 3]) -> Result<Image> {
    camera.validate()?;
    check_sorted(splats)?;
    let mut img = Image::filled(camera.width, camera.height, background);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let mut c = [0.0; 3];
            let mut t = 1.0;
            for s in splats {
                if let Some((fp, _)) = footprint(&s.conic, px as f64 - s.mean2d[0], py as f64 - s.mean2d[1]) {
                    let alpha = s.opacity * fp;
                    for ch in 0..3 {
                        c[ch] += s.color[ch] * alpha * t;
                    }
                    t *= 1.0 - alpha;
                }
            }
            for ch in 0..3 {
                c[ch] += t * background[ch];
            }
            img.set_pixel(px, py, c);
        }
    }
    Ok(img)
}

/// Forward state of a render from raw Gaussian rows, kept for the backward pass.
pub struct RenderRecord {
    layout: RawLayout,
    camera: Camera,
    background: [f64; 3],
    rows: usize,
    /// Visible projections in depth order.
    projections: Vec<Projection>,
    splats: Vec<Splat2D>,
    bins: TileBins,
}

impl RenderRecord {
    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }
}

/// Render raw Gaussian rows (`P × width`) from `camera`.
pub fn render_raw(
    raw: &NdArray,
    layout: RawLayout,
    camera: &Camera,
    background: [f64; 3],
) -> Result<(Image, RenderRecord)> {
    if raw.shape().len() != 2 || raw.cols() != layout.width() {
        return Err(Error::shape(
            "render_raw",
            format!("raw shape {:?} does not match layout width {}", raw.shape(), layout.width()),
        ));
    }
    camera.validate()?;
    let mut projections = Vec::new();
    for i in 0..raw.rows() {
        let row = raw.row(i);
        let g = activate(row, &layout)?;
        let q = &row[RawLayout::ROTATION..RawLayout::ROTATION + 4];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if let Some(p) = project_full(&g, camera, i, qn) {
            projections.push(p);
        }
    }
    projections.sort_by(|a, b| {
        a.splat
            .depth
            .total_cmp(&b.splat.depth)
            .then(a.splat.index.cmp(&b.splat.index))
    });
    let splats: Vec<Splat2D> = projections.iter().map(|p| p.splat.clone()).collect();
    let image = rasterize(&splats, camera, background)?;
    let bins = TileBins::build(&splats, camera.width, camera.height);
    Ok((
        image,
        RenderRecord {
            layout,
            camera: camera.clone(),
            background,
            rows: raw.rows(),
            projections,
            splats,
            bins,
        },
    ))
}

/// Screen-space gradient of one splat: mean (2), conic (3), colour (3), opacity.
type ScreenGrad = [f64; 9];

/// Gradient of a scalar loss with respect to the raw rows, given the loss
/// gradient with respect to the rendered image (`H × W × 3`, interleaved).
pub fn render_backward(record: &RenderRecord, d_image: &[f64]) -> Result<NdArray> {
    let (w, h) = (record.camera.width, record.camera.height);
    if d_image.len() != w * h * 3 {
        return Err(Error::shape(
            "render_backward",
            format!("image gradient has {} values, expected {}", d_image.len(), w * h * 3),
        ));
    }
    let bins = &record.bins;
    let splats = &record.splats;
    let bg = record.background;
    let per_tile: Vec<Vec<(u32, ScreenGrad)>> = (0..bins.tiles_x * bins.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = bins.pixel_range(tile, w, h);
            let list = &bins.lists[tile];
            let mut acc = vec![[0.0; 9]; list.len()];
            let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            for py in y0..y1 {
                for px in x0..x1 {
                    let p = py * w + px;
                    let dc = [d_image[p * 3], d_image[p * 3 + 1], d_image[p * 3 + 2]];
                    if dc == [0.0; 3] {
                        continue;
                    }
                    hits.clear();
                    let mut t = 1.0;
                    for (slot, &pos) in list.iter().enumerate() {
                        let s = &splats[pos as usize];
                        let dx = px as f64 - s.mean2d[0];
                        let dy = py as f64 - s.mean2d[1];
                        let Some((fp, e)) = footprint(&s.conic, dx, dy) else {
                            continue;
                        };
                        let alpha = s.opacity * fp;
                        hits.push((slot, alpha, t, e, dx, dy));
                        t *= 1.0 - alpha;
                        if t < T_MIN {
                            break;
                        }
                    }
                    // suffix colour seen behind each splat, normalized by its transmittance
                    let mut behind = bg;
                    let inv = 1.0 / (1.0 - tail());
                    for &(slot, alpha, t_i, e, dx, dy) in hits.iter().rev() {
                        let s = &splats[list[slot] as usize];
                        let g = &mut acc[slot];
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            g[5 + ch] += dc[ch] * alpha * t_i;
                            d_alpha += dc[ch] * t_i * (s.color[ch] - behind[ch]);
                            behind[ch] = s.color[ch] * alpha + (1.0 - alpha) * behind[ch];
                        }
                        g[8] += d_alpha * (e - tail()) * inv;
                        let d_power = d_alpha * s.opacity * e * inv;
                        let [a, b, c] = s.conic;
                        g[0] += d_power * (a * dx + b * dy);
                        g[1] += d_power * (b * dx + c * dy);
                        g[2] += d_power * (-0.5 * dx * dx);
                        g[3] += d_power * (-dx * dy);
                        g[4] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            list.iter().copied().zip(acc).filter(|(_, g)| g.iter().any(|v| *v != 0.0)).collect()
        })
        .collect();

    let mut screen = vec![[0.0; 9]; splats.len()];
    for tile in per_tile {
        for (pos, g) in tile {
            for (a, v) in screen[pos as usize].iter_mut().zip(g) {
                *a += v;
            }
        }
    }

    let width = record.layout.width();
    let mut out = NdArray::zeros(&[record.rows, width]);
    for (proj, sg) in record.projections.iter().zip(&screen) {
        let row = proj.splat.index;
        let grad = raw_gradient(proj, sg, &record.camera, &record.layout);
        out.data_mut()[row * width..(row + 1) * width].copy_from_slice(&grad);
    }
    Ok(out)
}

/// Chain screen-space gradients of one splat back to its raw row.
fn raw_gradient(p: &Projection, sg: &ScreenGrad, cam: &Camera, layout: &RawLayout) -> Vec<f64> {
    let mut out = vec![0.0; layout.width()];
    let g = &p.gaussian;

    // conic -> covariance: dΣ2 = -K G K with G the symmetric conic gradient
    let [ka, kb, kc] = p.splat.conic;
    let k = [[ka, kb], [kb, kc]];
    let gk = [[sg[2], 0.5 * sg[3]], [0.5 * sg[3], sg[4]]];
    let mut g2 = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    acc += k[r][i] * gk[i][j] * k[j][c];
                }
            }
            g2[r][c] = -acc;
        }
    }

    // cov2d = T Σ Tᵀ: dΣ = Tᵀ G2 T, dT = 2 G2 T Σ
    let t = &p.jw;
    let mut d_sigma = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    acc += t[r][a] * g2[r][c] * t[c][b];
                }
            }
            d_sigma[a][b] = acc;
        }
    }
    let mut g2t = [[0.0; 3]; 2];
    for r in 0..2 {
        for a in 0..3 {
            g2t[r][a] = (0..2).map(|c| g2[r][c] * t[c][a]).sum();
        }
    }
    let mut d_t = [[0.0; 3]; 2];
    for r in 0..2 {
        for b in 0..3 {
            d_t[r][b] = 2.0 * (0..3).map(|a| g2t[r][a] * p.sigma[a][b]).sum::<f64>();
        }
    }
    // T = J W: dJ = dT Wᵀ
    let wm = &cam.rotation;
    let mut d_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_j[r][c] = (0..3).map(|b| d_t[r][b] * wm[c][b]).sum();
        }
    }

    let [x, y, z] = p.p_cam;
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_cam = [0.0; 3];
    d_cam[0] += d_j[0][2] * (-fx / z2) + sg[0] * fx / z;
    d_cam[1] += d_j[1][2] * (-fy / z2) + sg[1] * fy / z;
    d_cam[2] += d_j[0][0] * (-fx / z2) + d_j[0][2] * (2.0 * fx * x / z3) + d_j[1][1] * (-fy / z2)
        + d_j[1][2] * (2.0 * fy * y / z3)
        - sg[0] * fx * x / z2
        - sg[1] * fy * y / z2;
    // p_cam = W μ + t
    let mut d_mu = [0.0; 3];
    for c in 0..3 {
        d_mu[c] = (0..3).map(|r| wm[r][c] * d_cam[r]).sum();
    }

    // colour through SH and the view direction
    let coeffs = layout.sh_coeffs();
    let mut d_dir = [0.0; 3];
    for ch in 0..3 {
        if p.raw_color[ch] < 0.0 {
            continue;
        }
        let gc = sg[5 + ch];
        for kk in 0..coeffs {
            out[RawLayout::SH + kk * 3 + ch] += gc * p.basis[kk];
            for a in 0..3 {
                d_dir[a] += gc * g.sh[kk * 3 + ch] * p.basis_grad[kk][a];
            }
        }
    }
    let vn = (p.view[0] * p.view[0] + p.view[1] * p.view[1] + p.view[2] * p.view[2]).sqrt();
    if vn > 0.0 {
        let dir = [p.view[0] / vn, p.view[1] / vn, p.view[2] / vn];
        let proj = dir[0] * d_dir[0] + dir[1] * d_dir[1] + dir[2] * d_dir[2];
        for a in 0..3 {
            d_mu[a] += (d_dir[a] - dir[a] * proj) / vn;
        }
    }
    out[..3].copy_from_slice(&d_mu);

    // Σ = M Mᵀ with M = R S
    let s = g.scale;
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = p.rot[i][j] * s[j];
        }
    }
    let mut d_m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_m[i][j] = 2.0 * (0..3).map(|kk| d_sigma[i][kk] * m[kk][j]).sum::<f64>();
        }
    }
    let mut d_rot = [[0.0; 3]; 3];
    for j in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            ds += d_m[i][j] * p.rot[i][j];
            d_rot[i][j] = d_m[i][j] * s[j];
        }
        // s = exp(raw)
        out[RawLayout::SCALE + j] = ds * s[j];
    }
    let q = g.rotation;
    let dq = quat_to_mat_vjp(q, &d_rot);
    let qd = q[0] * dq[0] + q[1] * dq[1] + q[2] * dq[2] + q[3] * dq[3];
    for a in 0..4 {
        out[RawLayout::ROTATION + a] = (dq[a] - q[a] * qd) / p.quat_norm;
    }
    let o = g.opacity;
    out[layout.opacity()] = sg[8] * o * (1.0 - o);
    out
}

/// Graph node for a render: input raw rows, output the `H × W × 3` image.
pub struct RenderOp {
    record: RenderRecord,
}

impl RenderOp {
    pub fn new(record: RenderRecord) -> Self {
        Self { record }
    }
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, _inputs: &[&NdArray], _output: &NdArray, grad: &NdArray, needs: &[bool]) -> Vec<Option<NdArray>> {
        if !needs[0] {
            return vec![None];
        }
        vec![Some(render_backward(&self.record, grad.data()).expect("render gradient shape"))]
    }
}

/// Render raw rows held in graph node `raw` and record the op.
pub fn render_node(
    g: &mut crate::graph::Graph,
    raw: crate::graph::Var,
    layout: RawLayout,
    camera: &Camera,
    background: [f64; 3],
) -> Result<crate::graph::Var> {
    let (image, record) = render_raw(g.value(raw), layout, camera, background)?;
    let out = image.to_ndarray();
    Ok(g.custom(RenderOp::new(record), &[raw], out, 0))
}

/// Render an activated cloud.
pub fn render_cloud(cloud: &GaussianCloud, camera: &Camera, background: [f64; 3]) -> Result<Image> {
    rasterize(&project_cloud(cloud, camera), camera, background)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: usize, h: usize) -> Camera {
        Camera {
            fx: 20.0,
            fy: 20.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    fn gaussian(pos: [f64; 3], s: f64, color: [f64; 3], opacity: f64) -> Gaussian {
        Gaussian {
            position: pos,
            scale: [s; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh: color.map(crate::sh::rgb_to_dc).to_vec(),
            opacity,
        }
    }

    #[test]
    fn quaternion_matrix_is_orthonormal() {
        let q = [0.5f64, -0.3, 0.7, 0.1];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = quat_to_mat(q.map(|v| v / n));
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn axis_gaussian_lands_on_principal_point() {
        let c = cam(16, 16);
        let s = project(&gaussian([0.0, 0.0, 3.0], 0.1, [1.0; 3], 0.9), &c).unwrap();
        assert_eq!(s.mean2d, [c.cx, c.cy]);
        assert!(project(&gaussian([0.0, 0.0, -1.0], 0.1, [1.0; 3], 0.9), &c).is_none());
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let c = cam(8, 8);
        let mut a = project(&gaussian([0.0, 0.0, 3.0], 0.1, [1.0; 3], 0.9), &c).unwrap();
        let b = project(&gaussian([0.0, 0.0, 2.0], 0.1, [1.0; 3], 0.9), &c).unwrap();
        a.index = 1;
        assert!(rasterize(&[a, b], &c, [0.0; 3]).is_err());
    }

    #[test]
    fn empty_list_renders_background() {
        let c = cam(20, 9);
        let img = rasterize(&[], &c, [0.2, 0.4, 0.6]).unwrap();
        assert!(img.data.chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn footprint_is_continuous_at_cutoff() {
        let conic = [1.0, 0.0, 1.0];
        let r = CUTOFF_SQ.sqrt();
        let inside = footprint(&conic, r - 1e-9, 0.0).unwrap().0;
        assert!(inside.abs() < 1e-15);
        assert!(footprint(&conic, r + 1e-9, 0.0).is_none());
    }
}
