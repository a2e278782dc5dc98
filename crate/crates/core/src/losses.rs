//! Image objectives for both training stages, plus plain image metrics.
//!
//! Images are `H × W × 3` arrays with values nominally in `[0, 1]`.

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::NdArray;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dssim: f64,
    /// Weight of the perceptual term, which is a zero stub here.
    pub lpips: f64,
    pub lip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dssim: 0.2,
            lpips: 0.0,
            lip: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("dssim", self.dssim), ("lpips", self.lpips), ("lip", self.lip)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn image_dims(g: &Graph, v: Var, what: &str) -> Result<(usize, usize)> {
    match g.shape(v) {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(Error::shape(what, format!("expected H x W x 3 image, got {s:?}"))),
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            what,
            format!("image shapes differ: {:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// Mean absolute per-channel difference.
pub fn l1_loss(g: &mut Graph, img: Var, gt: Var) -> Result<Var> {
    same_shape(g, img, gt, "l1_loss")?;
    let d = g.sub(img, gt)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Normalized 1-D Gaussian window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "same" filtering of one `h × w` plane with zero padding.
fn blur(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += wk * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += wk * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(data: &[f64], ch: usize) -> Vec<f64> {
    data.iter().skip(ch).step_by(3).copied().collect()
}

struct SsimStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    s: Vec<f64>,
}

fn ssim_stats(x: &[f64], y: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> SsimStats {
    let mx = blur(x, h, w, win);
    let my = blur(y, h, w, win);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (exx, eyy, exy) = (blur(&xx, h, w, win), blur(&yy, h, w, win), blur(&xy, h, w, win));
    let n = h * w;
    let mut st = SsimStats {
        a1: vec![0.0; n],
        a2: vec![0.0; n],
        b1: vec![0.0; n],
        b2: vec![0.0; n],
        s: vec![0.0; n],
        mx,
        my,
    };
    for i in 0..n {
        let (ux, uy) = (st.mx[i], st.my[i]);
        st.a1[i] = 2.0 * ux * uy + SSIM_C1;
        st.a2[i] = 2.0 * (exy[i] - ux * uy) + SSIM_C2;
        st.b1[i] = ux * ux + uy * uy + SSIM_C1;
        st.b2[i] = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + SSIM_C2;
        st.s[i] = st.a1[i] * st.a2[i] / (st.b1[i] * st.b2[i]);
    }
    st
}

fn check_ssim_dims(h: usize, w: usize) -> Result<()> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    Ok(())
}

/// Mean SSIM over pixels and channels of two interleaved RGB buffers.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    check_ssim_dims(h, w)?;
    if x.len() != h * w * 3 || y.len() != x.len() {
        return Err(Error::shape("ssim", "buffer sizes do not match dimensions"));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for ch in 0..3 {
        let st = ssim_stats(&channel(x, ch), &channel(y, ch), h, w, &win);
        total += st.s.iter().sum::<f64>();
    }
    Ok(total / (h * w * 3) as f64)
}

/// Gradient of mean SSIM with respect to `x`, scaled by `scale`.
fn ssim_grad_x(x: &[f64], y: &[f64], h: usize, w: usize, scale: f64) -> Vec<f64> {
    let win = gaussian_window();
    let n = h * w;
    let mut out = vec![0.0; n * 3];
    for ch in 0..3 {
        let xc = channel(x, ch);
        let yc = channel(y, ch);
        let st = ssim_stats(&xc, &yc, h, w, &win);
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for i in 0..n {
            let s = st.s[i] * scale;
            let (ux, uy) = (st.mx[i], st.my[i]);
            g_mu[i] = s
                * (2.0 * uy / st.a1[i] - 2.0 * uy / st.a2[i] - 2.0 * ux / st.b1[i] + 2.0 * ux / st.b2[i]);
            g_xx[i] = -s / st.b2[i];
            g_xy[i] = 2.0 * s / st.a2[i];
        }
        let (bm, bxx, bxy) = (blur(&g_mu, h, w, &win), blur(&g_xx, h, w, &win), blur(&g_xy, h, w, &win));
        for i in 0..n {
            out[i * 3 + ch] = bm[i] + 2.0 * xc[i] * bxx[i] + yc[i] * bxy[i];
        }
    }
    out
}

struct DssimOp {
    h: usize,
    w: usize,
}

impl CustomOp for DssimOp {
    fn name(&self) -> &'static str {
        "dssim"
    }

    fn backward(&self, inputs: &[&NdArray], _output: &NdArray, grad: &NdArray, needs: &[bool]) -> Vec<Option<NdArray>> {
        let scale = -grad.data()[0] / (self.h * self.w * 3) as f64;
        let (x, y) = (inputs[0], inputs[1]);
        let make = |a: &NdArray, b: &NdArray| {
            NdArray::new(a.shape().to_vec(), ssim_grad_x(a.data(), b.data(), self.h, self.w, scale)).expect("shape")
        };
        vec![needs[0].then(|| make(x, y)), needs[1].then(|| make(y, x))]
    }
}

/// `1 − mean SSIM`, 11×11 Gaussian window, per channel then averaged.
pub fn dssim_loss(g: &mut Graph, img: Var, gt: Var) -> Result<Var> {
    same_shape(g, img, gt, "dssim_loss")?;
    let (h, w) = image_dims(g, img, "dssim_loss")?;
    let value = 1.0 - ssim(g.value(img).data(), g.value(gt).data(), h, w)?;
    Ok(g.custom(DssimOp { h, w }, &[img, gt], NdArray::scalar(value), 0))
}

/// L1 over masked pixels only, averaged over mask pixels and channels.
/// `mask` is row-major `H × W`.
pub fn lip_loss(g: &mut Graph, img: Var, gt: Var, mask: &[bool]) -> Result<Var> {
    same_shape(g, img, gt, "lip_loss")?;
    let (h, w) = image_dims(g, img, "lip_loss")?;
    if mask.len() != h * w {
        return Err(Error::shape("lip_loss", format!("mask has {} pixels, image {}", mask.len(), h * w)));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("lip_loss: empty lip mask"));
    }
    let wgt = 1.0 / (3 * count) as f64;
    let weights: Vec<f64> = mask.iter().flat_map(|&m| [if m { wgt } else { 0.0 }; 3]).collect();
    let m = g.constant(NdArray::new(vec![h, w, 3], weights)?);
    let d = g.sub(img, gt)?;
    let a = g.abs(d);
    let masked = g.mul(a, m)?;
    Ok(g.sum(masked))
}

/// The perceptual term needs a pretrained network and is out of scope; it
/// contributes a constant zero.
pub fn lpips_stub(g: &mut Graph) -> Var {
    g.constant(NdArray::scalar(0.0))
}

pub fn stage1_loss(g: &mut Graph, img: Var, gt: Var, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let l1 = l1_loss(g, img, gt)?;
    let ds = dssim_loss(g, img, gt)?;
    let lp = lpips_stub(g);
    let ds = g.scale(ds, weights.dssim);
    let lp = g.scale(lp, weights.lpips);
    let total = g.add(l1, ds)?;
    g.add(total, lp)
}

pub fn stage2_loss(g: &mut Graph, img: Var, gt: Var, mask: &[bool], weights: &LossWeights) -> Result<Var> {
    let base = stage1_loss(g, img, gt, weights)?;
    let lip = lip_loss(g, img, gt, mask)?;
    let lip = g.scale(lip, weights.lip);
    g.add(base, lip)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Peak signal-to-noise ratio for unit-range images.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn undersized_images_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::zeros(&[10, 20, 3]));
        let b = g.constant(NdArray::zeros(&[10, 20, 3]));
        assert!(dssim_loss(&mut g, a, b).is_err());
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        assert_eq!(psnr(&[0.5, 0.2], &[0.5, 0.2]), f64::INFINITY);
        assert!((psnr(&[0.0], &[0.1]) - 20.0).abs() < 1e-9);
    }
}
