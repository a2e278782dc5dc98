//! Gaussian cloud data model, activation of raw network outputs, static
//! initialization and static + deformation composition.
//!
//! Raw rows are laid out as `(μ 3, s 3, r 4, SH 3·(deg+1)², α 1)`. Activation
//! maps them to valid parameters: `s = exp(raw_s)`, `r = raw_r / |raw_r|`,
//! `α = sigmoid(raw_α)`; position and SH pass through unchanged.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::kan::{map_static, KanNetwork};
use crate::params::ParamStore;
use crate::tensor::NdArray;
use crate::triplane::{SpatialPoint, TriplaneEncoder};

/// Triplane features start near one; this affine map brings them to roughly
/// `[-1, 1]`, the KAN knot span.
pub const FEATURE_SCALE: f64 = 3.0;
pub const FEATURE_SHIFT: f64 = -3.0;

/// Name of the optional per-Gaussian raw base rows added to the KAN output.
pub const SEED_RAW: &str = "seeds/raw";

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct RawLayout {
    pub sh_degree: usize,
}

impl RawLayout {
    pub const POSITION: usize = 0;
    pub const SCALE: usize = 3;
    pub const ROTATION: usize = 6;
    pub const SH: usize = 10;

    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > 3 {
            return Err(Error::invalid(format!("SH degree {sh_degree} > 3 unsupported")));
        }
        Ok(Self { sh_degree })
    }

    pub fn sh_coeffs(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn sh_width(&self) -> usize {
        3 * self.sh_coeffs()
    }

    pub fn opacity(&self) -> usize {
        Self::SH + self.sh_width()
    }

    pub fn width(&self) -> usize {
        3 + 3 + 4 + self.sh_width() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    /// Coefficient-major: `sh[k*3 + channel]`.
    pub sh: Vec<f64>,
    pub opacity: f64,
}

impl Gaussian {
    /// Check the validity invariants that activation guarantees.
    pub fn is_valid(&self) -> bool {
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.scale.iter().all(|&s| s > 0.0 && s.is_finite())
            && (qn - 1.0).abs() <= 1e-9
            && (0.0..=1.0).contains(&self.opacity)
            && self.position.iter().chain(&self.sh).all(|v| v.is_finite())
    }
}

/// Activate one raw row.
pub fn activate(raw: &[f64], layout: &RawLayout) -> Result<Gaussian> {
    if raw.len() != layout.width() {
        return Err(Error::shape(
            "activate",
            format!("raw row has {} values, layout needs {}", raw.len(), layout.width()),
        ));
    }
    let r = &raw[RawLayout::ROTATION..RawLayout::ROTATION + 4];
    let qn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(qn > 0.0) || !qn.is_finite() {
        return Err(Error::invalid("activate: zero-norm rotation quaternion"));
    }
    Ok(Gaussian {
        position: [raw[0], raw[1], raw[2]],
        scale: [raw[3].exp(), raw[4].exp(), raw[5].exp()],
        rotation: [r[0] / qn, r[1] / qn, r[2] / qn, r[3] / qn],
        sh: raw[RawLayout::SH..RawLayout::SH + layout.sh_width()].to_vec(),
        opacity: sigmoid(raw[layout.opacity()]),
    })
}

/// An immutable set of activated Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub layout: RawLayout,
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn from_raw(raw: &NdArray, layout: RawLayout) -> Result<Self> {
        if raw.cols() != layout.width() {
            return Err(Error::shape(
                "GaussianCloud::from_raw",
                format!("raw has {} columns, layout needs {}", raw.cols(), layout.width()),
            ));
        }
        let gaussians = (0..raw.rows())
            .map(|i| activate(raw.row(i), &layout))
            .collect::<Result<_>>()?;
        Ok(Self { layout, gaussians })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Write a binary little-endian PLY in the layout common 3DGS viewers
    /// read: `x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3`.
    /// Opacity and scale are stored pre-activation (logit, log) and
    /// `f_rest` is channel-major, matching those viewers.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let rest = self.layout.sh_coeffs() - 1;
        let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
        header.push_str(&format!("element vertex {}\n", self.len()));
        let mut props: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        props.extend((0..3 * rest).map(|i| format!("f_rest_{i}")));
        props.push("opacity".into());
        props.extend((0..3).map(|i| format!("scale_{i}")));
        props.extend((0..4).map(|i| format!("rot_{i}")));
        for p in &props {
            header.push_str(&format!("property float {p}\n"));
        }
        header.push_str("end_header\n");
        let mut bytes = header.into_bytes();
        let mut put = |v: f64| bytes.extend_from_slice(&(v as f32).to_le_bytes());
        for gs in &self.gaussians {
            gs.position.iter().for_each(|&v| put(v));
            (0..3).for_each(|_| put(0.0));
            (0..3).for_each(|c| put(gs.sh[c]));
            for c in 0..3 {
                for k in 1..=rest {
                    put(gs.sh[k * 3 + c]);
                }
            }
            let a = gs.opacity.clamp(1e-12, 1.0 - 1e-12);
            put((a / (1.0 - a)).ln());
            gs.scale.iter().for_each(|&s| put(s.ln()));
            gs.rotation.iter().for_each(|&q| put(q));
        }
        crate::io::write_atomic(path, &bytes)
    }
}

/// `raw + deltas`, row by row; the static rows are not modified.
pub fn compose_raw(raw: &NdArray, deltas: &NdArray) -> Result<NdArray> {
    if raw.shape() != deltas.shape() {
        return Err(Error::shape(
            "compose",
            format!("static {:?} vs deltas {:?}", raw.shape(), deltas.shape()),
        ));
    }
    Ok(raw.zip_map(deltas, |a, b| a + b))
}

/// Static plus deformation, then activation, for one frame.
pub fn compose(raw: &NdArray, deltas: &NdArray, layout: RawLayout) -> Result<GaussianCloud> {
    GaussianCloud::from_raw(&compose_raw(raw, deltas)?, layout)
}

/// Differentiable static raw parameters at `anchors`:
/// `KAN(affine(f_v(anchor)))`, plus the per-Gaussian base rows under
/// [`SEED_RAW`] when the store has them.
pub fn static_raw(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &TriplaneEncoder,
    kan: &KanNetwork,
    layout: &RawLayout,
    anchors: &[SpatialPoint],
) -> Result<Var> {
    let f_v = encoder.encode_batch(g, store, anchors)?;
    let x = g.affine(f_v, FEATURE_SCALE, FEATURE_SHIFT);
    let mut raw = map_static(kan, g, store, x, layout)?;
    if store.contains(SEED_RAW) {
        let base = store.leaf(g, SEED_RAW)?;
        raw = g.add(raw, base)?;
    }
    Ok(raw)
}

/// Build the static cloud from seed points.
pub fn init_static(
    encoder: &TriplaneEncoder,
    kan: &KanNetwork,
    store: &ParamStore,
    seeds: &[SpatialPoint],
    layout: RawLayout,
) -> Result<GaussianCloud> {
    if seeds.is_empty() {
        return Err(Error::invalid("init_static: no seed points"));
    }
    let mut g = Graph::new();
    let raw = static_raw(&mut g, store, encoder, kan, &layout, seeds)?;
    GaussianCloud::from_raw(g.value(raw), layout)
}

/// Write a text dump (one Gaussian per line) for quick inspection.
pub fn write_cloud_text(cloud: &GaussianCloud, out: &mut impl Write) -> std::io::Result<()> {
    for g in &cloud.gaussians {
        writeln!(
            out,
            "{:.6} {:.6} {:.6} | {:.6} {:.6} {:.6} | {:.4}",
            g.position[0], g.position[1], g.position[2], g.scale[0], g.scale[1], g.scale[2], g.opacity
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> RawLayout {
        RawLayout::new(1).unwrap()
    }

    #[test]
    fn widths() {
        // 3 + 3 + 4 + 3 + 1
        assert_eq!(RawLayout::new(0).unwrap().width(), 14);
        assert_eq!(RawLayout::new(3).unwrap().width(), 59);
        assert!(RawLayout::new(4).is_err());
    }

    #[test]
    fn activation_examples() {
        let l = layout();
        let mut raw = vec![0.0; l.width()];
        raw[RawLayout::ROTATION] = 2.0;
        let g = activate(&raw, &l).unwrap();
        assert_eq!(g.scale, [1.0, 1.0, 1.0]);
        assert_eq!(g.opacity, 0.5);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert!(g.is_valid());
    }

    #[test]
    fn zero_quaternion_rejected() {
        let l = layout();
        assert!(activate(&vec![0.0; l.width()], &l).is_err());
        assert!(activate(&[0.0; 3], &l).is_err());
    }

    #[test]
    fn compose_identity_and_opacity_bound() {
        let l = layout();
        let mut raw = NdArray::zeros(&[2, l.width()]);
        for i in 0..2 {
            raw.data_mut()[i * l.width() + RawLayout::ROTATION] = 1.0;
            raw.data_mut()[i * l.width()] = i as f64;
        }
        let zero = NdArray::zeros(raw.shape());
        assert_eq!(compose(&raw, &zero, l).unwrap(), GaussianCloud::from_raw(&raw, l).unwrap());

        let mut big = NdArray::zeros(raw.shape());
        big.data_mut()[l.opacity()] = 1e6;
        let c = compose(&raw, &big, l).unwrap();
        assert!(c.gaussians[0].opacity <= 1.0 && c.gaussians[0].opacity > 0.999);
        assert!(compose(&raw, &NdArray::zeros(&[3, l.width()]), l).is_err());
    }
}
