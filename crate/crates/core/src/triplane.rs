//! Multi-resolution hashed triplane encoder.
//!
//! A point `(x, y, z)` is projected onto the XY, YZ and XZ planes. On each
//! plane and at each resolution level the four surrounding grid nodes are
//! hashed into a per-level feature table and bilinearly interpolated. Levels
//! are concatenated per plane, and the three plane features are fused with a
//! Hadamard product, level-aligned, into `f_v` of width `levels · features`.

use rand::Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::NdArray;

pub const PRIME_I: u64 = 1;
pub const PRIME_J: u64 = 2_654_435_761;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Plane {
    Xy,
    Yz,
    Xz,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Yz, Plane::Xz];

    pub fn tag(self) -> &'static str {
        match self {
            Plane::Xy => "xy",
            Plane::Yz => "yz",
            Plane::Xz => "xz",
        }
    }

    pub fn project(self, p: SpatialPoint) -> [f64; 2] {
        match self {
            Plane::Xy => [p.x, p.y],
            Plane::Yz => [p.y, p.z],
            Plane::Xz => [p.x, p.z],
        }
    }
}

/// Normalized coordinates; values outside `[-1, 1]` are clamped on use.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SpatialPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SpatialPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn clamped(self) -> Self {
        Self {
            x: self.x.clamp(-1.0, 1.0),
            y: self.y.clamp(-1.0, 1.0),
            z: self.z.clamp(-1.0, 1.0),
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    /// Rows per hash table; must be a power of two.
    pub table_size: usize,
    pub features: usize,
}

impl Default for TriplaneConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_resolution: 16,
            growth_factor: 2.0,
            table_size: 1 << 14,
            features: 2,
        }
    }
}

impl TriplaneConfig {
    pub fn output_width(&self) -> usize {
        self.levels * self.features
    }

    pub fn resolution(&self, level: usize) -> usize {
        ((self.base_resolution as f64) * self.growth_factor.powi(level as i32)).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.table_size.is_power_of_two() {
            return Err(Error::invalid("triplane table_size must be a power of two"));
        }
        if self.levels == 0 || self.features == 0 || self.base_resolution == 0 {
            return Err(Error::invalid("triplane levels, features and base_resolution must be > 0"));
        }
        if self.growth_factor < 1.0 {
            return Err(Error::invalid("triplane growth_factor must be >= 1"));
        }
        Ok(())
    }

    pub fn write(&self, kv: &mut KeyValues) {
        kv.set("triplane.levels", self.levels);
        kv.set("triplane.base_resolution", self.base_resolution);
        kv.set("triplane.growth_factor", self.growth_factor);
        kv.set("triplane.table_size", self.table_size);
        kv.set("triplane.features", self.features);
    }

    pub fn read(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("triplane.levels", &mut self.levels)?;
        kv.read_into("triplane.base_resolution", &mut self.base_resolution)?;
        kv.read_into("triplane.growth_factor", &mut self.growth_factor)?;
        kv.read_into("triplane.table_size", &mut self.table_size)?;
        kv.read_into("triplane.features", &mut self.features)?;
        self.validate()
    }
}

/// Spatial hash of a 2-D grid node: `(i·π₁ XOR j·π₂) mod table_size`.
pub fn hash_index(i: u64, j: u64, table_size: usize) -> usize {
    debug_assert!(table_size.is_power_of_two());
    let h = i.wrapping_mul(PRIME_I) ^ j.wrapping_mul(PRIME_J);
    (h & (table_size as u64 - 1)) as usize
}

/// Table rows and bilinear weights of the four corners around `u` at a level.
pub fn corners(u: [f64; 2], resolution: usize, table_size: usize) -> [(usize, f64); 4] {
    let res = resolution as f64;
    let mut cell = [0u64; 2];
    let mut frac = [0.0; 2];
    for a in 0..2 {
        let g = (u[a].clamp(-1.0, 1.0) + 1.0) * 0.5 * res;
        let c = (g.floor() as usize).min(resolution - 1);
        cell[a] = c as u64;
        frac[a] = g - c as f64;
    }
    let (i, j) = (cell[0], cell[1]);
    let (fx, fy) = (frac[0], frac[1]);
    [
        (hash_index(i, j, table_size), (1.0 - fx) * (1.0 - fy)),
        (hash_index(i + 1, j, table_size), fx * (1.0 - fy)),
        (hash_index(i, j + 1, table_size), (1.0 - fx) * fy),
        (hash_index(i + 1, j + 1, table_size), fx * fy),
    ]
}

/// The hashed triplane. Tables live in a [`ParamStore`] under
/// `triplane/<plane>/level<l>`, each `table_size × features`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneEncoder {
    pub config: TriplaneConfig,
}

impl TriplaneEncoder {
    pub const PREFIX: &'static str = "triplane/";

    pub fn new(config: TriplaneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn table_name(plane: Plane, level: usize) -> String {
        format!("triplane/{}/level{}", plane.tag(), level)
    }

    /// Tables start near one so the three-way product neither vanishes nor
    /// blows up: values uniform in `[1 - spread, 1 + spread]`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, spread: f64) {
        let c = &self.config;
        for plane in Plane::ALL {
            for l in 0..c.levels {
                let data = (0..c.table_size * c.features)
                    .map(|_| 1.0 + rng.gen_range(-spread..=spread))
                    .collect();
                let table = NdArray::matrix(c.table_size, c.features, data).expect("table shape");
                store.insert(Self::table_name(plane, l), table, true);
            }
        }
    }

    /// Per-plane feature: bilinear lookups at every level, concatenated.
    pub fn encode_plane(&self, store: &ParamStore, plane: Plane, u: [f64; 2]) -> Result<Vec<f64>> {
        let c = &self.config;
        let mut out = Vec::with_capacity(c.output_width());
        for l in 0..c.levels {
            let table = store.get(&Self::table_name(plane, l))?;
            let mut feat = vec![0.0; c.features];
            for (row, w) in corners(u, c.resolution(l), c.table_size) {
                for (f, v) in feat.iter_mut().zip(table.row(row)) {
                    *f += w * v;
                }
            }
            out.extend(feat);
        }
        Ok(out)
    }

    /// `f_v(p) = xy(x,y) ⊙ yz(y,z) ⊙ xz(x,z)`.
    pub fn encode_point(&self, store: &ParamStore, p: SpatialPoint) -> Result<Vec<f64>> {
        let p = p.clamped();
        let mut out = vec![1.0; self.config.output_width()];
        for plane in Plane::ALL {
            let f = self.encode_plane(store, plane, plane.project(p))?;
            for (o, v) in out.iter_mut().zip(f) {
                *o *= v;
            }
        }
        Ok(out)
    }

    /// Differentiable batch encoding (`N × levels·features`).
    pub fn encode_batch(&self, g: &mut Graph, store: &ParamStore, points: &[SpatialPoint]) -> Result<Var> {
        if points.is_empty() {
            return Err(Error::invalid("encode_batch: empty point batch"));
        }
        let mut fused = None;
        for plane in Plane::ALL {
            let feat = self.plane_lookup(g, store, plane, points)?;
            fused = Some(match fused {
                None => feat,
                Some(acc) => g.mul(acc, feat)?,
            });
        }
        Ok(fused.expect("three planes"))
    }

    fn plane_lookup(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        plane: Plane,
        points: &[SpatialPoint],
    ) -> Result<Var> {
        let c = &self.config;
        let tables: Vec<Var> = (0..c.levels)
            .map(|l| store.leaf(g, &Self::table_name(plane, l)))
            .collect::<Result<_>>()?;
        let n = points.len();
        let width = c.output_width();
        let mut taps = Vec::with_capacity(n * c.levels);
        let mut out = vec![0.0; n * width];
        for (i, p) in points.iter().enumerate() {
            let u = plane.project(p.clamped());
            for l in 0..c.levels {
                let cs = corners(u, c.resolution(l), c.table_size);
                let table = g.value(tables[l]);
                let dst = &mut out[i * width + l * c.features..i * width + (l + 1) * c.features];
                for &(row, w) in &cs {
                    for (d, v) in dst.iter_mut().zip(table.row(row)) {
                        *d += w * v;
                    }
                }
                taps.push(cs);
            }
        }
        let op = PlaneLookupOp {
            levels: c.levels,
            features: c.features,
            taps,
        };
        Ok(g.custom(
            op,
            &tables,
            NdArray::matrix(n, width, out)?,
            (n * c.levels * 4 * c.features) as u64,
        ))
    }
}

struct PlaneLookupOp {
    levels: usize,
    features: usize,
    /// Corner rows and weights per (point, level), row-major.
    taps: Vec<[(usize, f64); 4]>,
}

impl CustomOp for PlaneLookupOp {
    fn name(&self) -> &'static str {
        "triplane_lookup"
    }

    fn backward(
        &self,
        inputs: &[&NdArray],
        _output: &NdArray,
        grad: &NdArray,
        needs: &[bool],
    ) -> Vec<Option<NdArray>> {
        let (levels, f) = (self.levels, self.features);
        let width = levels * f;
        let mut out: Vec<Option<NdArray>> = inputs
            .iter()
            .zip(needs)
            .map(|(t, &need)| need.then(|| NdArray::zeros(t.shape())))
            .collect();
        for (k, cs) in self.taps.iter().enumerate() {
            let (i, l) = (k / levels, k % levels);
            let Some(dt) = out[l].as_mut() else { continue };
            let gsrc = &grad.data()[i * width + l * f..i * width + (l + 1) * f];
            let d = dt.data_mut();
            for &(row, w) in cs {
                for (j, gv) in gsrc.iter().enumerate() {
                    d[row * f + j] += w * gv;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (TriplaneEncoder, ParamStore) {
        let enc = TriplaneEncoder::new(TriplaneConfig {
            levels: 2,
            base_resolution: 4,
            growth_factor: 2.0,
            table_size: 64,
            features: 2,
        })
        .unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7), 0.5);
        (enc, store)
    }

    #[test]
    fn hash_examples() {
        assert_eq!(hash_index(0, 0, 16), 0);
        assert_eq!(hash_index(1, 0, 1 << 14), 1);
    }

    #[test]
    fn node_lookup_is_exact() {
        let (enc, store) = small();
        // u = (-0.5, 0.5) sits on a node at every level (res 4 and 8).
        let f = enc.encode_plane(&store, Plane::Xy, [-0.5, 0.5]).unwrap();
        for l in 0..2 {
            let res = enc.config.resolution(l);
            let (i, j) = ((res / 4) as u64, (3 * res / 4) as u64);
            let row = hash_index(i, j, 64);
            let t = store.get(&TriplaneEncoder::table_name(Plane::Xy, l)).unwrap();
            assert_eq!(&f[l * 2..l * 2 + 2], t.row(row));
        }
    }

    #[test]
    fn clamps_out_of_range() {
        let (enc, store) = small();
        let a = enc.encode_point(&store, SpatialPoint::new(1.7, -3.0, 0.2)).unwrap();
        let b = enc.encode_point(&store, SpatialPoint::new(1.0, -1.0, 0.2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_batch_rejected() {
        let (enc, store) = small();
        let mut g = Graph::new();
        assert!(enc.encode_batch(&mut g, &store, &[]).is_err());
    }
}
