//! Kolmogorov-Arnold network layers with B-spline edges.
//!
//! Every edge `(o, i)` of a layer carries the univariate function
//! `base[o,i]·silu(x) + Σ_b spline[o,i,b]·B_b(x)`; a unit sums its incoming
//! edges. The basis is evaluated in a fused graph op and contracted with the
//! coefficients by an ordinary matmul, which skips the basis zeros.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gaussians::RawLayout;
use crate::graph::{CustomOp, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::NdArray;

/// Uniform knot vector on `[lo, hi]` with `intervals` spans, extended by
/// `degree` knots on each side.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SplineGrid {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
    pub degree: usize,
}

impl Default for SplineGrid {
    fn default() -> Self {
        Self {
            lo: -1.0,
            hi: 1.0,
            intervals: 5,
            degree: 3,
        }
    }
}

impl SplineGrid {
    pub fn num_basis(&self) -> usize {
        self.intervals + self.degree
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    pub fn knots(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.intervals + 2 * self.degree)
            .map(|j| self.lo + (j as f64 - self.degree as f64) * h)
            .collect()
    }

    /// Index of the first non-zero basis function at `x` and the clamped `x`.
    fn span(&self, x: f64) -> (usize, f64) {
        let x = x.clamp(self.lo, self.hi);
        let cell = (((x - self.lo) / self.step()).floor() as usize).min(self.intervals - 1);
        (cell, x)
    }

    /// The `degree + 1` non-zero basis values starting at the returned index.
    fn local(&self, x: f64, degree: usize, cell: usize) -> Vec<f64> {
        let t = self.knots();
        let s = cell + self.degree; // knot span index: t[s] <= x < t[s+1]
        let mut n = vec![0.0; degree + 1];
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        n
    }

    /// All `intervals + degree` basis values at `x` (clamped into the span).
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis()];
        let (cell, xc) = self.span(x);
        for (r, v) in self.local(xc, self.degree, cell).into_iter().enumerate() {
            out[cell + r] = v;
        }
        out
    }

    /// Basis values and their derivatives in `x`. Derivatives vanish outside
    /// the span, where evaluation is clamped.
    pub fn basis_with_derivative(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let nb = self.num_basis();
        let (mut vals, mut ders) = (vec![0.0; nb], vec![0.0; nb]);
        let (cell, xc) = self.span(x);
        for (r, v) in self.local(xc, self.degree, cell).into_iter().enumerate() {
            vals[cell + r] = v;
        }
        let inside = x >= self.lo && x <= self.hi;
        if self.degree > 0 && inside {
            // d/dx B_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h on a uniform grid;
            // the degree-(k-1) functions here start at index cell + 1.
            let lower = self.local(xc, self.degree - 1, cell);
            let h = self.step();
            for (r, v) in lower.into_iter().enumerate() {
                let i = cell + 1 + r; // global index of this lower-degree function
                ders[i] += v / h;
                ders[i - 1] -= v / h;
            }
        }
        (vals, ders)
    }
}

struct BasisOp {
    grid: SplineGrid,
    /// Dense `N × in·nb` derivatives recorded in the forward pass.
    ders: Vec<f64>,
}

impl CustomOp for BasisOp {
    fn name(&self) -> &'static str {
        "bspline_basis"
    }

    fn backward(&self, inputs: &[&NdArray], _: &NdArray, grad: &NdArray, needs: &[bool]) -> Vec<Option<NdArray>> {
        if !needs[0] {
            return vec![None];
        }
        let nb = self.grid.num_basis();
        let x = inputs[0];
        let mut dx = NdArray::zeros(x.shape());
        for (k, d) in dx.data_mut().iter_mut().enumerate() {
            let gs = &grad.data()[k * nb..(k + 1) * nb];
            let ds = &self.ders[k * nb..(k + 1) * nb];
            *d = gs.iter().zip(ds).map(|(a, b)| a * b).sum();
        }
        vec![Some(dx)]
    }
}

/// Expand `x` (`N × in`) into basis values (`N × in·nb`).
pub fn spline_basis(g: &mut Graph, x: Var, grid: SplineGrid) -> Result<Var> {
    let xv = g.value(x);
    if xv.shape().len() != 2 {
        return Err(Error::shape("spline_basis", format!("expected 2-D input, got {:?}", xv.shape())));
    }
    let (n, w) = (xv.rows(), xv.cols());
    let nb = grid.num_basis();
    let mut vals = Vec::with_capacity(n * w * nb);
    let mut ders = Vec::with_capacity(n * w * nb);
    for &v in xv.data() {
        let (b, d) = grid.basis_with_derivative(v);
        vals.extend(b);
        ders.extend(d);
    }
    let out = NdArray::matrix(n, w * nb, vals)?;
    Ok(g.custom(BasisOp { grid, ders }, &[x], out, 0))
}

/// One KAN layer's parameter names and widths.
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    pub in_width: usize,
    pub out_width: usize,
    pub spline_name: String,
    pub base_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanNetwork {
    pub prefix: String,
    pub grid: SplineGrid,
    pub layers: Vec<KanLayer>,
}

impl KanNetwork {
    /// `widths` lists every layer boundary, e.g. `[8, 64, 23]` for two layers.
    pub fn new(prefix: &str, widths: &[usize], grid: SplineGrid) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("KAN widths {widths:?} need >= 2 positive entries")));
        }
        if grid.intervals == 0 || grid.hi <= grid.lo {
            return Err(Error::invalid("KAN spline grid is empty"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| KanLayer {
                in_width: w[0],
                out_width: w[1],
                spline_name: format!("{prefix}/layer{l}/spline"),
                base_name: format!("{prefix}/layer{l}/base"),
            })
            .collect();
        Ok(Self {
            prefix: prefix.to_string(),
            grid,
            layers,
        })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("non-empty").out_width
    }

    /// Random initialization. With `zero_last`, the final layer starts at
    /// exactly zero so the network outputs zeros until trained.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, spline_scale: f64, zero_last: bool) {
        let nb = self.grid.num_basis();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (i, o) = (layer.in_width, layer.out_width);
            let zero = zero_last && l == last;
            let a = 1.0 / (i as f64).sqrt();
            let mut draw = |len: usize, amp: f64| -> Vec<f64> {
                (0..len)
                    .map(|_| if zero { 0.0 } else { rng.gen_range(-amp..=amp) })
                    .collect()
            };
            let spline = NdArray::new(vec![o, i, nb], draw(o * i * nb, spline_scale * a)).expect("shape");
            let base = NdArray::matrix(o, i, draw(o * i, a)).expect("shape");
            store.insert(layer.spline_name.clone(), spline, true);
            store.insert(layer.base_name.clone(), base, true);
        }
    }

    /// Forward pass for a batch `x` (`N × in_width`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).shape().len() != 2 || g.value(x).cols() != self.in_width() {
            return Err(Error::shape(
                format!("{} input", self.prefix),
                format!("expected N x {}, got {:?}", self.in_width(), g.shape(x)),
            ));
        }
        let nb = self.grid.num_basis();
        let mut h = x;
        for layer in &self.layers {
            let base = store.leaf(g, &layer.base_name)?;
            let spline = store.leaf(g, &layer.spline_name)?;
            let act = g.silu(h);
            let base_t = g.transpose(base)?;
            let base_out = g.matmul(act, base_t)?;
            let basis = spline_basis(g, h, self.grid)?;
            let coeffs = g.reshape(spline, vec![layer.out_width, layer.in_width * nb])?;
            let coeffs_t = g.transpose(coeffs)?;
            let spline_out = g.matmul(basis, coeffs_t)?;
            h = g.add(base_out, spline_out)?;
        }
        Ok(h)
    }

    /// Single-vector convenience wrapper around [`KanNetwork::forward`].
    pub fn forward_vector(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(NdArray::matrix(1, x.len(), x.to_vec())?);
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Map a batch of spatial features to raw static Gaussian
/// parameters laid out as `(μ, s, r, SH, α)`.
pub fn map_static(kan: &KanNetwork, g: &mut Graph, store: &ParamStore, f_v: Var, layout: &RawLayout) -> Result<Var> {
    map_raw(kan, g, store, f_v, layout)
}

/// Deformation offsets with the same layout as [`map_static`].
pub fn map_deform(kan: &KanNetwork, g: &mut Graph, store: &ParamStore, f_d: Var, layout: &RawLayout) -> Result<Var> {
    map_raw(kan, g, store, f_d, layout)
}

fn map_raw(kan: &KanNetwork, g: &mut Graph, store: &ParamStore, x: Var, layout: &RawLayout) -> Result<Var> {
    if kan.out_width() != layout.width() {
        return Err(Error::shape(
            format!("{} output", kan.prefix),
            format!("network emits {} values, layout needs {}", kan.out_width(), layout.width()),
        ));
    }
    kan.forward(g, store, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity_and_nonnegative() {
        let grid = SplineGrid::default();
        for i in 0..=200 {
            let x = -1.0 + i as f64 * 0.01;
            let b = grid.basis(x);
            assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "x={x}");
            assert!(b.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn linear_basis_is_one_hot_at_knots() {
        let grid = SplineGrid {
            degree: 1,
            ..SplineGrid::default()
        };
        let knots = grid.knots();
        for &x in &knots[1..knots.len() - 1] {
            let b = grid.basis(x);
            assert_eq!(b.iter().filter(|&&v| v == 1.0).count(), 1, "x={x}: {b:?}");
            assert_eq!(b.iter().filter(|&&v| v == 0.0).count(), b.len() - 1);
        }
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        let grid = SplineGrid::default();
        for x in [-0.93, -0.41, 0.05, 0.33, 0.77] {
            let (_, d) = grid.basis_with_derivative(x);
            let h = 1e-6;
            let (p, m) = (grid.basis(x + h), grid.basis(x - h));
            for b in 0..grid.num_basis() {
                let fd = (p[b] - m[b]) / (2.0 * h);
                assert!((fd - d[b]).abs() < 1e-6, "x={x} b={b}: {fd} vs {}", d[b]);
            }
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let kan = KanNetwork::new("k", &[3, 4], SplineGrid::default()).unwrap();
        let mut store = ParamStore::new();
        kan.init(&mut store, &mut rand::thread_rng(), 0.1, false);
        assert!(kan.forward_vector(&store, &[0.0, 0.0]).is_err());
        assert!(KanNetwork::new("k", &[3], SplineGrid::default()).is_err());
    }
}
