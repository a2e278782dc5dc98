//! Real spherical-harmonic colour basis up to degree 3, using the constants
//! and sign conventions of the common 3DGS rasterizers.

use std::ops::{Add, Mul, Sub};

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Value with its gradient in the three direction components.
#[derive(Copy, Clone, Debug)]
struct Dual3 {
    v: f64,
    d: [f64; 3],
}

impl Dual3 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    fn var(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Self { v, d }
    }

    fn scale(self, k: f64) -> Self {
        Self {
            v: self.v * k,
            d: [self.d[0] * k, self.d[1] * k, self.d[2] * k],
        }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

fn basis_dual(dir: [f64; 3], degree: usize) -> Vec<Dual3> {
    let (x, y, z) = (Dual3::var(dir[0], 0), Dual3::var(dir[1], 1), Dual3::var(dir[2], 2));
    let mut out = vec![Dual3::constant(C0)];
    if degree >= 1 {
        out.push(y.scale(-C1));
        out.push(z.scale(C1));
        out.push(x.scale(-C1));
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push((x * y).scale(C2[0]));
        out.push((y * z).scale(C2[1]));
        out.push((zz.scale(2.0) - xx - yy).scale(C2[2]));
        out.push((x * z).scale(C2[3]));
        out.push((xx - yy).scale(C2[4]));
        if degree >= 3 {
            out.push((y * (xx.scale(3.0) - yy)).scale(C3[0]));
            out.push((x * y * z).scale(C3[1]));
            out.push((y * (zz.scale(4.0) - xx - yy)).scale(C3[2]));
            out.push((z * (zz.scale(2.0) - xx.scale(3.0) - yy.scale(3.0))).scale(C3[3]));
            out.push((x * (zz.scale(4.0) - xx - yy)).scale(C3[4]));
            out.push((z * (xx - yy)).scale(C3[5]));
            out.push((x * (xx - yy.scale(3.0))).scale(C3[6]));
        }
    }
    out
}

/// Basis values for a unit direction.
pub fn sh_basis(dir: [f64; 3], degree: usize) -> Vec<f64> {
    basis_dual(dir, degree).into_iter().map(|d| d.v).collect()
}

/// Basis values and their gradients with respect to the direction vector.
pub fn sh_basis_with_grad(dir: [f64; 3], degree: usize) -> (Vec<f64>, Vec<[f64; 3]>) {
    basis_dual(dir, degree).into_iter().map(|d| (d.v, d.d)).unzip()
}

/// Colour before clamping: `0.5 + Σ_k basis_k · sh[k]` per channel.
pub fn eval_color(sh: &[f64], basis: &[f64]) -> [f64; 3] {
    let mut c = [0.5; 3];
    for (k, b) in basis.iter().enumerate() {
        for ch in 0..3 {
            c[ch] += b * sh[k * 3 + ch];
        }
    }
    c
}

/// Inverse of the DC term: the SH coefficient that yields colour `c`.
pub fn rgb_to_dc(c: f64) -> f64 {
    (c - 0.5) / C0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_dc() {
        for d in 0..=3 {
            assert_eq!(sh_basis([0.0, 0.0, 1.0], d).len(), (d + 1) * (d + 1));
        }
        let c = eval_color(&[rgb_to_dc(0.8), rgb_to_dc(0.1), rgb_to_dc(0.4)], &sh_basis([1.0, 0.0, 0.0], 0));
        assert!((c[0] - 0.8).abs() < 1e-12 && (c[1] - 0.1).abs() < 1e-12 && (c[2] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let dir = [0.3, -0.5, 0.81];
        let (_, grad) = sh_basis_with_grad(dir, 3);
        let h = 1e-6;
        for axis in 0..3 {
            let (mut p, mut m) = (dir, dir);
            p[axis] += h;
            m[axis] -= h;
            let (bp, bm) = (sh_basis(p, 3), sh_basis(m, 3));
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - grad[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }
}
