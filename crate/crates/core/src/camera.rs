//! Pinhole cameras with world-to-camera extrinsics.
//!
//! Camera space is x right, y down, z forward. Pixel `(i, j)` has its centre
//! at coordinates `(i, j)`.

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: [f64; 3],
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` the world up direction.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = normalize(sub(target, eye))?;
        let right = normalize(cross(forward, up))?;
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let t = mat_vec(&rotation, eye);
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
            rotation,
            translation: [-t[0], -t[1], -t[2]],
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be non-zero"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let rt = transpose(&self.rotation);
        let c = mat_vec(&rt, self.translation);
        [-c[0], -c[1], -c[2]]
    }

    /// Pixel coordinates of a world point, or `None` behind the camera.
    pub fn project_point(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let c = self.to_camera(p);
        (c[2] > 0.0).then(|| [self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy])
    }

    /// Six-number pose: axis-angle of the rotation followed by translation.
    pub fn pose_vector(&self) -> [f64; 6] {
        let w = rotation_log(&self.rotation);
        [w[0], w[1], w[2], self.translation[0], self.translation[1], self.translation[2]]
    }

    /// `fx fy cx cy width height` then the 3×4 extrinsic matrix row by row.
    pub fn to_line(&self) -> String {
        let mut parts = vec![
            fmt(self.fx),
            fmt(self.fy),
            fmt(self.cx),
            fmt(self.cy),
            self.width.to_string(),
            self.height.to_string(),
        ];
        for i in 0..3 {
            for j in 0..3 {
                parts.push(fmt(self.rotation[i][j]));
            }
            parts.push(fmt(self.translation[i]));
        }
        parts.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 18 {
            return Err(Error::invalid(format!("camera line needs 18 fields, got {}", tok.len())));
        }
        let f = |i: usize| -> Result<f64> {
            tok[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad camera field `{}`", tok[i])))
        };
        let u = |i: usize| -> Result<usize> {
            tok[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad camera field `{}`", tok[i])))
        };
        let mut rotation = [[0.0; 3]; 3];
        let mut translation = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = f(6 + i * 4 + j)?;
            }
            translation[i] = f(6 + i * 4 + 3)?;
        }
        let cam = Self {
            fx: f(0)?,
            fy: f(1)?,
            cx: f(2)?,
            cy: f(3)?,
            width: u(4)?,
            height: u(5)?,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }
}

fn fmt(v: f64) -> String {
    // Round-trip exact decimal.
    format!("{v:?}")
}

pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot3(v, v).sqrt();
    if n < 1e-12 {
        return Err(Error::invalid("degenerate camera orientation"));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

pub fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Axis-angle vector of a rotation matrix.
pub fn rotation_log(r: &Mat3) -> [f64; 3] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let v = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if angle < 1e-9 {
        return [v[0] * 0.5, v[1] * 0.5, v[2] * 0.5];
    }
    let s = angle.sin();
    if s.abs() < 1e-6 {
        // angle ≈ π: axis from the diagonal.
        let axis = [
            ((r[0][0] + 1.0) * 0.5).max(0.0).sqrt(),
            ((r[1][1] + 1.0) * 0.5).max(0.0).sqrt().copysign(r[0][1] + r[1][0]),
            ((r[2][2] + 1.0) * 0.5).max(0.0).sqrt().copysign(r[0][2] + r[2][0]),
        ];
        return [axis[0] * angle, axis[1] * angle, axis[2] * angle];
    }
    let k = angle / (2.0 * s);
    [v[0] * k, v[1] * k, v[2] * k]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_center() {
        let cam = Camera::look_at([3.0, 0.5, 4.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 90.0, 64, 48).unwrap();
        let p = cam.project_point([0.0, 0.0, 0.0]).unwrap();
        assert!((p[0] - cam.cx).abs() < 1e-9 && (p[1] - cam.cy).abs() < 1e-9);
        let c = cam.center();
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12 && (c[2] - 4.0).abs() < 1e-12);
        // world up projects above the target (smaller row index)
        let up = cam.project_point([0.0, 0.5, 0.0]).unwrap();
        assert!(up[1] < cam.cy);
    }

    #[test]
    fn line_round_trip() {
        let cam = Camera::look_at([1.0, 0.2, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 80.0, 32, 32).unwrap();
        assert_eq!(Camera::from_line(&cam.to_line()).unwrap(), cam);
        assert!(Camera::from_line("1 2 3").is_err());
    }

    #[test]
    fn rotation_log_of_axis_rotation() {
        let a: f64 = 0.7;
        let r = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
        let w = rotation_log(&r);
        assert!((w[2] - a).abs() < 1e-12 && w[0].abs() < 1e-12 && w[1].abs() < 1e-12);
    }
}
