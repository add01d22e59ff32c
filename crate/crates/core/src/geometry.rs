//! Pinhole camera model and depth-to-point-cloud back-projection.
//!
//! Pixel `(u, v)` has `u` along the width and `v` along the height, with
//! integer coordinates at pixel centers. Camera frame: `x` right, `y` down,
//! `z` forward. Poses map camera coordinates to world coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Zero-skew intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Domain(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Camera-frame direction with unit z for pixel `(u, v)`, i.e. `K⁻¹[u, v, 1]ᵀ`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl CameraPose {
    pub const IDENTITY: CameraPose = CameraPose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Domain("rotation is not orthonormal".into()));
                }
            }
        }
        if (det(&rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("rotation determinant is not +1".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::IDENTITY
        }
    }

    /// Camera at `eye` looking at `target` with world `+z` as up.
    pub fn look_at(eye: Vec3, target: Vec3) -> Result<Self> {
        let fwd = normalize(sub(target, eye));
        let right = cross(fwd, [0.0, 0.0, 1.0]);
        let rn = (right[0] * right[0] + right[1] * right[1] + right[2] * right[2]).sqrt();
        if rn < 1e-9 {
            return Err(Error::Domain("look-at direction parallel to up axis".into()));
        }
        let right = [right[0] / rn, right[1] / rn, right[2] / rn];
        let down = cross(fwd, right);
        // Columns are the camera axes expressed in world coordinates.
        let rotation = [
            [right[0], down[0], fwd[0]],
            [right[1], down[1], fwd[1]],
            [right[2], down[2], fwd[2]],
        ];
        Self::new(rotation, eye)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, &sub(*p, self.translation))
    }

    pub fn inverse(&self) -> CameraPose {
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.rotation[j][i];
            }
        }
        let t = mat_vec(&rt, &self.translation);
        CameraPose {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// World-frame direction of the camera-frame vector `d`.
    pub fn rotate(&self, d: &Vec3) -> Vec3 {
        mat_vec(&self.rotation, d)
    }
}

/// Dense per-pixel depth in meters; `0` marks pixels without geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim("depth", format!("{height}x{width} needs {} values", height * width)));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!("invalid depth value {v}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.at(u, v) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub source_pixels: Vec<(usize, usize)>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `T · (K⁻¹ [u, v, 1]ᵀ · depth)`.
pub fn back_project_pixel(u: f64, v: f64, depth: f64, k: &CameraIntrinsics, t: &CameraPose) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth must be positive, got {depth}")));
    }
    let r = k.ray(u, v);
    Ok(t.apply(&[r[0] * depth, r[1] * depth, depth]))
}

/// One point per valid pixel, in row-major raster order.
pub fn reconstruct_point_cloud(depth: &DepthMap, k: &CameraIntrinsics, t: &CameraPose) -> PointCloud {
    let mut cloud = PointCloud::default();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v);
            if d > 0.0 {
                let p = back_project_pixel(u as f64, v as f64, d, k, t).expect("positive depth");
                cloud.points.push(p);
                cloud.source_pixels.push((u, v));
            }
        }
    }
    cloud
}

/// Inverse of [`back_project_pixel`]: world point to `(u, v, depth)`.
pub fn project_point(p: &Vec3, k: &CameraIntrinsics, t: &CameraPose) -> Result<(f64, f64, f64)> {
    let c = t.apply_inverse(p);
    if !(c[2] > 0.0) {
        return Err(Error::BehindCamera { z: c[2] });
    }
    Ok((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2]))
}

/// World-frame ray directions (unit camera z) for every pixel of an
/// `height x width` grid in raster order; `depth * dir + origin` is the
/// back-projected point.
pub fn pixel_rays(height: usize, width: usize, k: &CameraIntrinsics, t: &CameraPose) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(height * width);
    for v in 0..height {
        for u in 0..width {
            out.push(t.rotate(&k.ray(u as f64, v as f64)));
        }
    }
    out
}
