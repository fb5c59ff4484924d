//! Rigid transforms, pinhole cameras and per-pixel rays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

/// Rigid transform `p ↦ R p + t`; `rotation` is row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub const fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation `Rz(roll)·Ry(yaw)·Rx(pitch)` in radians.
    pub fn from_euler(pitch: f64, yaw: f64, roll: f64, translation: Vec3) -> Self {
        let (sx, cx) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        let (sz, cz) = roll.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        Self {
            rotation: matmul(&rz, &matmul(&ry, &rx)),
            translation,
        }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        add(self.apply_dir(p), self.translation)
    }

    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], d), dot(r[1], d), dot(r[2], d)]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: matmul(&self.rotation, &other.rotation),
            translation: self.apply_point(other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = transpose(&self.rotation);
        let t = self.translation;
        let rt_t = [dot(rt[0], t), dot(rt[1], t), dot(rt[2], t)];
        Pose {
            rotation: rt,
            translation: scale(rt_t, -1.0),
        }
    }

    pub fn determinant(&self) -> f64 {
        det(&self.rotation)
    }

    /// Largest entry of `|RᵀR − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let rtr = matmul(&transpose(&self.rotation), &self.rotation);
        let mut err: f64 = 0.0;
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                err = err.max((v - id).abs());
            }
        }
        err
    }

    pub fn check_rigid(&self, tol: f64) -> Result<()> {
        let finite = self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonRigid("non-finite entries".into()));
        }
        let orth = self.orthogonality_error();
        if orth > tol {
            return Err(Error::NonRigid(format!(
                "|RᵀR − I| = {orth:.3e} exceeds {tol:.0e}"
            )));
        }
        let d = self.determinant();
        if (d - 1.0).abs() > tol {
            return Err(Error::NonRigid(format!("det R = {d}")));
        }
        Ok(())
    }
}

pub fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn det(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Pinhole intrinsics in pixels. Camera looks along +z, x right, y down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Intrinsics for an image downscaled by an integer factor, covering the
    /// same field of view (low-res pixel centers sit at block centers).
    pub fn downscaled(&self, factor: usize) -> Intrinsics {
        let f = factor as f64;
        Intrinsics {
            width: self.width / factor,
            height: self.height / factor,
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
        }
    }
}

/// Camera with `pose` mapping camera coordinates into the frame of the
/// object being rendered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl Camera {
    pub fn origin(&self) -> Vec3 {
        self.pose.translation
    }

    /// Unit ray direction through the center of pixel `(x, y)`.
    pub fn ray_dir(&self, x: usize, y: usize) -> Vec3 {
        let k = &self.intrinsics;
        let d = [
            (x as f64 + 0.5 - k.cx) / k.fx,
            (y as f64 + 0.5 - k.cy) / k.fy,
            1.0,
        ];
        normalize(self.pose.apply_dir(d))
    }

    /// The same camera expressed in another frame; `world_to_local` maps
    /// points into that frame.
    pub fn in_frame(&self, world_to_local: &Pose) -> Camera {
        Camera {
            pose: world_to_local.compose(&self.pose),
            intrinsics: self.intrinsics,
        }
    }
}
