//! Pinhole cameras arranged on an outward-facing ring.
//!
//! World frame: `z` up, rig centred on the origin. Camera frame: `x` right,
//! `y` down, `z` along the optical axis. Pixel `(u, v)` samples the ray
//! through integer image coordinates, so the principal point `(W/2, H/2)`
//! is exactly on the optical axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }
}

/// Rigid camera-to-world transform, row-major 4x4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub [[f64; 4]; 4]);

impl Pose {
    pub fn from_axes(x: Vec3, y: Vec3, z: Vec3, t: Vec3) -> Self {
        Pose([
            [x[0], y[0], z[0], t[0]],
            [x[1], y[1], z[1], t[1]],
            [x[2], y[2], z[2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    pub fn translation(&self) -> Vec3 {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }

    /// Rotates a camera-frame direction into the world frame.
    pub fn rotate(&self, d: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
        ]
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        let r = self.rotate(p);
        let t = self.translation();
        [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.translation());
        let m = &self.0;
        [
            m[0][0] * d[0] + m[1][0] * d[1] + m[2][0] * d[2],
            m[0][1] * d[0] + m[1][1] * d[1] + m[2][1] * d[2],
            m[0][2] * d[0] + m[1][2] * d[1] + m[2][2] * d[2],
        ]
    }

    /// Largest deviation of `R^T R` from identity, plus a check of the last row.
    pub fn orthonormality_error(&self) -> f64 {
        let m = &self.0;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((d - target).abs());
            }
        }
        let last = [m[3][0], m[3][1], m[3][2], m[3][3] - 1.0];
        last.iter().fold(err, |e, v| e.max(v.abs()))
    }

    pub fn flat(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for (i, row) in self.0.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(row);
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::config(format!("pose needs 16 values, got {}", v.len())));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[i * 4..i * 4 + 4]);
        }
        Ok(Pose(m))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub rig_radius_m: f64,
    pub intrinsics: Vec<Intrinsics>,
    pub extrinsics: Vec<Pose>,
}

pub fn intrinsics_from_hfov(width: usize, height: usize, hfov_deg: f64) -> Intrinsics {
    let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
    Intrinsics {
        fx,
        fy: fx,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    }
}

/// Camera-to-world pose of an outward-facing camera at `yaw` on a ring.
pub fn ring_pose(yaw: f64, radius: f64) -> Pose {
    let (s, c) = yaw.sin_cos();
    let forward = [c, s, 0.0];
    let down = [0.0, 0.0, -1.0];
    // right = down x forward keeps the camera frame right-handed
    let right = [s, -c, 0.0];
    Pose::from_axes(right, down, forward, [radius * c, radius * s, 0.0])
}

/// Builds `n_views` cameras spaced `360 / n_views` degrees apart on a circle.
pub fn make_rig(n_views: usize, hfov_deg: f64, width: usize, height: usize, rig_radius_m: f64) -> Result<CameraRig> {
    if n_views < 2 {
        return Err(Error::config(format!("a rig needs at least 2 views, got {n_views}")));
    }
    if !(10.0..=170.0).contains(&hfov_deg) {
        return Err(Error::config(format!("hfov_deg must lie in [10, 170], got {hfov_deg}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::config("image extents must be positive"));
    }
    if !(rig_radius_m >= 0.0 && rig_radius_m.is_finite()) {
        return Err(Error::config(format!("rig radius must be non-negative, got {rig_radius_m}")));
    }
    let k = intrinsics_from_hfov(width, height, hfov_deg);
    let extrinsics = (0..n_views)
        .map(|j| ring_pose(view_yaw(j, n_views), rig_radius_m))
        .collect();
    Ok(CameraRig {
        n_views,
        width,
        height,
        hfov_deg,
        rig_radius_m,
        intrinsics: vec![k; n_views],
        extrinsics,
    })
}

pub fn view_yaw(j: usize, n_views: usize) -> f64 {
    std::f64::consts::TAU * j as f64 / n_views as f64
}

/// Pinhole projection of a camera-frame point to `(u, v, depth)`.
pub fn project(p: Vec3, k: &Intrinsics) -> Result<(f64, f64, f64)> {
    if p[2] <= 0.0 {
        return Err(Error::BehindCamera(p[2]));
    }
    Ok((k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy, p[2]))
}

pub fn unproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Vec3 {
    [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth]
}

impl CameraRig {
    /// Angle between neighbouring optical axes.
    pub fn axis_spacing_deg(&self) -> f64 {
        360.0 / self.n_views as f64
    }

    /// Horizontal angular overlap between neighbouring frusta (0 when disjoint).
    pub fn pairwise_overlap_deg(&self) -> f64 {
        (self.hfov_deg - self.axis_spacing_deg()).max(0.0)
    }

    /// Camera-frame ray direction (unit z component) through pixel `(u, v)`.
    pub fn pixel_ray(&self, view: usize, u: usize, v: usize) -> Vec3 {
        let k = &self.intrinsics[view];
        [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0]
    }

    /// Whether a world point lands inside view `j`'s image in front of it.
    pub fn sees(&self, view: usize, p: Vec3) -> bool {
        let pc = self.extrinsics[view].world_to_camera(p);
        match project(pc, &self.intrinsics[view]) {
            Ok((u, v, _)) => {
                u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
            }
            Err(_) => false,
        }
    }

    /// A world point visible in both view `j` and view `j + 1 (mod N)`,
    /// searched along the bisector of the two optical axes.
    pub fn overlap_witness(&self, j: usize) -> Option<Vec3> {
        let next = (j + 1) % self.n_views;
        let yaw = view_yaw(j, self.n_views) + std::f64::consts::PI / self.n_views as f64;
        let (s, c) = yaw.sin_cos();
        [2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 1e3, 1e4]
            .iter()
            .map(|&r| [r * c, r * s, 0.0])
            .find(|&p| self.sees(j, p) && self.sees(next, p))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 || self.intrinsics.len() != self.n_views || self.extrinsics.len() != self.n_views {
            return Err(Error::config("rig view count disagrees with its calibration"));
        }
        for (j, p) in self.extrinsics.iter().enumerate() {
            if p.orthonormality_error() > 1e-6 {
                return Err(Error::config(format!("pose {j} is not a rigid transform")));
            }
        }
        Ok(())
    }
}
