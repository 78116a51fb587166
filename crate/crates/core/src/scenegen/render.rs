//! Analytic scenes, closed-form ray casting and LiDAR-style sparsification.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{dot, normalize, sub, CameraRig, Vec3};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: f64,
}

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AaBox {
    pub min: Vec3,
    pub max: Vec3,
    pub albedo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// World `z` of the ground plane; `None` for no ground.
    pub ground_plane: Option<f64>,
    pub ground_albedo: f64,
    pub spheres: Vec<Sphere>,
    pub boxes: Vec<AaBox>,
    /// Unit vector pointing towards the directional light.
    pub light_dir: Vec3,
    pub seed: u64,
}

pub const AMBIENT: f64 = 0.25;
/// Rays must travel at least this far to register a hit.
const T_MIN: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub world_radius: f64,
    pub camera_height: f64,
    pub n_spheres: std::ops::RangeInclusive<usize>,
    pub n_boxes: std::ops::RangeInclusive<usize>,
    /// Objects keep at least this distance from the rig axis.
    pub min_distance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            world_radius: 40.0,
            camera_height: 1.5,
            n_spheres: 4..=8,
            n_boxes: 3..=6,
            min_distance: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hit {
    /// Ray parameter `t` (equal to z-depth for unit-z camera rays) and the surface normal.
    Surface { t: f64, normal: Vec3, albedo: f64 },
    Miss,
}

impl Hit {
    fn closer(self, other: Hit) -> Hit {
        match (self, other) {
            (Hit::Miss, h) | (h, Hit::Miss) => h,
            (Hit::Surface { t: a, .. }, Hit::Surface { t: b, .. }) => {
                if b < a {
                    other
                } else {
                    self
                }
            }
        }
    }
}

pub fn intersect_sphere(o: Vec3, d: Vec3, s: &Sphere) -> Hit {
    let oc = sub(o, s.center);
    let a = dot(d, d);
    let b = 2.0 * dot(d, oc);
    let c = dot(oc, oc) - s.radius * s.radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Hit::Miss;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    let t = if t0 > T_MIN {
        t0
    } else if t1 > T_MIN {
        t1
    } else {
        return Hit::Miss;
    };
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    Hit::Surface {
        t,
        normal: normalize(sub(p, s.center)),
        albedo: s.albedo,
    }
}

pub fn intersect_plane(o: Vec3, d: Vec3, height: f64, albedo: f64) -> Hit {
    if d[2] == 0.0 {
        return Hit::Miss;
    }
    let t = (height - o[2]) / d[2];
    if t > T_MIN {
        let up = if o[2] > height { 1.0 } else { -1.0 };
        Hit::Surface {
            t,
            normal: [0.0, 0.0, up],
            albedo,
        }
    } else {
        Hit::Miss
    }
}

/// Slab test.
pub fn intersect_box(o: Vec3, d: Vec3, b: &AaBox) -> Hit {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for ax in 0..3 {
        if d[ax] == 0.0 {
            if o[ax] < b.min[ax] || o[ax] > b.max[ax] {
                return Hit::Miss;
            }
            continue;
        }
        let t1 = (b.min[ax] - o[ax]) / d[ax];
        let t2 = (b.max[ax] - o[ax]) / d[ax];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            near_axis = ax;
        }
        if hi < t_far {
            t_far = hi;
            far_axis = ax;
        }
    }
    if t_near > t_far {
        return Hit::Miss;
    }
    let (t, ax, outward) = if t_near > T_MIN {
        (t_near, near_axis, -1.0)
    } else if t_far > T_MIN {
        (t_far, far_axis, 1.0)
    } else {
        return Hit::Miss;
    };
    let mut normal = [0.0; 3];
    normal[ax] = outward * d[ax].signum();
    Hit::Surface {
        t,
        normal,
        albedo: b.albedo,
    }
}

impl Scene {
    pub fn empty() -> Self {
        Scene {
            ground_plane: None,
            ground_albedo: 0.5,
            spheres: Vec::new(),
            boxes: Vec::new(),
            light_dir: normalize([0.3, 0.2, 1.0]),
            seed: 0,
        }
    }

    /// Random spheres and ground-standing boxes around the rig.
    pub fn random(seed: u64, cfg: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ground = -cfg.camera_height;
        let mut scene = Scene {
            ground_plane: Some(ground),
            ground_albedo: 0.5,
            spheres: Vec::new(),
            boxes: Vec::new(),
            light_dir: normalize([rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), 1.0]),
            seed,
        };
        let place = |rng: &mut ChaCha8Rng, extent: f64| {
            let r = rng.gen_range(cfg.min_distance + extent..cfg.world_radius - extent);
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            (r * a.cos(), r * a.sin())
        };
        for _ in 0..rng.gen_range(cfg.n_spheres.clone()) {
            let radius = rng.gen_range(0.5..3.0);
            let (x, y) = place(&mut rng, radius);
            let lift = rng.gen_range(0.0..2.0);
            scene.spheres.push(Sphere {
                center: [x, y, ground + radius + lift],
                radius,
                albedo: rng.gen_range(0.3..1.0),
            });
        }
        for _ in 0..rng.gen_range(cfg.n_boxes.clone()) {
            let hx: f64 = rng.gen_range(0.5..2.5);
            let hy = rng.gen_range(0.5..2.5);
            let h = rng.gen_range(1.0..4.0);
            let (x, y) = place(&mut rng, hx.max(hy) * std::f64::consts::SQRT_2);
            scene.boxes.push(AaBox {
                min: [x - hx, y - hy, ground],
                max: [x + hx, y + hy, ground + h],
                albedo: rng.gen_range(0.3..1.0),
            });
        }
        scene
    }

    /// Nearest intersection along `o + t d`.
    pub fn trace(&self, o: Vec3, d: Vec3) -> Hit {
        let mut best = match self.ground_plane {
            Some(h) => intersect_plane(o, d, h, self.ground_albedo),
            None => Hit::Miss,
        };
        for s in &self.spheres {
            best = best.closer(intersect_sphere(o, d, s));
        }
        for b in &self.boxes {
            best = best.closer(intersect_box(o, d, b));
        }
        best
    }

    pub fn shade(&self, normal: Vec3, albedo: f64) -> f64 {
        albedo * (AMBIENT + (1.0 - AMBIENT) * dot(normal, self.light_dir).max(0.0))
    }

    /// Rotates the whole scene (objects and light) about the world `z` axis.
    /// Boxes stay axis-aligned, so only multiples of 90 degrees keep them exact.
    pub fn rotated_about_z(&self, angle: f64) -> Scene {
        let (s, c) = angle.sin_cos();
        let rot = |p: Vec3| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
        let mut out = self.clone();
        for sp in &mut out.spheres {
            sp.center = rot(sp.center);
        }
        for b in &mut out.boxes {
            let (p, q) = (rot(b.min), rot(b.max));
            b.min = [p[0].min(q[0]), p[1].min(q[1]), p[2]];
            b.max = [p[0].max(q[0]), p[1].max(q[1]), q[2]];
        }
        out.light_dir = rot(self.light_dir);
        out
    }
}

/// One multi-view frame: images, dense depth, sparse depth and calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct SurroundSample {
    /// `[N, 1, H, W]` intensities in `[0, 1]`.
    pub images: Tensor<f32>,
    /// `[N, H, W]` z-depth in metres, 0 where there is no return.
    pub gt_depth: Tensor<f32>,
    /// `[N, H, W]`, a subset of `gt_depth`'s valid pixels.
    pub sparse_depth: Tensor<f32>,
    pub rig: CameraRig,
}

/// Ray-casts every pixel of every view. Depths beyond `d_max` become 0.
pub fn render(rig: &CameraRig, scene: &Scene, d_max: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    rig.validate()?;
    let (n, h, w) = (rig.n_views, rig.height, rig.width);
    let mut img = vec![0f32; n * h * w];
    let mut depth = vec![0f32; n * h * w];
    for j in 0..n {
        let pose = &rig.extrinsics[j];
        let o = pose.translation();
        for v in 0..h {
            for u in 0..w {
                let d = pose.rotate(rig.pixel_ray(j, u, v));
                let idx = (j * h + v) * w + u;
                if let Hit::Surface { t, normal, albedo } = scene.trace(o, d) {
                    img[idx] = scene.shade(normal, albedo) as f32;
                    if t <= d_max {
                        depth[idx] = t as f32;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![n, 1, h, w], img)?,
        Tensor::new(vec![n, h, w], depth)?,
    ))
}

/// Keeps exactly `floor(keep_fraction * n_valid)` uniformly chosen valid pixels.
pub fn sparsify(gt: &Tensor<f32>, keep_fraction: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config(format!("keep_fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let valid: Vec<usize> = gt
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(i, _)| i)
        .collect();
    let keep = ((keep_fraction * valid.len() as f64) + 1e-9).floor() as usize;
    let keep = keep.min(valid.len());
    let mut out = Tensor::zeros(gt.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in sample(&mut rng, valid.len(), keep).iter() {
        let i = valid[k];
        out.data_mut()[i] = gt.data()[i];
    }
    Ok(out)
}

pub fn render_sample(rig: &CameraRig, scene: &Scene, d_max: f64, keep_fraction: f64, seed: u64) -> Result<SurroundSample> {
    let (images, gt_depth) = render(rig, scene, d_max)?;
    let sparse_depth = sparsify(&gt_depth, keep_fraction, seed)?;
    Ok(SurroundSample {
        images,
        gt_depth,
        sparse_depth,
        rig: rig.clone(),
    })
}

impl SurroundSample {
    /// Reorders views: output view `i` is input view `order[i]`.
    pub fn permute_views(&self, order: &[usize]) -> Result<SurroundSample> {
        let mut rig = self.rig.clone();
        rig.intrinsics = order.iter().map(|&o| self.rig.intrinsics[o]).collect();
        rig.extrinsics = order.iter().map(|&o| self.rig.extrinsics[o]).collect();
        Ok(SurroundSample {
            images: self.images.gather_axis0(order)?,
            gt_depth: self.gt_depth.gather_axis0(order)?,
            sparse_depth: self.sparse_depth.gather_axis0(order)?,
            rig,
        })
    }
}
