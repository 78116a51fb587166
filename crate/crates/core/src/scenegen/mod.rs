//! Synthetic surround-view data: camera rings, analytic scenes, ray-cast
//! depth and intensity, sparse LiDAR-like supervision and the dataset format.

pub mod camera;
pub mod dataset;
pub mod render;

pub use camera::{make_rig, project, unproject, CameraRig, Intrinsics, Pose};
pub use dataset::{read_dataset, write_dataset, Dataset};
pub use render::{render, render_sample, sparsify, AaBox, Scene, SceneConfig, Sphere, SurroundSample};

/// Desk-scale defaults: six cameras, 70 degree field of view, 64x48 pixels.
pub const DEFAULT_VIEWS: usize = 6;
pub const DEFAULT_HFOV_DEG: f64 = 70.0;
pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_HEIGHT: usize = 48;
pub const DEFAULT_D_MAX: f64 = 80.0;
pub const DEFAULT_RIG_RADIUS_M: f64 = 1.0;

/// Keep fraction of valid depth pixels in the sparse supervision map.
pub const DEFAULT_KEEP_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_scenes: usize,
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub d_max: f64,
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_scenes: 8,
            n_views: DEFAULT_VIEWS,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            hfov_deg: DEFAULT_HFOV_DEG,
            d_max: DEFAULT_D_MAX,
            keep_fraction: DEFAULT_KEEP_FRACTION,
            seed: 0,
        }
    }
}

/// Scene `i` uses seed `seed + i`, so datasets with the same seed share a prefix.
pub fn generate(cfg: &GenConfig) -> crate::Result<Dataset> {
    if !(cfg.d_max > 0.0 && cfg.d_max.is_finite()) {
        return Err(crate::Error::config(format!("d_max must be positive, got {}", cfg.d_max)));
    }
    let rig = make_rig(cfg.n_views, cfg.hfov_deg, cfg.width, cfg.height, DEFAULT_RIG_RADIUS_M)?;
    let scene_cfg = SceneConfig::default();
    let samples = (0..cfg.n_scenes)
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i as u64);
            render_sample(&rig, &Scene::random(seed, &scene_cfg), cfg.d_max, cfg.keep_fraction, seed)
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(Dataset { d_max: cfg.d_max, samples })
}
