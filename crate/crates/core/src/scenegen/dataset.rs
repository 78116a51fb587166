//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/sample_00000/{images.rdt, gt_depth.rdt, sparse_depth.rdt}
//! ...
//! ```
//!
//! The manifest is UTF-8 `key=value` lines holding the shared rig
//! (`n_views`, `width`, `height`, `hfov_deg`, `d_max`, `pose_<j>` as 16
//! floats) and the sample count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::camera::{intrinsics_from_hfov, CameraRig, Pose};
use super::render::SurroundSample;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT_TAG: &str = "surround-depth-dataset-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_max: f64,
    pub samples: Vec<SurroundSample>,
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:05}"))
}

fn manifest_text(rig: &CameraRig, d_max: f64, n_samples: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format={FORMAT_TAG}");
    let _ = writeln!(s, "n_samples={n_samples}");
    let _ = writeln!(s, "n_views={}", rig.n_views);
    let _ = writeln!(s, "width={}", rig.width);
    let _ = writeln!(s, "height={}", rig.height);
    let _ = writeln!(s, "hfov_deg={}", rig.hfov_deg);
    let _ = writeln!(s, "rig_radius_m={}", rig.rig_radius_m);
    let _ = writeln!(s, "d_max={d_max}");
    for (j, p) in rig.extrinsics.iter().enumerate() {
        let vals: Vec<String> = p.flat().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "pose_{j}={}", vals.join(" "));
    }
    s
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::config("refusing to write an empty dataset"))?;
    if ds.samples.iter().any(|s| s.rig != first.rig) {
        return Err(Error::config("all samples in a dataset must share one rig"));
    }
    fs::create_dir_all(dir)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let sd = sample_dir(dir, i);
        fs::create_dir_all(&sd)?;
        write_tensor(&s.images, &sd.join("images.rdt"))?;
        write_tensor(&s.gt_depth, &sd.join("gt_depth.rdt"))?;
        write_tensor(&s.sparse_depth, &sd.join("sparse_depth.rdt"))?;
    }
    fs::write(dir.join(MANIFEST), manifest_text(&first.rig, ds.d_max, ds.samples.len()))?;
    Ok(())
}

struct Manifest {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn load(path: PathBuf) -> Result<Self> {
        let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, format!("cannot read manifest: {e}")))?;
        let mut entries = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&path, format!("line {}: expected key=value", ln + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest { path, entries })
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(&self.path, format!("missing key `{key}`")))
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::format(&self.path, format!("cannot parse `{key}` value `{raw}`")))
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = Manifest::load(dir.join(MANIFEST))?;
    if m.raw("format")? != FORMAT_TAG {
        return Err(Error::format(&m.path, format!("unknown format `{}`", m.raw("format")?)));
    }
    let n_samples: usize = m.parse("n_samples")?;
    let n_views: usize = m.parse("n_views")?;
    let width: usize = m.parse("width")?;
    let height: usize = m.parse("height")?;
    let hfov_deg: f64 = m.parse("hfov_deg")?;
    let rig_radius_m: f64 = m.parse("rig_radius_m")?;
    let d_max: f64 = m.parse("d_max")?;
    let mut extrinsics = Vec::with_capacity(n_views);
    for j in 0..n_views {
        let key = format!("pose_{j}");
        let vals: Vec<f64> = m
            .raw(&key)?
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&m.path, format!("non-numeric value in `{key}`")))?;
        extrinsics.push(Pose::from_flat(&vals).map_err(|e| Error::format(&m.path, format!("`{key}`: {e}")))?);
    }
    let rig = CameraRig {
        n_views,
        width,
        height,
        hfov_deg,
        rig_radius_m,
        intrinsics: vec![intrinsics_from_hfov(width, height, hfov_deg); n_views],
        extrinsics,
    };
    rig.validate().map_err(|e| Error::format(&m.path, e.to_string()))?;

    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sd = sample_dir(dir, i);
        let images = read_tensor::<f32>(&sd.join("images.rdt"))?;
        let gt_depth = read_tensor::<f32>(&sd.join("gt_depth.rdt"))?;
        let sparse_depth = read_tensor::<f32>(&sd.join("sparse_depth.rdt"))?;
        let depth_shape = [n_views, height, width];
        let checks = [
            ("images.rdt", images.shape().len() == 4 && images.shape()[0] == n_views && images.shape()[2..] == [height, width]),
            ("gt_depth.rdt", gt_depth.shape() == depth_shape),
            ("sparse_depth.rdt", sparse_depth.shape() == depth_shape),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::format(
                    sd.join(name),
                    format!("tensor extents disagree with manifest (n_views={n_views}, {height}x{width})"),
                ));
            }
        }
        samples.push(SurroundSample {
            images,
            gt_depth,
            sparse_depth,
            rig: rig.clone(),
        });
    }
    Ok(Dataset { d_max, samples })
}
