//! Training loop, evaluation and prediction export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::{compute_metrics, EvalOptions, EvalReport, MetricsReport};
use crate::model::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::model::{forward, init_params, predict, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scenegen::{Dataset, SurroundSample};
use crate::tensor::{write_tensor, Tensor};

pub const LOG_FILE: &str = "loss.csv";
pub const LOG_HEADER: &str = "step,l_depth,l_smooth,total";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Surround,
    RandomViews,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    #[default]
    On,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub input_mode: InputMode,
    pub adjacent_attention: Switch,
}

/// Which depth map the loss is fitted to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    Sparse,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_smooth: f64,
    pub model: ModelConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub ablation: Ablation,
    pub supervision: Supervision,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 10,
            batch_size: 2,
            lr: 1e-4,
            lambda_smooth: 0.01,
            model: ModelConfig::default(),
            data_dir: None,
            out_dir: None,
            ablation: Ablation::default(),
            supervision: Supervision::Sparse,
            max_steps: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        self.loss_config().validate()?;
        self.effective_model().validate()
    }

    /// Model configuration after applying the ablation switches.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablation.adjacent_attention == Switch::Off {
            m.use_adjacent_attention = false;
        }
        m
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_smooth: self.lambda_smooth,
            ..LossConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_depth: f64,
    pub l_smooth: f64,
    pub total: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.l_depth, r.l_smooth, r.total));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub model: ModelConfig,
    pub log: Vec<LogRow>,
    pub steps: usize,
}

fn check_dataset(ds: &Dataset, model: &ModelConfig) -> Result<()> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::config("dataset has no samples"))?;
    if first.rig.n_views != model.n_views {
        return Err(Error::config(format!(
            "dataset has {} views per sample but the model expects {}",
            first.rig.n_views, model.n_views
        )));
    }
    let c = first.images.shape()[1];
    if c != model.in_channels {
        return Err(Error::config(format!(
            "dataset images have {c} channels but the model expects {}",
            model.in_channels
        )));
    }
    Ok(())
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    sample: &SurroundSample,
    loss_cfg: &LossConfig,
    supervision: Supervision,
) -> Result<(ParamStore<f32>, LogRow)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fw = forward(&mut tape, &sample.images, &bound, model)?;
    let target = match supervision {
        Supervision::Sparse => &sample.sparse_depth,
        Supervision::Dense => &sample.gt_depth,
    };
    let lb = total_loss(&mut tape, &fw.depth, target, &sample.images, loss_cfg)?;
    tape.backward(lb.total)?;
    let grads = params.gradients(&tape, &bound)?;
    Ok((
        grads,
        LogRow {
            step: 0,
            l_depth: lb.l_depth,
            l_smooth: lb.l_smooth,
            total: lb.l_total,
        },
    ))
}

fn random_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Runs the optimization described by `cfg` on `data`. When `cfg.out_dir` is
/// set, writes a checkpoint per epoch, the final checkpoint and the CSV log.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut model = cfg.effective_model();
    model.d_max = data.d_max;
    cfg.validate()?;
    model.validate()?;
    check_dataset(data, &model)?;
    let loss_cfg = cfg.loss_config();
    let mut params = init_params::<f32>(&model, cfg.seed)?;
    let mut adam = Adam::new(
        &params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = Vec::new();
    let mut view_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_u64.rotate_left(32));
    let n = data.samples.len();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let order = random_order(n, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if log.len() >= max_steps {
                break 'epochs;
            }
            let views = match cfg.ablation.input_mode {
                InputMode::Surround => None,
                InputMode::RandomViews => Some(random_order(model.n_views, &mut view_rng)),
            };
            let mut acc: Option<ParamStore<f32>> = None;
            let mut row = LogRow {
                step: log.len() + 1,
                l_depth: 0.0,
                l_smooth: 0.0,
                total: 0.0,
            };
            for &i in batch {
                let permuted;
                let sample = match &views {
                    Some(order) => {
                        permuted = data.samples[i].permute_views(order)?;
                        &permuted
                    }
                    None => &data.samples[i],
                };
                let (g, r) = sample_gradients(&params, &model, sample, &loss_cfg, cfg.supervision)?;
                row.l_depth += r.l_depth;
                row.l_smooth += r.l_smooth;
                row.total += r.total;
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        for (name, t) in a.iter_mut() {
                            let gt = g.get(name).expect("same parameter set");
                            for (x, y) in t.data_mut().iter_mut().zip(gt.data()) {
                                *x += *y;
                            }
                        }
                        a
                    }
                });
            }
            let b = batch.len() as f64;
            let mut grads = acc.expect("batches are non-empty");
            if batch.len() > 1 {
                let inv = (1.0 / b) as f32;
                for (_, t) in grads.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
            adam.step(&mut params, &grads)?;
            row.l_depth /= b;
            row.l_smooth /= b;
            row.total /= b;
            log::debug!("step {} total {:.5}", row.step, row.total);
            log.push(row);
        }
        if let Some(dir) = &cfg.out_dir {
            let meta = CheckpointMeta {
                model: model.clone(),
                step: adam.step,
                epoch: epoch + 1,
            };
            save_checkpoint(&dir.join(format!("epoch_{:03}.ckpt", epoch + 1)), &params, &meta)?;
        }
    }
    if let Some(dir) = &cfg.out_dir {
        let meta = CheckpointMeta {
            model: model.clone(),
            step: adam.step,
            epoch: cfg.epochs,
        };
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &params, &meta)?;
        fs::write(dir.join(LOG_FILE), log_csv(&log))?;
    }
    Ok(TrainOutcome {
        steps: log.len(),
        params,
        model,
        log,
    })
}

/// Metrics of the finest-scale prediction against dense ground truth, one
/// frame per camera image.
pub fn evaluate(params: &ParamStore<f32>, model: &ModelConfig, data: &Dataset, median_scaling: bool) -> Result<EvalReport> {
    check_dataset(data, model)?;
    let opts = EvalOptions {
        median_scaling,
        ..EvalOptions::new(data.d_max)
    };
    let mut frames: Vec<Vec<MetricsReport>> = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let depth = predict(params, &s.images, model)?.swap_remove(0);
        let per = depth.numel() / model.n_views;
        let reports = (0..model.n_views)
            .map(|j| {
                let p: Vec<f64> = depth.data()[j * per..(j + 1) * per].iter().map(|&v| v as f64).collect();
                let g: Vec<f64> = s.gt_depth.data()[j * per..(j + 1) * per].iter().map(|&v| v as f64).collect();
                compute_metrics(&p, &g, &opts)
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(reports);
    }
    EvalReport::from_frames(&frames, opts)
}

/// 16-bit binary graymap of a `[H, W]` depth map: `round(depth / d_max * 65535)`.
pub fn pgm16_bytes(depth: &[f32], width: usize, height: usize, d_max: f64) -> Result<Vec<u8>> {
    if depth.len() != width * height {
        return Err(Error::dim(format!(
            "{} depth values for a {width}x{height} preview",
            depth.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &d in depth {
        let v = (d as f64 / d_max * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

/// Writes `view{j}.rdt` and `view{j}.pgm` for every view of every sample
/// under `out/sample_{i}/`. Returns the written paths.
pub fn export_predictions(params: &ParamStore<f32>, model: &ModelConfig, data: &Dataset, out: &Path) -> Result<Vec<PathBuf>> {
    check_dataset(data, model)?;
    let mut written = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let dir = out.join(format!("sample_{i:05}"));
        fs::create_dir_all(&dir)?;
        let depth = predict(params, &s.images, model)?.swap_remove(0);
        let (n, h, w) = (depth.shape()[0], depth.shape()[1], depth.shape()[2]);
        for j in 0..n {
            let view = depth.index_axis0(j)?;
            let rdt = dir.join(format!("view{j}.rdt"));
            write_tensor(&view, &rdt)?;
            let pgm = dir.join(format!("view{j}.pgm"));
            let mut f = fs::File::create(&pgm)?;
            f.write_all(&pgm16_bytes(view.data(), w, h, model.d_max)?)?;
            written.push(rdt);
            written.push(pgm);
        }
    }
    Ok(written)
}

/// Reads a depth map back from a prediction file, for tooling and tests.
pub fn read_prediction(path: &Path) -> Result<Tensor<f32>> {
    crate::tensor::read_tensor(path)
}
