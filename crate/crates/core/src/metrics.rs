//! Standard depth evaluation: absolute and squared relative error, RMSE,
//! log RMSE and threshold accuracies, with optional per-frame median
//! scaling and range clamping.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_D_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

impl MetricsReport {
    pub fn is_empty(&self) -> bool {
        self.n_pixels == 0
    }

    /// The seven metric values in table order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }
}

pub const METRIC_NAMES: [&str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub d_min: f64,
    pub d_max: f64,
    pub median_scaling: bool,
}

impl EvalOptions {
    pub fn new(d_max: f64) -> Self {
        EvalOptions {
            d_min: DEFAULT_D_MIN,
            d_max,
            median_scaling: false,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics of one frame. Pixels count when `gt` lies in `(d_min, d_max]`;
/// an empty valid set yields a report with `n_pixels == 0` and zeros.
pub fn compute_metrics(pred: &[f64], gt: &[f64], opts: &EvalOptions) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "metrics: {} predictions for {} ground-truth pixels",
            pred.len(),
            gt.len()
        )));
    }
    if !(opts.d_min > 0.0 && opts.d_max > opts.d_min) {
        return Err(Error::config(format!(
            "metrics need 0 < d_min < d_max, got {} and {}",
            opts.d_min, opts.d_max
        )));
    }
    let (mut p, g): (Vec<f64>, Vec<f64>) = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g > opts.d_min && g <= opts.d_max)
        .map(|(&p, &g)| (p, g))
        .unzip();
    if g.is_empty() {
        return Ok(MetricsReport::default());
    }
    if opts.median_scaling {
        let mp = median(&mut p.clone());
        let mg = median(&mut g.clone());
        if mp > 0.0 {
            let s = mg / mp;
            p.iter_mut().for_each(|v| *v *= s);
        }
    }
    for v in p.iter_mut() {
        *v = v.clamp(opts.d_min, opts.d_max);
    }
    let n = g.len() as f64;
    let mut r = MetricsReport {
        n_pixels: g.len(),
        ..Default::default()
    };
    let (mut se, mut sle) = (0.0, 0.0);
    for (&p, &g) in p.iter().zip(&g) {
        let d = p - g;
        r.abs_rel += d.abs() / g;
        r.sq_rel += d * d / g;
        se += d * d;
        let l = p.ln() - g.ln();
        sle += l * l;
        let ratio = (p / g).max(g / p);
        r.delta1 += f64::from(u8::from(ratio < 1.25));
        r.delta2 += f64::from(u8::from(ratio < 1.25f64.powi(2)));
        r.delta3 += f64::from(u8::from(ratio < 1.25f64.powi(3)));
    }
    r.abs_rel /= n;
    r.sq_rel /= n;
    r.rmse = (se / n).sqrt();
    r.rmse_log = (sle / n).sqrt();
    r.delta1 /= n;
    r.delta2 /= n;
    r.delta3 /= n;
    Ok(r)
}

/// Unweighted mean over frames that have valid pixels; `n_pixels` is the
/// total over those frames.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let used: Vec<&MetricsReport> = reports.iter().filter(|r| !r.is_empty()).collect();
    if used.is_empty() {
        return Err(Error::Aggregation(format!(
            "none of {} frames has a valid ground-truth pixel",
            reports.len()
        )));
    }
    let k = used.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| used.iter().map(|r| f(r)).sum::<f64>() / k;
    Ok(MetricsReport {
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        n_pixels: used.iter().map(|r| r.n_pixels).sum(),
    })
}

/// Evaluation output: per-view aggregates over all frames of that camera,
/// and the overall aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub n_frames: usize,
    pub per_view: Vec<Option<MetricsReport>>,
    pub aggregate: MetricsReport,
}

impl EvalReport {
    /// Builds the report from `frames[sample][view]`.
    pub fn from_frames(frames: &[Vec<MetricsReport>], options: EvalOptions) -> Result<Self> {
        let n_views = frames.first().map_or(0, Vec::len);
        let per_view = (0..n_views)
            .map(|j| {
                let col: Vec<MetricsReport> = frames.iter().filter_map(|f| f.get(j).copied()).collect();
                aggregate(&col).ok()
            })
            .collect();
        let all: Vec<MetricsReport> = frames.iter().flatten().copied().collect();
        Ok(EvalReport {
            options,
            n_frames: all.len(),
            per_view,
            aggregate: aggregate(&all).unwrap_or_default(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one row per view plus the aggregate.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "view");
        for name in METRIC_NAMES {
            let _ = write!(s, " {name:>9}");
        }
        let _ = writeln!(s, " {:>9}", "pixels");
        let mut row = |label: &str, r: Option<&MetricsReport>| {
            let _ = write!(s, "{label:<8}");
            match r {
                Some(r) => {
                    for v in r.values() {
                        let _ = write!(s, " {v:>9.4}");
                    }
                    let _ = writeln!(s, " {:>9}", r.n_pixels);
                }
                None => {
                    for _ in METRIC_NAMES {
                        let _ = write!(s, " {:>9}", "-");
                    }
                    let _ = writeln!(s, " {:>9}", 0);
                }
            }
        };
        for (j, r) in self.per_view.iter().enumerate() {
            row(&format!("cam{j}"), r.as_ref());
        }
        row("all", Some(&self.aggregate));
        s
    }
}
