use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use surround_depth::model::checkpoint::load_checkpoint;
use surround_depth::model::gradsuite::run_suite;
use surround_depth::scenegen::{self, read_dataset, write_dataset, GenConfig};
use surround_depth::train::{evaluate, export_predictions, train, InputMode, RunConfig, Switch};

#[derive(Parser)]
#[command(name = "surround-depth", version, about = "Surround-view depth estimation on synthetic camera rings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic surround-view dataset
    GenData(GenArgs),
    /// Train a model from a JSON run config
    Train(TrainArgs),
    /// Evaluate a checkpoint against dense ground truth
    Eval(EvalArgs),
    /// Finite-difference check of the 64-bit micro model
    Gradcheck(GradArgs),
    /// Write per-view depth maps and 16-bit previews
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = scenegen::DEFAULT_VIEWS)]
    views: usize,
    #[arg(long, default_value_t = scenegen::DEFAULT_WIDTH)]
    width: usize,
    #[arg(long, default_value_t = scenegen::DEFAULT_HEIGHT)]
    height: usize,
    /// Horizontal field of view in degrees
    #[arg(long, default_value_t = scenegen::DEFAULT_HFOV_DEG)]
    hfov: f64,
    /// Maximum depth in meters
    #[arg(long, default_value_t = scenegen::DEFAULT_D_MAX)]
    dmax: f64,
    /// Fraction of valid pixels kept in the sparse supervision map
    #[arg(long, default_value_t = scenegen::DEFAULT_KEEP_FRACTION)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and the loss log (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Turn adjacent-view attention off
    #[arg(long)]
    ablate_adjacent: bool,
    /// Shuffle view order per batch
    #[arg(long)]
    random_views: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Rescale each frame by the ratio of medians before scoring
    #[arg(long)]
    median_scaling: bool,
    /// Write the JSON report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb at most this many entries per tensor (all when omitted)
    #[arg(long)]
    entries: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn gen_data(a: GenArgs) -> Result<()> {
    let cfg = GenConfig {
        n_scenes: a.scenes,
        n_views: a.views,
        width: a.width,
        height: a.height,
        hfov_deg: a.hfov,
        d_max: a.dmax,
        keep_fraction: a.sparsity,
        seed: a.seed,
    };
    let ds = scenegen::generate(&cfg)?;
    write_dataset(&ds, &a.out)?;
    println!("wrote {} samples to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = a.data {
        cfg.data_dir = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out_dir = Some(o);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.ablate_adjacent {
        cfg.ablation.adjacent_attention = Switch::Off;
    }
    if a.random_views {
        cfg.ablation.input_mode = InputMode::RandomViews;
    }
    let Some(data_dir) = cfg.data_dir.clone() else {
        bail!("no dataset: pass --data or set data_dir in the config");
    };
    if cfg.out_dir.is_none() {
        bail!("no output directory: pass --out or set out_dir in the config");
    }
    let data = read_dataset(&data_dir)?;
    let outcome = train(&cfg, &data)?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
    println!("trained {} steps, final loss {last:.6}", outcome.steps);
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<bool> {
    let ck = load_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let report = evaluate(&ck.params, &ck.meta.model, &data, a.median_scaling)?;
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", report.to_table());
    if report.aggregate.is_empty() {
        eprintln!("error: no frame has a valid ground-truth pixel");
        return Ok(false);
    }
    Ok(true)
}

fn run_gradcheck(a: GradArgs) -> Result<bool> {
    let entries = run_suite(a.seed, a.entries)?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        println!("{:<16} max rel error {:.3e}", e.name, e.report.max_rel_error);
        worst = worst.max(e.report.max_rel_error);
    }
    let passed = entries.iter().all(|e| e.report.passed);
    println!("max rel error {worst:.3e} ({})", if passed { "pass" } else { "FAIL" });
    Ok(passed)
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let written = export_predictions(&ck.params, &ck.meta.model, &data, &a.out)?;
    println!("wrote {} files under {}", written.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|()| true),
        Command::Train(a) => run_train(a).map(|()| true),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Predict(a) => run_predict(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
