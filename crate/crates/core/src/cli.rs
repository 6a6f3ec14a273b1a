//! `ramit` command-line interface.
//!
//! stdout carries JSON lines only; diagnostics go to stderr. Exit codes:
//! 0 success, 1 gradient check failure, 2 configuration error, 3 checkpoint
//! error, 4 image I/O error, 5 metrics error, 6 dataset error, 7 bad region.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::gradcheck::{self, CheckResult, Fault};
use crate::model::{
    attribution_map, count_mult_adds, count_params, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
    Model, ModelConfig, ModelError, Region, Task,
};
use crate::params::ParamStore;
use crate::pipeline::{
    self, load_image, pad_to_multiple, psnr, rgb_to_y, save_image, ssim, trace_csv, train_loop, write_atomic, Dataset,
    ImageBuffer, NormStats, PipelineError,
};
use crate::tensor::Tensor;

pub mod exit {
    pub const OK: i32 = 0;
    pub const GRADCHECK: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const CHECKPOINT: i32 = 3;
    pub const IMAGE: i32 = 4;
    pub const METRICS: i32 = 5;
    pub const DATASET: i32 = 6;
    pub const REGION: i32 = 7;
}

pub const THREADS_ENV: &str = "RAMIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ramit", version, about = "Train, run and inspect RAMiT image restoration models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset manifest and write a checkpoint plus a CSV loss trace.
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint.
    Restore(RestoreArgs),
    /// Print the exact parameter count and Mult-Adds of a configuration.
    Count(CountArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// PSNR and SSIM between two images.
    Metrics(MetricsArgs),
    /// Write an input-gradient attribution heatmap for an output region.
    Attribution(AttributionArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Sr2,
    Sr3,
    Sr4,
    ColorDn,
    GrayDn,
    Lle,
    Derain,
    SlimSr2,
    SlimSr4,
    SlimLle,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Sr2 => ModelConfig::sr(2),
            Preset::Sr3 => ModelConfig::sr(3),
            Preset::Sr4 => ModelConfig::sr(4),
            Preset::ColorDn => ModelConfig::for_task(Task::ColorDn),
            Preset::GrayDn => ModelConfig::for_task(Task::GrayDn),
            Preset::Lle => ModelConfig::for_task(Task::Lle),
            Preset::Derain => ModelConfig::for_task(Task::Derain),
            Preset::SlimSr2 => ModelConfig::slim_sr(2),
            Preset::SlimSr4 => ModelConfig::slim_sr(4),
            Preset::SlimLle => ModelConfig::slim_lle(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Model config JSON; defaults to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Dotted `key=value` override applied after loading, e.g. `train.epochs=5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset manifest: JSON list of {"hq_path", "lq_path"?}.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    /// Config JSON; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// High-quality output resolution.
    #[arg(long, default_value = "1280x720", value_parser = parse_resolution)]
    pub hq: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Ops,
    Model,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "ops")]
    pub scope: Scope,
    /// Random draws per op (ops scope).
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the backward rule of this op by 1.5 to exercise the failure path.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricsMode {
    Rgb,
    Y,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Reference image.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, value_enum, default_value = "rgb")]
    pub mode: MetricsMode,
}

#[derive(Debug, Args)]
pub struct AttributionArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint; without one the model is freshly initialized from --seed.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output-space rectangle `x,y,w,h`.
    #[arg(long)]
    pub region: Region,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("resolution `{s}` must be WxH"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("resolution `{s}`: {e}"));
    let (w, h) = (p(w)?, p(h)?);
    if w == 0 || h == 0 {
        return Err(format!("resolution `{s}` must be positive"));
    }
    Ok((w, h))
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

fn config_err(e: ModelError) -> Failure {
    Failure::new(exit::CONFIG, e)
}

fn ckpt_err(e: CheckpointError) -> Failure {
    Failure::new(exit::CHECKPOINT, e)
}

fn image_err(path: &Path, e: PipelineError) -> Failure {
    Failure::new(exit::IMAGE, format!("{}: {e}", path.display()))
}

fn read_config(path: &Path) -> Result<ModelConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new(exit::CONFIG, format!("{}: {e}", path.display())))?;
    ModelConfig::from_json(&text).map_err(|e| Failure::new(exit::CONFIG, format!("{}: {e}", path.display())))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ModelConfig, Failure> {
        let base = match (&self.config, self.preset) {
            (Some(p), _) => read_config(p)?,
            (None, Some(pr)) => pr.config(),
            (None, None) => ModelConfig::default(),
        };
        base.with_overrides(&self.overrides).map_err(config_err)
    }
}

pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn load_tensor(path: &Path, channels: usize) -> Result<Tensor<f32>, Failure> {
    let img = load_image(path).map_err(|e| image_err(path, e))?;
    if img.channels != channels {
        return Err(Failure::new(
            exit::IMAGE,
            format!("{}: {} channels, model expects {channels}", path.display(), img.channels),
        ));
    }
    Ok(img.to_tensor())
}

fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<(), Failure> {
    let buf = ImageBuffer::from_tensor(t).map_err(|e| image_err(path, e))?;
    save_image(&buf, path).map_err(|e| image_err(path, e))
}

/// Loads a checkpoint and the model it describes; `config` wins over the stored one.
fn load_model(ckpt: &Path, config: Option<ModelConfig>) -> Result<(Model, ParamStore<f32>, NormStats), Failure> {
    let ck = load_checkpoint(ckpt).map_err(ckpt_err)?;
    let cfg = match config.or_else(|| ck.manifest.config.clone()) {
        Some(c) => c,
        None => return Err(Failure::new(exit::CONFIG, "checkpoint stores no config; pass --config")),
    };
    let mut ps = ParamStore::new();
    let model = Model::build(&cfg, &mut ps, 0).map_err(config_err)?;
    ck.apply(&mut ps).map_err(ckpt_err)?;
    let c = cfg.task.image_channels();
    let norm = ck.manifest.norm.clone().unwrap_or_else(|| NormStats::identity(c));
    if norm.channels() != c {
        return Err(Failure::new(exit::CHECKPOINT, "checkpoint normalization does not match the task"));
    }
    Ok((model, ps, norm))
}

pub fn cmd_count(a: &CountArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve()?;
    let params = count_params(&cfg);
    let rep = count_mult_adds(&cfg, a.hq.0, a.hq.1);
    print_json(&json!({
        "task": cfg.task,
        "scale": cfg.upscale(),
        "params": params,
        "hq": [rep.hq.0, rep.hq.1],
        "lq": [rep.lq.0, rep.lq.1],
        "mult_adds": rep.total,
        "mult_adds_g": rep.total as f64 / 1e9,
        "breakdown": rep.breakdown,
    }));
    Ok(())
}

pub fn cmd_restore(a: &RestoreArgs) -> Result<(), Failure> {
    let config = match &a.config {
        Some(p) => Some(read_config(p)?.with_overrides(&a.overrides).map_err(config_err)?),
        None => None,
    };
    let (model, ps, norm) = load_model(&a.ckpt, config)?;
    let x = load_tensor(&a.input, model.config.task.image_channels())?;
    let y = pipeline::restore(&model, &ps, &norm, &x).map_err(|e| Failure::new(exit::CHECKPOINT, e))?;
    write_tensor(&a.out, &y)?;
    print_json(&json!({"out": a.out, "width": y.dim(2), "height": y.dim(1)}));
    Ok(())
}

fn report(results: &[CheckResult]) -> Result<(), Failure> {
    for r in results {
        print_json(&json!({
            "op": r.op,
            "worst_rel_error": r.worst_rel_error,
            "tolerance": r.tolerance,
            "passed": r.passed,
        }));
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(exit::GRADCHECK, format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let fault = a.corrupt.as_ref().map(|op| Fault {
        op: op.clone(),
        factor: 1.5,
    });
    let results = match a.scope {
        Scope::Ops => gradcheck::run_ops(a.seeds.max(1), fault.as_ref()).map_err(|e| Failure::new(exit::GRADCHECK, e))?,
        Scope::Model => gradcheck::run_model(&gradcheck::tiny_model_config(), 16, 2, a.seed, fault.as_ref())
            .map_err(|e| Failure::new(exit::GRADCHECK, e))?,
    };
    report(&results)
}

pub fn cmd_metrics(a: &MetricsArgs) -> Result<(), Failure> {
    let load = |p: &Path| load_image(p).map_err(|e| image_err(p, e));
    let (ia, ib) = (load(&a.input)?, load(&a.reference)?);
    if (ia.width, ia.height, ia.channels) != (ib.width, ib.height, ib.channels) {
        return Err(Failure::new(
            exit::METRICS,
            format!(
                "size mismatch: {}x{}x{} vs {}x{}x{}",
                ia.width, ia.height, ia.channels, ib.width, ib.height, ib.channels
            ),
        ));
    }
    let (ta, tb) = (ia.to_tensor::<f64>(), ib.to_tensor::<f64>());
    let metric_err = |e: PipelineError| Failure::new(exit::METRICS, e);
    let (ta, tb, peak) = match a.mode {
        MetricsMode::Rgb => (ta, tb, 1.0),
        MetricsMode::Y => (rgb_to_y(&ta).map_err(metric_err)?, rgb_to_y(&tb).map_err(metric_err)?, 255.0),
    };
    let p = psnr(&ta, &tb, peak).map_err(metric_err)?;
    let s = ssim(&ta, &tb, peak).map_err(metric_err)?;
    println!("{{\"psnr\":{},\"ssim\":{}}}", fmt_metric_text(p), fmt_metric_text(s));
    Ok(())
}

/// Four decimals, or the quoted `"inf"` sentinel.
fn fmt_metric_text(v: f64) -> String {
    if v.is_infinite() {
        "\"inf\"".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve()?;
    let data_err = |e: PipelineError| Failure::new(exit::DATASET, e);
    let data = Dataset::from_manifest(&a.data).map_err(data_err)?;
    data.check(cfg.task, cfg.upscale()).map_err(data_err)?;
    let mut ps = ParamStore::<f32>::new();
    let model = Model::build(&cfg, &mut ps, a.seed).map_err(config_err)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| a.ckpt.with_extension("csv"));
    let ckpt_path = a.ckpt.clone();
    let report = train_loop(&model, &mut ps, &data, &cfg.train, a.seed, threads_from_env(), |step, ps, norm| {
        let ck = Checkpoint::from_store(ps, Some(&cfg), Some(norm));
        save_checkpoint(&ckpt_path, &ck)?;
        eprintln!("checkpoint at step {step}: {}", ckpt_path.display());
        Ok(())
    })
    .map_err(|e| match e {
        PipelineError::Checkpoint(c) => ckpt_err(c),
        PipelineError::Model(m) => config_err(m),
        other => data_err(other),
    })?;
    write_atomic(&trace_path, trace_csv(&report.trace).as_bytes())
        .map_err(|e| Failure::new(exit::DATASET, format!("{}: {e}", trace_path.display())))?;
    let first = report.trace.first().map(|r| r.loss);
    let last = report.trace.last().map(|r| r.loss);
    print_json(&json!({
        "steps": report.trace.len(),
        "initial_loss": first,
        "final_loss": last,
        "ckpt": a.ckpt,
        "trace": trace_path,
    }));
    Ok(())
}

pub fn cmd_attribution(a: &AttributionArgs) -> Result<(), Failure> {
    let (model, ps, norm) = match &a.ckpt {
        Some(p) => {
            let cfg = if a.cfg.config.is_some() || a.cfg.preset.is_some() || !a.cfg.overrides.is_empty() {
                Some(a.cfg.resolve()?)
            } else {
                None
            };
            load_model(p, cfg)?
        }
        None => {
            let cfg = a.cfg.resolve()?;
            let mut ps = ParamStore::new();
            let model = Model::build(&cfg, &mut ps, a.seed).map_err(config_err)?;
            let c = cfg.task.image_channels();
            (model, ps, NormStats::identity(c))
        }
    };
    let x = load_tensor(&a.input, model.config.task.image_channels())?;
    let (h, w) = (x.dim(1), x.dim(2));
    let r = model.config.upscale();
    let reg = a.region;
    if reg.w == 0 || reg.h == 0 || reg.x + reg.w > w * r || reg.y + reg.h > h * r {
        return Err(Failure::new(
            exit::REGION,
            format!("region {reg} outside the {}x{} output", w * r, h * r),
        ));
    }
    let (padded, _) = pad_to_multiple(&x, pipeline::restore_multiple(&model));
    let map = attribution_map(&model, &ps, &norm.normalize(&padded), reg).map_err(|e| match e {
        ModelError::RegionOutOfBounds { .. } => Failure::new(exit::REGION, e),
        other => Failure::new(exit::CONFIG, other),
    })?;
    let pw = map.dim(1);
    let heat = Tensor::<f32>::from_fn([1, h, w], |i| map.data()[(i / w) * pw + i % w]);
    let peak = heat.data().iter().cloned().fold(0.0f32, f32::max);
    let heat = if peak > 0.0 { heat.scale(1.0 / peak) } else { heat };
    write_tensor(&a.out, &heat)?;
    let support = heat.data().iter().filter(|&&v| v > 0.0).count();
    print_json(&json!({"out": a.out, "region": reg.to_string(), "support_pixels": support}));
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Restore(a) => cmd_restore(a),
        Command::Count(a) => cmd_count(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Attribution(a) => cmd_attribution(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_parsing() {
        assert_eq!(parse_resolution("1280x720"), Ok((1280, 720)));
        assert!(parse_resolution("1280").is_err());
        assert!(parse_resolution("0x5").is_err());
    }

    #[test]
    fn unknown_flags_are_errors() {
        assert_eq!(run(["ramit", "count", "--bogus"]), exit::CONFIG);
        assert_eq!(run(["ramit", "frobnicate"]), exit::CONFIG);
    }

    #[test]
    fn metric_formatting() {
        assert_eq!(fmt_metric_text(f64::INFINITY), "\"inf\"");
        assert_eq!(fmt_metric_text(20.0), "20.0000");
        assert_eq!(fmt_metric_text(0.123456), "0.1235");
    }
}
