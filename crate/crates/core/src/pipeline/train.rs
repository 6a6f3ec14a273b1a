//! Learning-rate schedule, datasets and the deterministic training loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::model::{Model, Task};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{augment, awgn_degrade, box_downsample, crop, crop_patch, load_image, Dihedral, NormStats, PipelineError};

/// One progressive-patch phase. `until` is the exclusive end epoch; `None` runs to the end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub patch: usize,
    pub batch: usize,
    pub until: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub halving_epochs: Vec<usize>,
    pub phases: Vec<Phase>,
    /// Overrides `0.0004 · 64 / batch` of the first phase.
    pub lr_base: Option<f64>,
    /// Times each image appears per epoch.
    pub repeat: usize,
    pub sigma_range: [f64; 2],
    pub augment: bool,
    /// Hard cap on optimizer steps.
    pub steps: Option<usize>,
    /// Steps between periodic checkpoints; `None` only checkpoints at the end.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 400,
            warmup_epochs: 20,
            halving_epochs: vec![200, 300, 350, 375],
            phases: vec![
                Phase {
                    patch: 64,
                    batch: 64,
                    until: Some(100),
                },
                Phase {
                    patch: 96,
                    batch: 32,
                    until: Some(200),
                },
                Phase {
                    patch: 128,
                    batch: 16,
                    until: None,
                },
            ],
            lr_base: None,
            repeat: 1,
            sigma_range: [0.0, super::MAX_SIGMA],
            augment: true,
            steps: None,
            checkpoint_every: None,
        }
    }
}

pub fn lr_base(batch: usize) -> f64 {
    0.0004 * 64.0 / batch as f64
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Dataset(format!("invalid train settings: {m}")));
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        if self.phases.iter().any(|p| p.patch == 0 || p.batch == 0) {
            return bad("phase patch and batch must be positive".into());
        }
        if self.phases[..self.phases.len() - 1].iter().any(|p| p.until.is_none()) {
            return bad("only the last phase may be open-ended".into());
        }
        if self.repeat == 0 {
            return bad("repeat must be positive".into());
        }
        let [lo, hi] = self.sigma_range;
        if !(0.0 <= lo && lo <= hi && hi <= super::MAX_SIGMA) {
            return bad(format!("sigma range [{lo}, {hi}] outside [0, {}]", super::MAX_SIGMA));
        }
        if self.lr_base.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            return bad("lr_base must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        *self
            .phases
            .iter()
            .find(|p| p.until.is_none_or(|u| epoch < u))
            .unwrap_or_else(|| self.phases.last().expect("validated"))
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            base: self.lr_base.unwrap_or_else(|| lr_base(self.phases[0].batch)),
            warmup: self.warmup_epochs as f64,
            halvings: self.halving_epochs.iter().map(|&e| e as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub base: f64,
    pub warmup: f64,
    pub halvings: Vec<f64>,
}

impl TrainSchedule {
    /// Linear warmup from 0, then halved at every listed epoch already reached.
    pub fn lr(&self, epoch: f64) -> f64 {
        if epoch < self.warmup {
            return self.base * epoch / self.warmup;
        }
        let n = self.halvings.iter().filter(|&&h| epoch >= h).count();
        self.base * 0.5f64.powi(n as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub hq: Tensor<f32>,
    /// Degraded counterpart; synthesized on the fly when absent.
    pub lq: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    #[serde(default)]
    lq_path: Option<PathBuf>,
    hq_path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// JSON list of `{hq_path, lq_path?}`; relative paths resolve against the manifest's directory.
    pub fn from_manifest(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Dataset(format!("{}: {e}", path.display())))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| PipelineError::Dataset(format!("{}: {e}", path.display())))?;
        if entries.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let root = path.parent().unwrap_or(Path::new("."));
        let load = |p: &Path| -> Result<Tensor<f32>, PipelineError> {
            let full = root.join(p);
            load_image(&full)
                .map(|b| b.to_tensor())
                .map_err(|e| PipelineError::Dataset(format!("{}: {e}", full.display())))
        };
        let samples = entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    hq: load(&e.hq_path)?,
                    lq: e.lq_path.as_deref().map(load).transpose()?,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        Ok(Self { samples })
    }

    /// Checks channel counts and that unpaired images can be degraded for `task`.
    pub fn check(&self, task: Task, scale: usize) -> Result<(), PipelineError> {
        if self.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let c = task.image_channels();
        for (i, s) in self.samples.iter().enumerate() {
            if s.hq.dim(0) != c {
                return Err(PipelineError::Dataset(format!(
                    "sample {i}: {} channels, task {task:?} needs {c}",
                    s.hq.dim(0)
                )));
            }
            match &s.lq {
                Some(lq) => {
                    let (a, b) = (s.hq.shape(), lq.shape());
                    if a[0] != b[0] || a[1] != scale * b[1] || a[2] != scale * b[2] {
                        return Err(PipelineError::Dataset(format!("sample {i}: hq {a:?} is not {scale}x lq {b:?}")));
                    }
                }
                None if !(task.is_denoise() || task == Task::Sr) => {
                    return Err(PipelineError::Dataset(format!(
                        "sample {i}: task {task:?} has no synthetic degradation and needs lq_path"
                    )));
                }
                None => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,epoch,lr,loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.lr, r.loss));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub norm: NormStats,
}

struct Prepared {
    lq: Tensor<f32>,
    hq: Tensor<f32>,
}

/// Crop, augment, then degrade one training pair.
fn prepare(sample: &Sample, task: Task, r: usize, patch: usize, settings: &TrainSettings, rng: &mut Rng) -> Result<Prepared, PipelineError> {
    let (hq, lq) = match &sample.lq {
        Some(lq) => {
            let (h, l) = crop_patch(&sample.hq, lq, patch, r, rng)?;
            (h, Some(l))
        }
        None => {
            let (hh, hw) = (sample.hq.dim(1), sample.hq.dim(2));
            let rp = r * patch;
            if rp > hh || rp > hw {
                return Err(PipelineError::PatchTooLarge {
                    patch: rp,
                    height: hh,
                    width: hw,
                });
            }
            let y = rng.below(hh - rp + 1);
            let x = rng.below(hw - rp + 1);
            (crop(&sample.hq, y, x, rp, rp), None)
        }
    };
    let (hq, lq) = match (settings.augment, lq) {
        (true, Some(l)) => {
            let (h, l, _) = augment(&hq, &l, r, rng)?;
            (h, Some(l))
        }
        (true, None) => (Dihedral::sample(rng).apply(&hq), None),
        (false, l) => (hq, l),
    };
    let lq = match lq {
        Some(l) => l,
        None if task.is_denoise() => {
            let sigma = rng.uniform_range(settings.sigma_range[0], settings.sigma_range[1]);
            awgn_degrade(&hq, sigma, rng)
        }
        None if task == Task::Sr => box_downsample(&hq, r),
        None => return Err(PipelineError::Dataset(format!("task {task:?} needs paired data"))),
    };
    Ok(Prepared { lq, hq })
}

/// Largest patch `≤ want` that fits every sample and the model's window layout.
fn fit_patch(data: &Dataset, want: usize, multiple: usize, r: usize) -> Result<usize, PipelineError> {
    let side = data
        .samples
        .iter()
        .map(|s| (s.hq.dim(1) / r).min(s.hq.dim(2) / r))
        .min()
        .unwrap_or(0);
    let p = want.min(side) / multiple * multiple;
    if p == 0 {
        return Err(PipelineError::PatchTooLarge {
            patch: multiple,
            height: side,
            width: side,
        });
    }
    Ok(p)
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor<f32>>,
}

fn sample_step(model: &Model, ps: &ParamStore<f32>, norm: &NormStats, p: &Prepared) -> Result<SampleResult, PipelineError> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(norm.normalize(&p.lq));
    let y = model.forward(&mut g, ps, x)?;
    let y = norm.denormalize_var(&mut g, y)?;
    let t = g.constant(p.hq.clone());
    let d = g.sub(y, t)?;
    let a = g.abs(d);
    let loss = g.mean(a);
    let grads = g.backward(loss)?;
    Ok(SampleResult {
        loss: g.value(loss).item() as f64,
        grads: grads.for_store(&g, ps),
    })
}

/// L1 training in de-normalized pixel space with Adam.
///
/// Step `s` draws all of its randomness from `Rng::new(seed).fork(s)`, and the
/// per-sample gradients are reduced in sample order, so the trace does not
/// depend on `threads`. `on_checkpoint` runs every `checkpoint_every` steps
/// and once after the final step.
pub fn train_loop(
    model: &Model,
    ps: &mut ParamStore<f32>,
    data: &Dataset,
    settings: &TrainSettings,
    seed: u64,
    threads: usize,
    mut on_checkpoint: impl FnMut(usize, &ParamStore<f32>, &NormStats) -> Result<(), PipelineError>,
) -> Result<TrainReport, PipelineError> {
    settings.validate()?;
    let task = model.config.task;
    let r = model.config.upscale();
    data.check(task, r)?;
    let norm = NormStats::compute(data.samples.iter().map(|s| &s.hq));
    let schedule = settings.schedule();
    let mut adam = AdamState::new(ps, AdamConfig::default());
    let root = Rng::new(seed);
    let threads = threads.max(1);
    let mut trace = Vec::new();
    let mut step = 0usize;
    let cap = settings.steps.unwrap_or(usize::MAX);
    let per_epoch = data.len() * settings.repeat;

    'epochs: for epoch in 0..settings.epochs {
        let phase = settings.phase(epoch);
        let patch = fit_patch(data, phase.patch, model.config.input_multiple(), r)?;
        let mut order: Vec<usize> = (0..per_epoch).map(|i| i % data.len()).collect();
        let mut shuffle = root.fork(u64::MAX - epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.below(i + 1));
        }
        let steps = per_epoch.div_ceil(phase.batch);
        for k in 0..steps {
            if step >= cap {
                break 'epochs;
            }
            let lr = schedule.lr(epoch as f64 + k as f64 / steps as f64);
            let step_rng = root.fork(step as u64);
            let batch: Vec<Prepared> = (0..phase.batch)
                .map(|b| {
                    let idx = order[(k * phase.batch + b) % per_epoch];
                    prepare(&data.samples[idx], task, r, patch, settings, &mut step_rng.fork(b as u64))
                })
                .collect::<Result<_, _>>()?;
            let results = run_batch(model, ps, &norm, &batch, threads)?;
            let inv = 1.0 / results.len() as f32;
            let mut grads = results[0].grads.clone();
            for res in &results[1..] {
                for (acc, g) in grads.iter_mut().zip(&res.grads) {
                    *acc = acc.add(g)?;
                }
            }
            for g in grads.iter_mut() {
                *g = g.scale(inv);
            }
            let loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
            adam.step(ps, &grads, lr)?;
            trace.push(TraceRow { step, epoch, lr, loss });
            step += 1;
            if settings.checkpoint_every.is_some_and(|n| n > 0 && step % n == 0) {
                on_checkpoint(step, ps, &norm)?;
            }
        }
    }
    on_checkpoint(step, ps, &norm)?;
    Ok(TrainReport { trace, norm })
}

fn run_batch(model: &Model, ps: &ParamStore<f32>, norm: &NormStats, batch: &[Prepared], threads: usize) -> Result<Vec<SampleResult>, PipelineError> {
    if threads <= 1 || batch.len() <= 1 {
        return batch.iter().map(|p| sample_step(model, ps, norm, p)).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| sample_step(model, ps, norm, p)).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().expect("training worker panicked")?);
        }
        Ok(out)
    })
}
