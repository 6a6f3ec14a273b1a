//! Image I/O, degradations, normalization, metrics and the training loop.

mod degrade;
mod image;
mod metrics;
mod norm;
mod train;

pub use degrade::{augment, awgn_degrade, box_downsample, crop, crop_back, crop_patch, pad_to_multiple, Dihedral, MAX_SIGMA};
pub use image::{load_image, save_image, ImageBuffer};
pub use metrics::{gaussian_window, psnr, rgb_to_y, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use norm::{NormStats, MIN_STD};
pub use train::{
    lr_base, train_loop, trace_csv, Dataset, Phase, Sample, TraceRow, TrainReport, TrainSchedule, TrainSettings,
};

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::model::{CheckpointError, Model, ModelError};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

/// Spatial multiple every restored image is padded to.
pub const PAD_MULTIPLE: usize = 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image header: {0}")]
    CorruptHeader(String),
    #[error("truncated image data: expected {expected} bytes, got {got}")]
    TruncatedData { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("misaligned pair: hq {hq:?} is not {scale}x lq {lq:?}")]
    MisalignedPair { hq: Vec<usize>, lq: Vec<usize>, scale: usize },
    #[error("patch {patch} does not fit a {height}x{width} image")]
    PatchTooLarge { patch: usize, height: usize, width: usize },
    #[error("Y conversion requires an RGB image, got shape {0:?}")]
    NotRgb(Vec<usize>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Padding multiple for a model: 32, widened if the window layout needs more.
pub fn restore_multiple(model: &Model) -> usize {
    let m = model.config.input_multiple();
    PAD_MULTIPLE / gcd(PAD_MULTIPLE, m) * m
}

/// Pad, normalize, run the model, de-normalize and crop back to `r ×` the input size.
pub fn restore(model: &Model, ps: &ParamStore<f32>, norm: &NormStats, input: &Tensor<f32>) -> Result<Tensor<f32>, PipelineError> {
    let channels = model.config.task.image_channels();
    if input.rank() != 3 || input.dim(0) != channels {
        return Err(PipelineError::ShapeMismatch(format!(
            "model expects {channels}-channel images, got {:?}",
            input.shape()
        )));
    }
    if norm.channels() != channels {
        return Err(PipelineError::ShapeMismatch(format!(
            "normalization has {} channels, model {channels}",
            norm.channels()
        )));
    }
    let (padded, orig) = pad_to_multiple(input, restore_multiple(model));
    let y = model.infer(ps, &norm.normalize(&padded))?;
    Ok(crop_back(&norm.denormalize(&y), orig, model.config.upscale()))
}
