//! PSNR, SSIM and the BT.601 luma transform.

use crate::tensor::{Element, Tensor};

use super::PipelineError;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Studio-swing luma in `[16, 235]` from RGB in `[0, 1]`.
pub fn rgb_to_y<T: Element>(img: &Tensor<T>) -> Result<Tensor<f64>, PipelineError> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(PipelineError::NotRgb(s.to_vec()));
    }
    let hw = s[1] * s[2];
    let d = img.data();
    Ok(Tensor::from_fn([1, s[1], s[2]], |i| {
        16.0 + 65.481 * d[i].f64() + 128.553 * d[hw + i].f64() + 24.966 * d[2 * hw + i].f64()
    }))
}

fn check_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), PipelineError> {
    if a.shape() != b.shape() {
        return Err(PipelineError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64, PipelineError> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        / a.numel().max(1) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h × w` plane.
fn filter(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|t| k[t] * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (ma, mb) = (filter(a, h, w, &k), filter(b, h, w, &k));
    let saa = filter(&prod(a, a), h, w, &k);
    let sbb = filter(&prod(b, b), h, w, &k);
    let sab = filter(&prod(a, b), h, w, &k);
    let n = ma.len();
    (0..n)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64, PipelineError> {
    check_same(a, b)?;
    let s = a.shape();
    if s.len() != 3 || s[1] < SSIM_WINDOW || s[2] < SSIM_WINDOW {
        return Err(PipelineError::ShapeMismatch(format!(
            "ssim needs [C, H, W] with sides >= {SSIM_WINDOW}, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(&av[ch * h * w..(ch + 1) * h * w], &bv[ch * h * w..(ch + 1) * h * w], h, w, peak))
        .sum();
    Ok(total / c as f64)
}
