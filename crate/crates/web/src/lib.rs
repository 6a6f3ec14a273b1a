//! Browser bindings for the `ramit` crate: a cost calculator, an AWGN
//! playground with PSNR/SSIM, and attribution heatmaps of a toy attention
//! block. Images cross the boundary as RGBA bytes, row-major.

use ramit::cli::Preset;
use ramit::model::{attribution_map, count_mult_adds, count_params, Model, ModelConfig, Region};
use ramit::pipeline::{awgn_degrade, psnr, rgb_to_y, ssim};
use ramit::{ParamStore, Rng, Tensor};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Side of the attribution demo image.
pub const PROBE_SIDE: usize = 32;
pub const PROBE_WINDOW: usize = 8;

pub fn preset(name: &str) -> Result<ModelConfig, String> {
    let p = match name {
        "sr2" => Preset::Sr2,
        "sr3" => Preset::Sr3,
        "sr4" => Preset::Sr4,
        "color-dn" => Preset::ColorDn,
        "gray-dn" => Preset::GrayDn,
        "lle" => Preset::Lle,
        "derain" => Preset::Derain,
        "slim-sr2" => Preset::SlimSr2,
        "slim-sr4" => Preset::SlimSr4,
        "slim-lle" => Preset::SlimLle,
        _ => return Err(format!("unknown preset `{name}`")),
    };
    Ok(p.config())
}

/// Parameter count and Mult-Adds breakdown as JSON.
pub fn count_json(name: &str, width: usize, height: usize) -> Result<String, String> {
    if width == 0 || height == 0 {
        return Err("resolution must be positive".into());
    }
    let cfg = preset(name)?;
    let rep = count_mult_adds(&cfg, width, height);
    Ok(json!({
        "params": count_params(&cfg),
        "lq": [rep.lq.0, rep.lq.1],
        "mult_adds": rep.total,
        "breakdown": rep.breakdown,
    })
    .to_string())
}

fn check_rgba(rgba: &[u8], w: usize, h: usize) -> Result<(), String> {
    if rgba.len() != w * h * 4 {
        return Err(format!("expected {} RGBA bytes for {w}x{h}, got {}", w * h * 4, rgba.len()));
    }
    Ok(())
}

fn rgba_to_tensor(rgba: &[u8], w: usize, h: usize) -> Tensor<f64> {
    let hw = w * h;
    Tensor::from_fn([3, h, w], |i| rgba[(i % hw) * 4 + i / hw] as f64 / 255.0)
}

fn tensor_to_rgba(t: &Tensor<f64>) -> Vec<u8> {
    let (h, w) = (t.dim(1), t.dim(2));
    let hw = h * w;
    let mut out = vec![255u8; hw * 4];
    for ch in 0..3 {
        for p in 0..hw {
            out[p * 4 + ch] = (t.data()[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Smooth colour card with a disc and a bar, as RGBA.
pub fn test_card_rgba(side: usize) -> Vec<u8> {
    let s = side as f64;
    let t = Tensor::from_fn([3, side, side], |i| {
        let (ch, y, x) = (i / (side * side), (i / side) % side, i % side);
        let (fy, fx) = (y as f64 / s, x as f64 / s);
        if ((fx - 0.6).powi(2) + (fy - 0.4).powi(2)).sqrt() < 0.22 {
            [0.9, 0.25, 0.2][ch]
        } else if (0.15..0.3).contains(&fx) && fy > 0.2 {
            [0.1, 0.15, 0.6][ch]
        } else {
            [0.2 + 0.6 * fx, 0.3 + 0.4 * fy, 0.7 - 0.4 * fx * fy][ch]
        }
    });
    tensor_to_rgba(&t)
}

pub fn noisy_rgba(rgba: &[u8], w: usize, h: usize, sigma: f64, seed: u64) -> Result<Vec<u8>, String> {
    check_rgba(rgba, w, h)?;
    if !(0.0..=255.0).contains(&sigma) {
        return Err(format!("sigma {sigma} outside [0, 255]"));
    }
    let x = rgba_to_tensor(rgba, w, h);
    Ok(tensor_to_rgba(&awgn_degrade(&x, sigma, &mut Rng::new(seed))))
}

fn fmt(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!((v * 1e4).round() / 1e4)
    } else {
        json!("inf")
    }
}

/// RGB and Y-channel PSNR/SSIM between two RGBA images.
pub fn quality_json(a: &[u8], b: &[u8], w: usize, h: usize) -> Result<String, String> {
    check_rgba(a, w, h)?;
    check_rgba(b, w, h)?;
    let (ta, tb) = (rgba_to_tensor(a, w, h), rgba_to_tensor(b, w, h));
    let e = |e: ramit::pipeline::PipelineError| e.to_string();
    let (ya, yb) = (rgb_to_y(&ta).map_err(e)?, rgb_to_y(&tb).map_err(e)?);
    Ok(json!({
        "psnr": fmt(psnr(&ta, &tb, 1.0).map_err(e)?),
        "ssim": fmt(ssim(&ta, &tb, 1.0).map_err(e)?),
        "psnr_y": fmt(psnr(&ya, &yb, 255.0).map_err(e)?),
        "ssim_y": fmt(ssim(&ya, &yb, 255.0).map_err(e)?),
    })
    .to_string())
}

/// Attribution of a 2×2 output patch at `(x, y)` for a one-block probe with
/// random weights. `chsa_ratio = 0` is pure window attention. Returns
/// `PROBE_SIDE²` values in `[0, 1]`.
pub fn attribution_values(chsa_ratio: f64, seed: u64, x: usize, y: usize) -> Result<Vec<f32>, String> {
    if !(0.0..=1.0).contains(&chsa_ratio) {
        return Err(format!("ratio {chsa_ratio} outside [0, 1]"));
    }
    let cfg = ModelConfig::probe(16, 2, chsa_ratio, PROBE_WINDOW);
    let mut ps = ParamStore::<f64>::new();
    let model = Model::build(&cfg, &mut ps, seed).map_err(|e| e.to_string())?;
    let mut r = Rng::new(seed ^ 0x5eed);
    ps.map_all(|n, t| {
        if n.contains("norm") || n.ends_with("log_tau") {
            t.clone()
        } else {
            Tensor::from_fn(t.shape().to_vec(), |_| r.normal() * 0.3)
        }
    });
    let input = Tensor::from_fn([3, PROBE_SIDE, PROBE_SIDE], |_| r.uniform());
    let region = Region { x, y, w: 2, h: 2 };
    let heat = attribution_map(&model, &ps, &input, region).map_err(|e| e.to_string())?;
    Ok(heat.data().iter().map(|&v| v as f32).collect())
}

#[wasm_bindgen]
pub fn count(preset: &str, width: u32, height: u32) -> Result<String, JsError> {
    count_json(preset, width as usize, height as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn test_card(side: u32) -> Vec<u8> {
    test_card_rgba(side as usize)
}

#[wasm_bindgen]
pub fn add_noise(rgba: &[u8], width: u32, height: u32, sigma: f64, seed: u32) -> Result<Vec<u8>, JsError> {
    noisy_rgba(rgba, width as usize, height as usize, sigma, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn quality(a: &[u8], b: &[u8], width: u32, height: u32) -> Result<String, JsError> {
    quality_json(a, b, width as usize, height as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attribution(chsa_ratio: f64, seed: u32, x: u32, y: u32) -> Result<Vec<f32>, JsError> {
    attribution_values(chsa_ratio, seed as u64, x as usize, y as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn probe_side() -> u32 {
    PROBE_SIDE as u32
}
