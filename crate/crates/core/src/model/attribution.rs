use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

use super::{Model, ModelError, Result};

/// Output-space rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl FromStr for Region {
    type Err = String;

    /// `x,y,w,h`
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad region `{s}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match v[..] {
            [x, y, w, h] => Ok(Region { x, y, w, h }),
            _ => Err(format!("region `{s}` must be x,y,w,h")),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

/// Gradient of the summed output over `region` with respect to the input,
/// reduced to a per-pixel ℓ2 norm over channels and scaled so the maximum is 1.
/// Returns `[H, W]` in input coordinates; an all-zero gradient stays zero.
pub fn attribution_map<T: Element>(model: &Model, ps: &ParamStore<T>, input: &Tensor<T>, region: Region) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input_with_grad(input.clone());
    let y = model.forward(&mut g, ps, x)?;
    let (oh, ow) = (g.shape(y)[1], g.shape(y)[2]);
    if region.w == 0 || region.h == 0 || region.x + region.w > ow || region.y + region.h > oh {
        return Err(ModelError::RegionOutOfBounds {
            region,
            height: oh,
            width: ow,
        });
    }
    let rows = g.narrow(y, 1, region.y, region.h)?;
    let patch = g.narrow(rows, 2, region.x, region.w)?;
    let loss = g.sum(patch);
    let grads = g.backward(loss)?;
    let gx = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let mut heat = vec![0.0f64; h * w];
    for ch in 0..c {
        for (i, v) in gx.data()[ch * h * w..(ch + 1) * h * w].iter().enumerate() {
            heat[i] += v.f64() * v.f64();
        }
    }
    let heat: Vec<f64> = heat.into_iter().map(f64::sqrt).collect();
    let peak = heat.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Ok(Tensor::from_fn([h, w], |i| T::c(heat[i] * scale)))
}
