//! Convolutional and MLP building blocks: MobiVari, the feed-forward network,
//! patch-merge downsizing and the shallow feature extractor.
//!
//! Spatial features are `[C, H, W]`; token features are `[H·W, C]`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Conv2dSpec, Element, Result, TensorError};

pub const INIT_STD: f64 = 0.02;

/// `[C, H, W] -> [H·W, C]`
pub fn to_tokens<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[1, 2, 0])?;
    g.reshape(p, &[s[1] * s[2], s[0]])
}

/// `[H·W, C] -> [C, H, W]`
pub fn to_spatial<T: Element>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(t)[1];
    let r = g.reshape(t, &[h, w, c])?;
    g.permute(r, &[2, 0, 1])
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: ps.trunc_normal(format!("{name}.weight"), &[inp, out], INIT_STD, rng),
            bias: ps.zeros(format!("{name}.bias"), &[out]),
            in_features: inp,
            out_features: out,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.linear(x, w, Some(b))
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Element>(
        ps: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if groups == 0 || inp % groups != 0 {
            return Err(TensorError::GroupMismatch { channels: inp, groups });
        }
        if out % groups != 0 {
            return Err(TensorError::GroupMismatch { channels: out, groups });
        }
        Ok(Self {
            weight: ps.trunc_normal(
                format!("{name}.weight"),
                &[out, inp / groups, kernel, kernel],
                INIT_STD,
                rng,
            ),
            bias: ps.zeros(format!("{name}.bias"), &[out]),
            spec: Conv2dSpec {
                groups,
                padding: kernel / 2,
            },
            in_channels: inp,
            out_channels: out,
            kernel,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv2d(x, w, Some(b), self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel + self.out_channels
    }

    /// Multiply-accumulates at an `h × w` output.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel * h * w) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: ps.full(format!("{name}.weight"), &[c], 1.0),
            beta: ps.zeros(format!("{name}.bias"), &[c]),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Group size and expansion ratio of a MobiVari layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobiVariParams {
    pub groups: usize,
    pub expansion: f64,
}

impl Default for MobiVariParams {
    fn default() -> Self {
        Self {
            groups: 4,
            expansion: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobiVariConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub expansion: f64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl MobiVariConfig {
    /// `groups` is reduced to `gcd(groups, in_channels)` so the expansion conv always divides.
    pub fn new(in_channels: usize, out_channels: usize, p: MobiVariParams) -> Self {
        Self {
            in_channels,
            out_channels,
            groups: gcd(p.groups, in_channels),
            expansion: p.expansion,
        }
    }

    /// Largest multiple of the group count not above `⌊in · e⌋`.
    pub fn expanded_channels(&self) -> usize {
        let raw = (self.in_channels as f64 * self.expansion + 1e-9).floor() as usize;
        raw - raw % self.groups.max(1)
    }

    pub fn has_residual(&self) -> bool {
        self.in_channels == self.out_channels
    }
}

/// MobileNet-V2 variant: grouped 1×1 expansion, LeakyReLU, depthwise 3×3 with a
/// residual, LeakyReLU, pointwise 1×1 with a residual when channels are preserved.
#[derive(Debug, Clone)]
pub struct MobiVari {
    pub config: MobiVariConfig,
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl MobiVari {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, cfg: MobiVariConfig, rng: &mut Rng) -> Result<Self> {
        let ce = cfg.expanded_channels();
        if ce < cfg.groups || cfg.groups == 0 {
            return Err(TensorError::GroupMismatch {
                channels: ce,
                groups: cfg.groups,
            });
        }
        Ok(Self {
            config: cfg,
            expand: Conv2d::new(ps, &format!("{name}.expand"), cfg.in_channels, ce, 1, cfg.groups, rng)?,
            depthwise: Conv2d::new(ps, &format!("{name}.dw"), ce, ce, 3, ce, rng)?,
            pointwise: Conv2d::new(ps, &format!("{name}.pw"), ce, cfg.out_channels, 1, 1, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let e = self.expand.forward(g, ps, x)?;
        let e = g.leaky_relu(e);
        let d = self.depthwise.forward(g, ps, e)?;
        let d = g.add(d, e)?;
        let d = g.leaky_relu(d);
        let out = self.pointwise.forward(g, ps, d)?;
        if self.config.has_residual() {
            g.add(out, x)
        } else {
            Ok(out)
        }
    }

    pub fn num_params(&self) -> usize {
        self.expand.num_params() + self.depthwise.num_params() + self.pointwise.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.expand.macs(h, w) + self.depthwise.macs(h, w) + self.pointwise.macs(h, w)
    }
}

/// Token-wise MLP: `C -> ratio·C -> C` with GELU.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, c: usize, ratio: f64, rng: &mut Rng) -> Self {
        let hidden = (c as f64 * ratio).round() as usize;
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), c, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, c, rng),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = *g.shape(x).last().unwrap_or(&0);
        if c != self.fc1.in_features {
            return Err(TensorError::ShapeMismatch {
                op: "ffn",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.fc1.in_features],
            });
        }
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * (self.fc1.in_features * self.fc1.out_features + self.fc2.in_features * self.fc2.out_features)) as u64
    }
}

/// Halves resolution, keeps channels: 2×2 space-to-depth then MobiVari `4C -> C`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub mixer: MobiVari,
}

impl PatchMerge {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, c: usize, p: MobiVariParams, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mixer: MobiVari::new(ps, &format!("{name}.mobivari"), MobiVariConfig::new(4 * c, c, p), rng)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(TensorError::OddDimension {
                height: s[1],
                width: s[2],
            });
        }
        let u = g.pixel_unshuffle(x, 2)?;
        self.mixer.forward(g, ps, u)
    }
}

/// 3×3 convolution from image channels to feature channels.
#[derive(Debug, Clone)]
pub struct Shallow {
    pub conv: Conv2d,
}

impl Shallow {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, in_ch: usize, c: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), in_ch, c, 3, 1, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        self.conv.forward(g, ps, x)
    }
}
