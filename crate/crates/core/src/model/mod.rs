//! The assembled restoration network: four stages of D-RAMiT blocks, patch-merge
//! downsizing, the multi-scale bottleneck, H-RAMi and the reconstruction head.

mod attribution;
mod checkpoint;
mod config;
mod cost;

pub use attribution::{attribution_map, Region};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Manifest, ParamRecord, MAGIC, VERSION};
pub use config::{Arch, ModelConfig, Task};
pub use cost::{count_mult_adds, count_params, MacReport};

use thiserror::Error;

use crate::attention::{AttentionConfig, DramitAttention, ReciprocalCache};
use crate::autograd::{Graph, Var};
use crate::layers::{to_spatial, to_tokens, Conv2d, Ffn, LayerNorm, MobiVari, MobiVariConfig, PatchMerge, Shallow};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config parse error at byte {offset}: {message}")]
    ConfigParse { offset: usize, message: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unsupported upscaling factor {0} (expected 2, 3 or 4)")]
    InvalidScale(usize),
    #[error("input shape {shape:?} invalid: expected {channels} channels and sides divisible by {multiple}")]
    BadInputShape {
        shape: Vec<usize>,
        channels: usize,
        multiple: usize,
    },
    #[error("region {region:?} outside output {height}x{width}")]
    RegionOutOfBounds { region: Region, height: usize, width: usize },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// MAC categories outside the attention layer.
pub mod category {
    pub const SHALLOW: &str = "shallow";
    pub const FFN: &str = "ffn";
    pub const DOWNSIZE: &str = "downsize";
    pub const BOTTLENECK: &str = "bottleneck";
    pub const HRAMI: &str = "hrami";
    pub const RECONSTRUCTION: &str = "reconstruction";
    pub const HEAD: &str = "head";
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub features: Var,
    pub cache: ReciprocalCache,
    /// MobiVari-mixed attention before the first layer norm.
    pub tapped: Var,
}

#[derive(Debug, Clone)]
pub struct DramitBlock {
    pub attn: DramitAttention,
    pub norm1: LayerNorm,
    pub ffn: Ffn,
    pub norm2: LayerNorm,
}

impl DramitBlock {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, cfg: AttentionConfig, model: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            attn: DramitAttention::new(ps, &format!("{name}.attn"), cfg, model.mobivari, rng)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), c),
            ffn: Ffn::new(ps, &format!("{name}.ffn"), c, model.ffn_ratio, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), c),
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, cache: &ReciprocalCache) -> Result<BlockOutput> {
        let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
        let att = self.attn.forward(g, ps, x, cache)?;
        let xt = to_tokens(g, x)?;
        let at = to_tokens(g, att.mixed)?;
        let s = g.add(xt, at)?;
        let x1 = self.norm1.forward(g, ps, s)?;
        let prev = g.set_mac_category(category::FFN);
        let f = self.ffn.forward(g, ps, x1)?;
        g.set_mac_category(prev);
        let s2 = g.add(x1, f)?;
        let x2 = self.norm2.forward(g, ps, s2)?;
        Ok(BlockOutput {
            features: to_spatial(g, x2, h, w)?,
            cache: att.cache,
            tapped: att.mixed,
        })
    }

    pub fn num_params(&self) -> usize {
        let c = self.attn.config.channels;
        self.attn.num_params() + self.ffn.num_params() + 4 * c
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageOutput {
    pub features: Var,
    pub tapped_attention: Var,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<DramitBlock>,
}

impl Stage {
    /// Blocks at odd in-stage index use the half-window cyclic shift.
    pub fn new<T: Element>(
        ps: &mut ParamStore<T>,
        name: &str,
        model: &ModelConfig,
        depth: usize,
        heads: usize,
        alternate_shift: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let cfg = AttentionConfig::new(
                model.channels,
                heads,
                model.chsa_ratio,
                model.window,
                alternate_shift && i % 2 == 1,
                model.helper_enabled(),
            )?;
            blocks.push(DramitBlock::new(ps, &format!("{name}.block{i}"), cfg, model, rng)?);
        }
        Ok(Self { blocks })
    }

    /// The reciprocal cache starts empty at every stage.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<StageOutput> {
        let mut cache = ReciprocalCache::empty();
        let mut feat = x;
        let mut tapped = x;
        for b in &self.blocks {
            let o = b.forward(g, ps, feat, &cache)?;
            feat = o.features;
            tapped = o.tapped;
            cache = o.cache;
        }
        Ok(StageOutput {
            features: feat,
            tapped_attention: tapped,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub pre: [MobiVari; 2],
    pub conv: Conv2d,
    pub shuffle: Option<usize>,
}

impl Reconstruction {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, model: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = model.channels;
        let out = model.task.image_channels();
        let shuffle = match model.task {
            Task::Sr if (2..=4).contains(&model.scale) => Some(model.scale),
            Task::Sr => return Err(ModelError::InvalidScale(model.scale)),
            _ => None,
        };
        let r2 = shuffle.map_or(1, |r| r * r);
        let mv = MobiVariConfig::new(c, c, model.mobivari);
        Ok(Self {
            pre: [
                MobiVari::new(ps, &format!("{name}.mobivari0"), mv, rng)?,
                MobiVari::new(ps, &format!("{name}.mobivari1"), mv, rng)?,
            ],
            conv: Conv2d::new(ps, &format!("{name}.conv"), c, out * r2, 3, 1, rng)?,
            shuffle,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.pre[0].forward(g, ps, x)?;
        let y = self.pre[1].forward(g, ps, y)?;
        let y = self.conv.forward(g, ps, y)?;
        Ok(match self.shuffle {
            Some(r) => g.pixel_shuffle(y, r)?,
            None => y,
        })
    }
}

/// Pixel-shuffles each part by its factor to a common resolution and concatenates channels.
fn shuffle_concat<T: Element>(g: &mut Graph<T>, parts: &[(Var, usize)]) -> Result<Var> {
    let mut up = Vec::with_capacity(parts.len());
    for &(v, r) in parts {
        up.push(if r == 1 { v } else { g.pixel_shuffle(v, r)? });
    }
    let first = g.shape(up[0]).to_vec();
    for &u in &up[1..] {
        if g.shape(u)[1..] != first[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "shuffle_concat",
                lhs: first,
                rhs: g.shape(u).to_vec(),
            }
            .into());
        }
    }
    Ok(g.concat(&up, 0)?)
}

/// Channels after the multi-scale concatenation: `2C + C/4 + C/16`.
pub fn fused_channels(c: usize) -> usize {
    2 * c + c / 4 + c / 16
}

#[derive(Debug, Clone)]
pub struct RamitModel {
    pub shallow: Shallow,
    pub stages: [Stage; 4],
    pub downsize: [PatchMerge; 2],
    pub bottleneck: MobiVari,
    pub hrami: Option<MobiVari>,
    pub reconstruction: Reconstruction,
}

#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub shallow: Shallow,
    pub stage: Stage,
    pub head: Conv2d,
}

#[derive(Debug, Clone)]
pub enum Network {
    Ramit(Box<RamitModel>),
    Probe(ProbeModel),
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Var,
    pub shallow: Var,
    pub stages: Vec<StageOutput>,
    pub hrami: Option<Var>,
    pub residual: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub net: Network,
}

impl Model {
    /// Registers every parameter of `cfg` in `ps` (which should be empty) and
    /// initializes them from `seed`.
    pub fn build<T: Element>(cfg: &ModelConfig, ps: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).fork(0x1417);
        let c = cfg.channels;
        let img = cfg.task.image_channels();
        let net = match cfg.arch {
            Arch::Ramit => {
                let shallow = Shallow::new(ps, "shallow", img, c, &mut rng)?;
                let stage = |i: usize, ps: &mut ParamStore<T>, rng: &mut Rng| {
                    Stage::new(ps, &format!("stage{}", i + 1), cfg, cfg.depths[i], cfg.heads[i], true, rng)
                };
                let s1 = stage(0, ps, &mut rng)?;
                let d1 = PatchMerge::new(ps, "down1", c, cfg.mobivari, &mut rng)?;
                let s2 = stage(1, ps, &mut rng)?;
                let d2 = PatchMerge::new(ps, "down2", c, cfg.mobivari, &mut rng)?;
                let s3 = stage(2, ps, &mut rng)?;
                let fuse = MobiVariConfig::new(fused_channels(c), c, cfg.fuse_params());
                let bottleneck = MobiVari::new(ps, "bottleneck", fuse, &mut rng)?;
                let s4 = stage(3, ps, &mut rng)?;
                let hrami = if cfg.hrami {
                    Some(MobiVari::new(ps, "hrami", fuse, &mut rng)?)
                } else {
                    None
                };
                let reconstruction = Reconstruction::new(ps, "recon", cfg, &mut rng)?;
                Network::Ramit(Box::new(RamitModel {
                    shallow,
                    stages: [s1, s2, s3, s4],
                    downsize: [d1, d2],
                    bottleneck,
                    hrami,
                    reconstruction,
                }))
            }
            Arch::Probe => Network::Probe(ProbeModel {
                shallow: Shallow::new(ps, "shallow", img, c, &mut rng)?,
                stage: Stage::new(ps, "stage1", cfg, cfg.probe_blocks, cfg.heads[0], cfg.probe_shift, &mut rng)?,
                head: Conv2d::new(ps, "head", c, img, 1, 1, &mut rng)?,
            }),
        };
        Ok(Self { config: cfg.clone(), net })
    }

    /// Checks an input `[channels, H, W]` before the forward pass.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.input_multiple();
        let ch = self.config.task.image_channels();
        if shape.len() != 3 || shape[0] != ch || shape[1] == 0 || shape[2] == 0 || shape[1] % m != 0 || shape[2] % m != 0 {
            return Err(ModelError::BadInputShape {
                shape: shape.to_vec(),
                channels: ch,
                multiple: m,
            });
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_trace(g, ps, x)?.output)
    }

    pub fn forward_trace<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<ForwardTrace> {
        self.check_input(g.shape(x))?;
        let prev = g.set_mac_category(category::SHALLOW);
        let trace = match &self.net {
            Network::Ramit(m) => {
                let xs = m.shallow.forward(g, ps, x)?;
                let s1 = m.stages[0].forward(g, ps, xs)?;
                g.set_mac_category(category::DOWNSIZE);
                let d1 = m.downsize[0].forward(g, ps, s1.features)?;
                let s2 = m.stages[1].forward(g, ps, d1)?;
                g.set_mac_category(category::DOWNSIZE);
                let d2 = m.downsize[1].forward(g, ps, s2.features)?;
                let s3 = m.stages[2].forward(g, ps, d2)?;
                g.set_mac_category(category::BOTTLENECK);
                let cat = shuffle_concat(g, &[(xs, 1), (s1.features, 1), (s2.features, 2), (s3.features, 4)])?;
                let b = m.bottleneck.forward(g, ps, cat)?;
                let s4 = m.stages[3].forward(g, ps, b)?;
                let mut y = s4.features;
                let mut hr = None;
                if let Some(mixer) = &m.hrami {
                    g.set_mac_category(category::HRAMI);
                    let cat = shuffle_concat(
                        g,
                        &[
                            (s1.tapped_attention, 1),
                            (s2.tapped_attention, 2),
                            (s3.tapped_attention, 4),
                            (s4.tapped_attention, 1),
                        ],
                    )?;
                    let h = mixer.forward(g, ps, cat)?;
                    y = g.mul(y, h)?;
                    hr = Some(h);
                }
                let y = g.add(y, xs)?;
                g.set_mac_category(category::RECONSTRUCTION);
                let res = m.reconstruction.forward(g, ps, y)?;
                let output = if self.config.task == Task::Sr { res } else { g.add(res, x)? };
                ForwardTrace {
                    output,
                    shallow: xs,
                    stages: vec![s1, s2, s3, s4],
                    hrami: hr,
                    residual: res,
                }
            }
            Network::Probe(p) => {
                let xs = p.shallow.forward(g, ps, x)?;
                let s = p.stage.forward(g, ps, xs)?;
                g.set_mac_category(category::HEAD);
                let res = p.head.forward(g, ps, s.features)?;
                ForwardTrace {
                    output: g.add(res, x)?,
                    shallow: xs,
                    stages: vec![s],
                    hrami: None,
                    residual: res,
                }
            }
        };
        g.set_mac_category(prev);
        Ok(trace)
    }

    /// Forward without a tape.
    pub fn infer<T: Element>(&self, ps: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, ps, x)?;
        Ok(g.value(y).clone())
    }

    pub fn blocks(&self) -> Vec<(usize, &DramitBlock)> {
        match &self.net {
            Network::Ramit(m) => m
                .stages
                .iter()
                .enumerate()
                .flat_map(|(i, s)| s.blocks.iter().map(move |b| (i, b)))
                .collect(),
            Network::Probe(p) => p.stage.blocks.iter().map(|b| (0, b)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention;

    fn tiny(task: Task) -> ModelConfig {
        ModelConfig {
            task,
            channels: 16,
            depths: [1, 2, 1, 2],
            heads: [2, 2, 2, 2],
            chsa_ratio: 0.5,
            window: 4,
            ..ModelConfig::default()
        }
    }

    fn input(cfg: &ModelConfig, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = Rng::new(seed);
        Tensor::from_fn([cfg.task.image_channels(), h, w], |_| r.uniform())
    }

    #[test]
    fn default_head_split_is_three_to_one() {
        let mut ps = ParamStore::<f32>::new();
        let m = Model::build(&ModelConfig::default(), &mut ps, 0).unwrap();
        let blocks = m.blocks();
        assert_eq!(blocks.len(), 20);
        for (_, b) in blocks {
            assert_eq!((b.attn.config.sp_heads, b.attn.config.ch_heads), (3, 1));
        }
    }

    #[test]
    fn shape_laws() {
        for task in Task::ALL {
            let cfg = tiny(task);
            let mut ps = ParamStore::<f64>::new();
            let m = Model::build(&cfg, &mut ps, 1).unwrap();
            let y = m.infer(&ps, &input(&cfg, 16, 32, 2)).unwrap();
            let (c, r) = (task.image_channels(), cfg.upscale());
            assert_eq!(y.shape(), &[c, 16 * r, 32 * r], "{task:?}");
        }
        let cfg = tiny(Task::Sr);
        let mut ps = ParamStore::<f64>::new();
        let m = Model::build(&cfg, &mut ps, 1).unwrap();
        assert!(matches!(m.infer(&ps, &input(&cfg, 16, 20, 2)), Err(ModelError::BadInputShape { .. })));
        let mut bad = tiny(Task::Sr);
        bad.scale = 5;
        assert!(matches!(Model::build(&bad, &mut ParamStore::<f32>::new(), 0), Err(ModelError::InvalidScale(5))));
    }

    #[test]
    fn stage_resolutions_and_taps() {
        let cfg = tiny(Task::ColorDn);
        let mut ps = ParamStore::<f64>::new();
        let m = Model::build(&cfg, &mut ps, 1).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(input(&cfg, 32, 16, 3));
        let t = m.forward_trace(&mut g, &ps, x).unwrap();
        let want = [[16, 32, 16], [16, 16, 8], [16, 8, 4], [16, 32, 16]];
        for (s, w) in t.stages.iter().zip(want) {
            assert_eq!(g.shape(s.features), &w);
            assert_eq!(g.shape(s.tapped_attention), &w);
        }
        assert_eq!(fused_channels(64), 148);
        assert_eq!(m.blocks().iter().filter(|(_, b)| b.attn.config.shift).count(), 2);
    }

    #[test]
    fn zeroed_reconstruction_returns_input() {
        let cfg = tiny(Task::ColorDn);
        let mut ps = ParamStore::<f64>::new();
        let m = Model::build(&cfg, &mut ps, 1).unwrap();
        let Network::Ramit(r) = &m.net else { unreachable!() };
        for id in [r.reconstruction.conv.weight, r.reconstruction.conv.bias] {
            let z = Tensor::zeros(ps.get(id).shape().to_vec());
            ps.set(id, z);
        }
        let x = input(&cfg, 16, 16, 4);
        assert_eq!(m.infer(&ps, &x).unwrap(), x);
    }

    #[test]
    fn unit_hrami_equals_no_hrami() {
        let cfg = tiny(Task::Sr);
        let mut ps = ParamStore::<f64>::new();
        let m = Model::build(&cfg, &mut ps, 5).unwrap();
        let Network::Ramit(r) = &m.net else { unreachable!() };
        let mixer = r.hrami.clone().unwrap();
        for c in [&mixer.expand, &mixer.depthwise, &mixer.pointwise] {
            for id in [c.weight, c.bias] {
                let z = Tensor::zeros(ps.get(id).shape().to_vec());
                ps.set(id, z);
            }
        }
        ps.set(mixer.pointwise.bias, Tensor::ones([cfg.channels]));
        let plain_cfg = ModelConfig { hrami: false, ..cfg.clone() };
        let mut plain_ps = ParamStore::<f64>::new();
        let plain = Model::build(&plain_cfg, &mut plain_ps, 5).unwrap();
        for (id, p) in plain_ps.clone().iter() {
            let src = ps.id(&p.name).unwrap();
            plain_ps.set(id, ps.get(src).clone());
        }
        let x = input(&cfg, 16, 16, 6);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let t = m.forward_trace(&mut g, &ps, xv).unwrap();
        assert!(g.value(t.hrami.unwrap()).data().iter().all(|&v| v == 1.0));
        assert_eq!(g.value(t.output), &plain.infer(&plain_ps, &x).unwrap());
    }

    #[test]
    fn block_with_zero_weights_is_double_layer_norm() {
        let cfg = tiny(Task::ColorDn);
        let mut ps = ParamStore::<f64>::new();
        let acfg = AttentionConfig::new(16, 2, 0.5, 4, false, false).unwrap();
        let b = DramitBlock::new(&mut ps, "b", acfg, &cfg, &mut Rng::new(0)).unwrap();
        ps.map_all(|n, t| {
            if n.contains("norm") {
                t.clone()
            } else {
                Tensor::zeros(t.shape().to_vec())
            }
        });
        let mut r = Rng::new(1);
        let x = Tensor::from_fn([16, 8, 8], |_| r.normal());
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let o = b.forward(&mut g, &ps, xv, &ReciprocalCache::empty()).unwrap();
        let t = to_tokens(&mut g, xv).unwrap();
        let gamma = g.constant(Tensor::ones([16]));
        let beta = g.constant(Tensor::zeros([16]));
        let l1 = g.layer_norm(t, gamma, beta, 1e-5).unwrap();
        let l2 = g.layer_norm(l1, gamma, beta, 1e-5).unwrap();
        let want = to_spatial(&mut g, l2, 8, 8).unwrap();
        assert!(g.value(o.tapped).data().iter().all(|&v| v == 0.0));
        let (a, w) = (g.value(o.features), g.value(want));
        for (p, q) in a.data().iter().zip(w.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(b.num_params(), ps.num_scalars());
    }

    #[test]
    fn instrumented_macs_match_analytic_report() {
        for cfg in [tiny(Task::Sr), tiny(Task::GrayDn), ModelConfig { helper: Some(true), ..tiny(Task::Derain) }] {
            let mut ps = ParamStore::<f64>::new();
            let m = Model::build(&cfg, &mut ps, 1).unwrap();
            let (h, w) = (16, 32);
            let mut g = Graph::inference();
            let x = g.constant(input(&cfg, h, w, 2));
            m.forward(&mut g, &ps, x).unwrap();
            let r = count_mult_adds(&cfg, w * cfg.upscale(), h * cfg.upscale());
            assert_eq!(r.lq, (w, h));
            let inst: std::collections::BTreeMap<String, u64> =
                g.mac_breakdown().iter().map(|(k, v)| (k.to_string(), *v)).collect();
            assert_eq!(inst, r.breakdown, "{:?}", cfg.task);
            assert_eq!(g.total_macs(), r.total);
            let closed: u64 = m
                .blocks()
                .iter()
                .map(|(s, b)| {
                    let f = 1 << [0, 1, 2, 0][*s];
                    attention::dramit_complexity(&b.attn.config, h / f, w / f)
                })
                .sum();
            assert_eq!(g.macs(attention::CORE), closed);
        }
    }

    #[test]
    fn probe_model_shapes() {
        let cfg = ModelConfig::probe(16, 2, 0.0, 4);
        let mut ps = ParamStore::<f64>::new();
        let m = Model::build(&cfg, &mut ps, 0).unwrap();
        assert_eq!(m.config.input_multiple(), 4);
        let y = m.infer(&ps, &input(&cfg, 8, 12, 1)).unwrap();
        assert_eq!(y.shape(), &[3, 8, 12]);
        assert_eq!(count_params(&cfg), ps.num_scalars());
    }
}
