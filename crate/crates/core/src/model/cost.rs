use std::collections::BTreeMap;

use serde::Serialize;

use crate::attention::{dramit_complexity, helper_macs, CORE, HELPER, MIXER};
use crate::params::ParamStore;

use super::{category, Model, ModelConfig, Network, Stage};

/// Exact number of trainable scalars.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let mut ps = ParamStore::<f32>::new();
    Model::build(cfg, &mut ps, 0).expect("valid config");
    ps.num_scalars()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MacReport {
    /// Requested output resolution `(width, height)`.
    pub hq: (usize, usize),
    /// Network input resolution after padding.
    pub lq: (usize, usize),
    pub total: u64,
    pub breakdown: BTreeMap<String, u64>,
}

fn pad_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Analytic multiply-accumulates for restoring a `hq_w × hq_h` image. The
/// input is `hq / r` padded up to the model's size multiple; each layer is
/// counted at the resolution it runs at.
pub fn count_mult_adds(cfg: &ModelConfig, hq_w: usize, hq_h: usize) -> MacReport {
    let mut ps = ParamStore::<f32>::new();
    let model = Model::build(cfg, &mut ps, 0).expect("valid config");
    let r = cfg.upscale();
    let m = cfg.input_multiple();
    let (w, h) = (pad_up(hq_w.div_ceil(r), m), pad_up(hq_h.div_ceil(r), m));
    let mut acc: BTreeMap<String, u64> = BTreeMap::new();
    let mut add = |k: &str, v: u64| *acc.entry(k.to_string()).or_default() += v;

    let stage = |s: &Stage, h: usize, w: usize, add: &mut dyn FnMut(&str, u64)| {
        for (i, b) in s.blocks.iter().enumerate() {
            let a = &b.attn.config;
            add(CORE, dramit_complexity(a, h, w));
            if i > 0 {
                add(HELPER, helper_macs(a, h, w));
            }
            add(MIXER, b.attn.mixer.macs(h, w));
            add(category::FFN, b.ffn.macs(h * w));
        }
    };

    match &model.net {
        Network::Ramit(net) => {
            add(category::SHALLOW, net.shallow.conv.macs(h, w));
            let res = [(h, w), (h / 2, w / 2), (h / 4, w / 4), (h, w)];
            for (s, &(sh, sw)) in net.stages.iter().zip(&res) {
                stage(s, sh, sw, &mut add);
            }
            add(category::DOWNSIZE, net.downsize[0].mixer.macs(h / 2, w / 2));
            add(category::DOWNSIZE, net.downsize[1].mixer.macs(h / 4, w / 4));
            add(category::BOTTLENECK, net.bottleneck.macs(h, w));
            if let Some(hr) = &net.hrami {
                add(category::HRAMI, hr.macs(h, w));
            }
            let rc = &net.reconstruction;
            add(
                category::RECONSTRUCTION,
                rc.pre[0].macs(h, w) + rc.pre[1].macs(h, w) + rc.conv.macs(h, w),
            );
        }
        Network::Probe(p) => {
            add(category::SHALLOW, p.shallow.conv.macs(h, w));
            stage(&p.stage, h, w, &mut add);
            add(category::HEAD, p.head.macs(h, w));
        }
    }
    acc.retain(|_, v| *v > 0);
    MacReport {
        hq: (hq_w, hq_h),
        lq: (w, h),
        total: acc.values().sum(),
        breakdown: acc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Task;

    #[test]
    fn params_independent_of_seed_and_resolution() {
        let c = ModelConfig::for_task(Task::ColorDn);
        assert_eq!(count_params(&c), count_params(&c));
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        Model::build(&c, &mut a, 1).unwrap();
        Model::build(&c, &mut b, 2).unwrap();
        assert_eq!(a.num_scalars(), b.num_scalars());
    }

    #[test]
    fn conv_costs_scale_with_pixels() {
        let c = ModelConfig::for_task(Task::ColorDn);
        let a = count_mult_adds(&c, 256, 128);
        let b = count_mult_adds(&c, 512, 256);
        assert_eq!(b.breakdown["shallow"], 4 * a.breakdown["shallow"]);
        assert_eq!(b.breakdown["ffn"], 4 * a.breakdown["ffn"]);
        assert_eq!(a.lq, (256, 128));
        assert_eq!(count_mult_adds(&c, 65, 70).lq, (96, 96));
        assert_eq!(count_mult_adds(&ModelConfig::sr(4), 1280, 720).lq, (320, 192));
    }
}
