//! Central finite-difference checks of every backward rule and of a tiny model.

use serde::Serialize;

use crate::attention::{chsa_core, relative_position_index, spsa_core};
use crate::autograd::{Graph, Var};
use crate::model::{Model, ModelConfig, Task};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Conv2dSpec, Result, Tensor};

pub const OPS_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;
pub const OPS_STEP: f64 = 1e-4;
pub const MODEL_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub op: String,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A corrupted backward rule, used to prove the checks can fail.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub op: String,
    pub factor: f64,
}

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Keeps inputs at least this far from zero, for rules with a kink or pole there.
    away_from_zero: f64,
    build: Build,
}

fn sample(rng: &mut Rng, shape: &[usize], away: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.uniform_range(-1.0, 1.0);
        if away > 0.0 {
            v.signum() * (away + v.abs())
        } else {
            v
        }
    })
}

fn cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &'static [&'static [usize]], build: Build) -> OpCase {
        OpCase {
            name,
            shapes,
            away_from_zero: 0.0,
            build,
        }
    }
    fn kinked(name: &'static str, shapes: &'static [&'static [usize]], build: Build) -> OpCase {
        OpCase {
            name,
            shapes,
            away_from_zero: 0.1,
            build,
        }
    }
    vec![
        case("add", &[&[2, 3], &[3]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[2, 1], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[2, 3, 2], &[3, 1]], |g, v| g.mul(v[0], v[1])),
        kinked("div", &[&[2, 3], &[2, 3]], |g, v| g.div(v[0], v[1])),
        case("scale", &[&[4]], |g, v| Ok(g.scale(v[0], -1.7))),
        case("add_scalar", &[&[4]], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        kinked("leaky_relu", &[&[3, 4]], |g, v| Ok(g.leaky_relu(v[0]))),
        case("gelu", &[&[3, 4]], |g, v| Ok(g.gelu(v[0]))),
        case("sigmoid", &[&[3, 4]], |g, v| Ok(g.sigmoid(v[0]))),
        case("exp", &[&[3, 4]], |g, v| Ok(g.exp(v[0]))),
        kinked("abs", &[&[3, 4]], |g, v| Ok(g.abs(v[0]))),
        case("square", &[&[3, 4]], |g, v| Ok(g.square(v[0]))),
        kinked("clamp_min", &[&[3, 4]], |g, v| Ok(g.clamp_min(v[0], 0.0))),
        kinked("reciprocal", &[&[3, 4]], |g, v| g.reciprocal(v[0])),
        case("matmul", &[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("softmax", &[&[3, 5]], |g, v| g.softmax(v[0], 1)),
        case("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("l2_normalize", &[&[3, 4]], |g, v| Ok(g.l2_normalize(v[0], 1e-8))),
        case("conv2d", &[&[4, 5, 6], &[6, 2, 3, 3], &[6]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { groups: 2, padding: 1 })
        }),
        case("conv2d_depthwise", &[&[3, 4, 4], &[3, 1, 3, 3]], |g, v| {
            g.conv2d(v[0], v[1], None, Conv2dSpec { groups: 3, padding: 1 })
        }),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("concat", &[&[2, 3], &[2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("narrow", &[&[3, 5]], |g, v| g.narrow(v[0], 1, 1, 3)),
        case("roll", &[&[2, 4, 5]], |g, v| g.roll(v[0], &[1, 2], &[1, -2])),
        case("pixel_shuffle", &[&[8, 2, 3]], |g, v| g.pixel_shuffle(v[0], 2)),
        case("pixel_unshuffle", &[&[2, 4, 6]], |g, v| g.pixel_unshuffle(v[0], 2)),
        case("gather_rows", &[&[9]], |g, v| {
            let idx = relative_position_index(2);
            g.gather_rows(v[0], &idx, &[4, 4])
        }),
        case("sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0]))),
        case("mean", &[&[3, 4]], |g, v| Ok(g.mean(v[0]))),
        case("mean_axis", &[&[3, 4]], |g, v| g.mean_axis(v[0], 0)),
        case("spsa", &[&[16, 4], &[16, 4], &[16, 4], &[49]], |g, v| {
            let tau = g.constant(Tensor::from_f64([2], &[0.5, 0.8]).unwrap());
            let idx = relative_position_index(4);
            let bias = g.gather_rows(v[3], &idx, &[16, 16])?;
            Ok(spsa_core(g, v[0], v[1], v[2], 4, 4, 2, 4, 2, tau, Some(bias))?.out)
        }),
        case("chsa", &[&[6, 4], &[6, 4], &[6, 4]], |g, v| {
            let tau = g.constant(Tensor::from_f64([2], &[0.5, 0.8]).unwrap());
            Ok(chsa_core(g, v[0], v[1], v[2], 2, tau)?.out)
        }),
    ]
}

pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`, zero when both vanish.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    rel_error_scaled(analytic, numeric, 0.0)
}

/// As [`rel_error`], with `floor` as a lower bound on the denominator.
fn rel_error_scaled(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(floor, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Builds `⟨f(inputs), w⟩` so every output element carries a distinct weight.
fn probe_loss(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

fn check_case(case: &OpCase, seed: u64, fault: Option<&Fault>) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(case.name.len() as u64 * 1009 + case.name.as_bytes()[0] as u64);
    let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| sample(&mut rng, s, case.away_from_zero)).collect();
    let out_shape = {
        let mut g = Graph::<f64>::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let o = (case.build)(&mut g, &vars)?;
        g.shape(o).to_vec()
    };
    let w = sample(&mut rng, &out_shape, 0.0);
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let o = (case.build)(&mut g, &vars)?;
        let l = probe_loss(&mut g, o, &w)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::<f64>::new();
    if let Some(f) = fault {
        g.corrupt_backward(&f.op, f.factor);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let o = (case.build)(&mut g, &vars)?;
    let l = probe_loss(&mut g, o, &w)?;
    let grads = g.backward(l)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut numeric = vec![0.0; x.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.clone();
            xs[i].data_mut()[j] += OPS_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * OPS_STEP;
            let down = eval(&xs)?;
            *slot = (up - down) / (2.0 * OPS_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Every differentiable op over `seeds` draws. With a fault, backward rules named
/// `fault.op` are scaled during the analytic pass.
pub fn run_ops(seeds: u64, fault: Option<&Fault>) -> Result<Vec<CheckResult>> {
    cases()
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                worst = worst.max(check_case(case, s, fault)?);
            }
            Ok(CheckResult {
                op: case.name.to_string(),
                worst_rel_error: worst,
                tolerance: OPS_TOLERANCE,
                passed: worst < OPS_TOLERANCE,
            })
        })
        .collect()
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        task: Task::ColorDn,
        channels: 16,
        depths: [1, 1, 1, 1],
        heads: [2; 4],
        chsa_ratio: 0.5,
        window: 4,
        helper: Some(true),
        ..ModelConfig::default()
    }
}

/// End-to-end check on a tiny model: `per_param` sampled entries of every
/// parameter tensor plus a handful of input pixels. One result per tensor,
/// with errors measured against the largest gradient entry of that tensor.
pub fn run_model(cfg: &ModelConfig, side: usize, per_param: usize, seed: u64, fault: Option<&Fault>) -> crate::model::Result<Vec<CheckResult>> {
    let mut ps = ParamStore::<f64>::new();
    let model = Model::build(cfg, &mut ps, seed)?;
    let mut rng = Rng::new(seed).fork(77);
    // Re-draw zero-initialized tensors so their gradients are generic.
    ps.map_all(|_, t| {
        let d = t.data();
        Tensor::from_fn(t.shape().to_vec(), |i| d[i] + 0.1 * rng.normal())
    });
    let c = cfg.task.image_channels();
    let x = Tensor::from_fn([c, side, side], |_| rng.uniform());
    let out_shape = [c, side * cfg.upscale(), side * cfg.upscale()];
    let w = Tensor::from_fn(out_shape, |_| rng.uniform_range(-1.0, 1.0));

    let eval = |ps: &ParamStore<f64>, x: &Tensor<f64>| -> crate::model::Result<f64> {
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let y = model.forward(&mut g, ps, xv)?;
        let l = probe_loss(&mut g, y, &w)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::<f64>::new();
    if let Some(f) = fault {
        g.corrupt_backward(&f.op, f.factor);
    }
    let xv = g.input_with_grad(x.clone());
    let y = model.forward(&mut g, &ps, xv)?;
    let l = probe_loss(&mut g, y, &w)?;
    let grads = g.backward(l)?;
    let all = grads.for_store(&g, &ps);

    let mut results = Vec::new();
    let ids: Vec<_> = ps.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = ps.get(id).numel();
        let picks: Vec<usize> = (0..per_param.min(n)).map(|_| rng.below(n)).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &j in &picks {
            let base = ps.get(id).clone();
            let mut t = base.clone();
            t.data_mut()[j] += MODEL_STEP;
            ps.set(id, t.clone());
            let up = eval(&ps, &x)?;
            t.data_mut()[j] -= 2.0 * MODEL_STEP;
            ps.set(id, t);
            let down = eval(&ps, &x)?;
            ps.set(id, base);
            analytic.push(all[k].data()[j]);
            numeric.push((up - down) / (2.0 * MODEL_STEP));
        }
        let err = rel_error_scaled(&analytic, &numeric, all[k].max_abs());
        results.push(CheckResult {
            op: ps.name(id).to_string(),
            worst_rel_error: err,
            tolerance: MODEL_TOLERANCE,
            passed: err < MODEL_TOLERANCE,
        });
    }

    let gx = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..per_param.max(4) {
        let j = rng.below(x.numel());
        let mut xp = x.clone();
        xp.data_mut()[j] += MODEL_STEP;
        let up = eval(&ps, &xp)?;
        xp.data_mut()[j] -= 2.0 * MODEL_STEP;
        let down = eval(&ps, &xp)?;
        analytic.push(gx.data()[j]);
        numeric.push((up - down) / (2.0 * MODEL_STEP));
    }
    let err = rel_error_scaled(&analytic, &numeric, gx.max_abs());
    results.push(CheckResult {
        op: "input".into(),
        worst_rel_error: err,
        tolerance: MODEL_TOLERANCE,
        passed: err < MODEL_TOLERANCE,
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_seeds() {
        for r in run_ops(2, None).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn corrupted_rule_is_caught_and_named() {
        let fault = Fault {
            op: "softmax".into(),
            factor: 1.5,
        };
        let res = run_ops(1, Some(&fault)).unwrap();
        let failed: Vec<_> = res.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
        assert!(failed.contains(&"softmax"), "{failed:?}");
        assert!(res.iter().find(|r| r.op == "add").unwrap().passed);
    }
}

