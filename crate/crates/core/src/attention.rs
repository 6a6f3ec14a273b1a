//! Bi-dimensional self-attention: windowed spatial attention (SPSA) and
//! transposed channel attention (CHSA) running in parallel on one shared QKV
//! projection, coupled across blocks by the reciprocal helper.

use crate::autograd::{Graph, Var};
use crate::layers::{to_spatial, to_tokens, Linear, MobiVari, MobiVariConfig, MobiVariParams};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Element, Result, TensorError};

pub const QK_EPS: f64 = 1e-8;
pub const TAU_FLOOR: f64 = 0.01;
pub const TAU_INIT: f64 = 0.1;

/// MAC categories used by the instrumented counter.
pub const CORE: &str = "attention_core";
pub const HELPER: &str = "helper";
pub const MIXER: &str = "attention_mixer";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub sp_heads: usize,
    pub ch_heads: usize,
    pub window: usize,
    pub shift: bool,
    pub helper: bool,
}

impl AttentionConfig {
    /// Splits `heads` so that `round(heads · ratio)` go to CHSA; at least one stays spatial.
    pub fn new(channels: usize, heads: usize, chsa_ratio: f64, window: usize, shift: bool, helper: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&chsa_ratio) {
            return Err(TensorError::Invalid(format!("chsa ratio {chsa_ratio} outside [0, 1]")));
        }
        let ch = (heads as f64 * chsa_ratio).round() as usize;
        if ch >= heads {
            return Err(TensorError::Invalid(format!(
                "chsa ratio {chsa_ratio} leaves no spatial head out of {heads}"
            )));
        }
        Self::with_split(channels, heads - ch, ch, window, shift, helper)
    }

    /// Explicit head split. `sp_heads == 0` gives a pure channel-attention layer.
    pub fn with_split(
        channels: usize,
        sp_heads: usize,
        ch_heads: usize,
        window: usize,
        shift: bool,
        helper: bool,
    ) -> Result<Self> {
        let heads = sp_heads + ch_heads;
        if heads == 0 || window == 0 {
            return Err(TensorError::Invalid("attention needs at least one head and a window".into()));
        }
        if channels % heads != 0 {
            return Err(TensorError::ChannelNotDivisible { channels, factor: heads });
        }
        Ok(Self {
            channels,
            sp_heads,
            ch_heads,
            window,
            shift,
            helper,
        })
    }

    pub fn heads(&self) -> usize {
        self.sp_heads + self.ch_heads
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads()
    }

    pub fn sp_channels(&self) -> usize {
        self.sp_heads * self.head_dim()
    }

    pub fn ch_channels(&self) -> usize {
        self.ch_heads * self.head_dim()
    }

    pub fn shift_size(&self) -> usize {
        if self.shift {
            self.window / 2
        } else {
            0
        }
    }
}

/// Lookup from token pair `(i, j)` of an `M×M` window to a row of the `(2M−1)²` table.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let span = 2 * m - 1;
    let n = m * m;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / m, i % m);
        for j in 0..n {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct RelPosBias {
    pub table: ParamId,
    pub index: Vec<usize>,
    pub window: usize,
}

impl RelPosBias {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, window: usize) -> Self {
        let span = 2 * window - 1;
        Self {
            table: ps.zeros(format!("{name}.table"), &[span * span]),
            index: relative_position_index(window),
            window,
        }
    }

    /// The `[M², M²]` bias matrix.
    pub fn materialize<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>) -> Result<Var> {
        let n = self.window * self.window;
        let t = g.param(ps, self.table);
        g.gather_rows(t, &self.index, &[n, n])
    }
}

/// Per-head temperature stored as a log value; effective `τ = max(exp(p), 0.01)`.
#[derive(Debug, Clone)]
pub struct TauScale {
    pub param: ParamId,
    pub heads: usize,
}

impl TauScale {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, name: &str, heads: usize) -> Self {
        Self {
            param: ps.full(format!("{name}.log_tau"), &[heads], TAU_INIT.ln()),
            heads,
        }
    }

    pub fn effective<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>) -> Var {
        let p = g.param(ps, self.param);
        let e = g.exp(p);
        g.clamp_min(e, TAU_FLOOR)
    }

    pub fn values<T: Element>(&self, ps: &ParamStore<T>) -> Vec<f64> {
        ps.get(self.param).data().iter().map(|p| p.f64().exp().max(TAU_FLOOR)).collect()
    }
}

/// Squeezed outputs of the previous block. `prev_chsa` is token-major `[N, d]`,
/// `prev_spsa` is `[N, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReciprocalCache {
    pub prev_chsa: Option<Var>,
    pub prev_spsa: Option<Var>,
}

impl ReciprocalCache {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.prev_chsa.is_none() && self.prev_spsa.is_none()
    }
}

/// `[H·W, C] -> [nw, M², C]`
pub fn window_partition<T: Element>(g: &mut Graph<T>, x: Var, h: usize, w: usize, m: usize) -> Result<Var> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(TensorError::NotDivisible { height: h, width: w, window: m });
    }
    let c = g.shape(x)[1];
    let r = g.reshape(x, &[h / m, m, w / m, m, c])?;
    let p = g.permute(r, &[0, 2, 1, 3, 4])?;
    g.reshape(p, &[(h / m) * (w / m), m * m, c])
}

/// `[nw, M², C] -> [H·W, C]`
pub fn window_reverse<T: Element>(g: &mut Graph<T>, x: Var, h: usize, w: usize, m: usize) -> Result<Var> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(TensorError::NotDivisible { height: h, width: w, window: m });
    }
    let c = g.shape(x)[2];
    let r = g.reshape(x, &[h / m, w / m, m, m, c])?;
    let p = g.permute(r, &[0, 2, 1, 3, 4])?;
    g.reshape(p, &[h * w, c])
}

/// Toroidal roll of a `[C, H, W]` map.
pub fn cyclic_shift<T: Element>(g: &mut Graph<T>, x: Var, dy: isize, dx: isize) -> Result<Var> {
    g.roll(x, &[1, 2], &[dy, dx])
}

fn roll_tokens<T: Element>(g: &mut Graph<T>, x: Var, h: usize, w: usize, s: isize) -> Result<Var> {
    if s == 0 {
        return Ok(x);
    }
    let c = g.shape(x)[1];
    let r = g.reshape(x, &[h, w, c])?;
    let r = g.roll(r, &[0, 1], &[s, s])?;
    g.reshape(r, &[h * w, c])
}

/// Output of an attention core before projection.
#[derive(Debug, Clone, Copy)]
pub struct CoreOutput {
    /// `[N, heads·d]` in token order.
    pub out: Var,
    /// SPSA: `[nw, heads, M², M²]`; CHSA: `[heads, d, d]`.
    pub map: Var,
}

/// Scaled-cosine window attention on token-major `q, k, v: [N, heads·d]`.
#[allow(clippy::too_many_arguments)]
pub fn spsa_core<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    h: usize,
    w: usize,
    heads: usize,
    window: usize,
    shift: usize,
    tau: Var,
    bias: Option<Var>,
) -> Result<CoreOutput> {
    let bias = bias.ok_or(TensorError::MissingBias)?;
    let c = g.shape(q)[1];
    for t in [k, v] {
        if g.shape(t) != g.shape(q) {
            return Err(TensorError::ShapeMismatch {
                op: "spsa",
                lhs: g.shape(q).to_vec(),
                rhs: g.shape(t).to_vec(),
            });
        }
    }
    if heads == 0 || c % heads != 0 || g.shape(q)[0] != h * w {
        return Err(TensorError::ShapeMismatch {
            op: "spsa",
            lhs: g.shape(q).to_vec(),
            rhs: vec![h * w, heads],
        });
    }
    let d = c / heads;
    let m2 = window * window;
    let s = shift as isize;
    let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
        let t = roll_tokens(g, t, h, w, -s)?;
        let t = window_partition(g, t, h, w, window)?;
        let nw = g.shape(t)[0];
        let t = g.reshape(t, &[nw, m2, heads, d])?;
        g.permute(t, &[0, 2, 1, 3])
    };
    let (qw, kw, vw) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let nw = g.shape(qw)[0];
    let qn = g.l2_normalize(qw, QK_EPS);
    let kn = g.l2_normalize(kw, QK_EPS);
    let kt = g.transpose_last2(kn)?;
    let logits = g.matmul(qn, kt)?;
    let tau = g.reshape(tau, &[heads, 1, 1])?;
    let logits = g.div(logits, tau)?;
    let logits = g.add(logits, bias)?;
    let map = g.softmax(logits, 3)?;
    let o = g.matmul(map, vw)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[nw, m2, c])?;
    let o = window_reverse(g, o, h, w, window)?;
    let out = roll_tokens(g, o, h, w, s)?;
    Ok(CoreOutput { out, map })
}

/// Transposed attention: per head, `d` channels attend over all `N` tokens.
pub fn chsa_core<T: Element>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize, tau: Var) -> Result<CoreOutput> {
    let (n, c) = (g.shape(q)[0], g.shape(q)[1]);
    for t in [k, v] {
        if g.shape(t) != g.shape(q) {
            return Err(TensorError::ShapeMismatch {
                op: "chsa",
                lhs: g.shape(q).to_vec(),
                rhs: g.shape(t).to_vec(),
            });
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(TensorError::ChannelNotDivisible { channels: c, factor: heads });
    }
    let d = c / heads;
    let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[n, heads, d])?;
        g.permute(t, &[1, 2, 0])
    };
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let qn = g.l2_normalize(qh, QK_EPS);
    let kn = g.l2_normalize(kh, QK_EPS);
    let kt = g.transpose_last2(kn)?;
    let logits = g.matmul(qn, kt)?;
    let tau = g.reshape(tau, &[heads, 1, 1])?;
    let logits = g.div(logits, tau)?;
    let map = g.softmax(logits, 2)?;
    let o = g.matmul(map, vh)?;
    let o = g.permute(o, &[2, 0, 1])?;
    let out = g.reshape(o, &[n, c])?;
    Ok(CoreOutput { out, map })
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// MobiVari-mixed attention `[C, H, W]`.
    pub mixed: Var,
    pub cache: ReciprocalCache,
    pub sp_map: Option<Var>,
    pub ch_map: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct DramitAttention {
    pub config: AttentionConfig,
    pub qkv: Linear,
    pub proj_sp: Option<Linear>,
    pub proj_ch: Option<Linear>,
    pub tau_sp: Option<TauScale>,
    pub tau_ch: Option<TauScale>,
    pub bias: Option<RelPosBias>,
    pub mixer: MobiVari,
}

impl DramitAttention {
    pub fn new<T: Element>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        mv: MobiVariParams,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c = cfg.channels;
        let (csp, cch) = (cfg.sp_channels(), cfg.ch_channels());
        let qkv = Linear::new(ps, &format!("{name}.qkv"), c, 3 * c, rng);
        let (proj_sp, tau_sp, bias) = if cfg.sp_heads > 0 {
            (
                Some(Linear::new(ps, &format!("{name}.proj_sp"), csp, csp, rng)),
                Some(TauScale::new(ps, &format!("{name}.tau_sp"), cfg.sp_heads)),
                Some(RelPosBias::new(ps, &format!("{name}.rel_pos"), cfg.window)),
            )
        } else {
            (None, None, None)
        };
        let (proj_ch, tau_ch) = if cfg.ch_heads > 0 {
            (
                Some(Linear::new(ps, &format!("{name}.proj_ch"), cch, cch, rng)),
                Some(TauScale::new(ps, &format!("{name}.tau_ch"), cfg.ch_heads)),
            )
        } else {
            (None, None)
        };
        let mixer = MobiVari::new(ps, &format!("{name}.mixer"), MobiVariConfig::new(c, c, mv), rng)?;
        Ok(Self {
            config: cfg,
            qkv,
            proj_sp,
            proj_ch,
            tau_sp,
            tau_ch,
            bias,
            mixer,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        cache: &ReciprocalCache,
    ) -> Result<AttentionOutput> {
        let cfg = self.config;
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != cfg.channels {
            return Err(TensorError::ShapeMismatch {
                op: "dramit_attention",
                lhs: s,
                rhs: vec![cfg.channels],
            });
        }
        let (h, w) = (s[1], s[2]);
        if h % cfg.window != 0 || w % cfg.window != 0 {
            return Err(TensorError::NotDivisible {
                height: h,
                width: w,
                window: cfg.window,
            });
        }
        let n = h * w;
        let (c, d, csp, cch) = (cfg.channels, cfg.head_dim(), cfg.sp_channels(), cfg.ch_channels());
        let prev_cat = g.set_mac_category(CORE);

        let t = to_tokens(g, x)?;
        let qkv = self.qkv.forward(g, ps, t)?;
        let mut parts = Vec::with_capacity(2);
        let mut out = AttentionOutput {
            mixed: x,
            cache: ReciprocalCache::empty(),
            sp_map: None,
            ch_map: None,
        };
        let mut sp_out = None;
        let mut ch_out = None;

        if let (Some(proj), Some(tau), Some(bias)) = (&self.proj_sp, &self.tau_sp, &self.bias) {
            let q = g.narrow(qkv, 1, 0, csp)?;
            let k = g.narrow(qkv, 1, c, csp)?;
            let mut v = g.narrow(qkv, 1, 2 * c, csp)?;
            if let (true, Some(pc)) = (cfg.helper, cache.prev_chsa) {
                g.set_mac_category(HELPER);
                let v3 = g.reshape(v, &[n, cfg.sp_heads, d])?;
                let pc = g.reshape(pc, &[n, 1, d])?;
                let v3 = g.mul(v3, pc)?;
                g.count_macs((n * csp) as u64);
                v = g.reshape(v3, &[n, csp])?;
                g.set_mac_category(CORE);
            }
            let tau = tau.effective(g, ps);
            let b = bias.materialize(g, ps)?;
            let core = spsa_core(g, q, k, v, h, w, cfg.sp_heads, cfg.window, cfg.shift_size(), tau, Some(b))?;
            let y = proj.forward(g, ps, core.out)?;
            out.sp_map = Some(core.map);
            sp_out = Some(y);
            parts.push(y);
        }
        if let (Some(proj), Some(tau)) = (&self.proj_ch, &self.tau_ch) {
            let q = g.narrow(qkv, 1, csp, cch)?;
            let k = g.narrow(qkv, 1, c + csp, cch)?;
            let mut v = g.narrow(qkv, 1, 2 * c + csp, cch)?;
            if let (true, Some(ps_prev)) = (cfg.helper, cache.prev_spsa) {
                g.set_mac_category(HELPER);
                v = g.mul(v, ps_prev)?;
                g.count_macs((n * cch) as u64);
                g.set_mac_category(CORE);
            }
            let tau = tau.effective(g, ps);
            let core = chsa_core(g, q, k, v, cfg.ch_heads, tau)?;
            let y = proj.forward(g, ps, core.out)?;
            out.ch_map = Some(core.map);
            ch_out = Some(y);
            parts.push(y);
        }

        if cfg.helper {
            if let (Some(sp), Some(ch)) = (sp_out, ch_out) {
                let ch3 = g.reshape(ch, &[n, cfg.ch_heads, d])?;
                let m = g.mean_axis(ch3, 1)?;
                out.cache.prev_chsa = Some(g.reshape(m, &[n, d])?);
                out.cache.prev_spsa = Some(g.mean_axis(sp, 1)?);
            }
        }

        let cat = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        let spatial = to_spatial(g, cat, h, w)?;
        g.set_mac_category(MIXER);
        out.mixed = self.mixer.forward(g, ps, spatial)?;
        g.set_mac_category(prev_cat);
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        let cfg = self.config;
        let span = 2 * cfg.window - 1;
        self.qkv.num_params()
            + self.proj_sp.as_ref().map_or(0, |p| p.num_params() + cfg.sp_heads + span * span)
            + self.proj_ch.as_ref().map_or(0, |p| p.num_params() + cfg.ch_heads)
            + self.mixer.num_params()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplexityKind {
    Spsa,
    Chsa,
}

/// Closed-form multiply-accumulates of a full-width attention layer:
/// `4NC² + 2M²NC` for SPSA and `4NC² + 2NC²/L` for CHSA.
pub fn complexity(kind: ComplexityKind, h: usize, w: usize, c: usize, m: usize, l: usize) -> u64 {
    let (n, c, m, l) = (h as u64 * w as u64, c as u64, m as u64, l as u64);
    match kind {
        ComplexityKind::Spsa => 4 * n * c * c + 2 * m * m * n * c,
        ComplexityKind::Chsa => 4 * n * c * c + 2 * n * c * c / l,
    }
}

/// Core cost of a split layer. Reduces to [`complexity`] when either side is empty.
pub fn dramit_complexity(cfg: &AttentionConfig, h: usize, w: usize) -> u64 {
    let n = (h * w) as u64;
    let c = cfg.channels as u64;
    let (csp, cch, d) = (cfg.sp_channels() as u64, cfg.ch_channels() as u64, cfg.head_dim() as u64);
    let m2 = (cfg.window * cfg.window) as u64;
    3 * n * c * c + n * csp * csp + 2 * m2 * n * csp + n * cch * cch + 2 * n * cch * d
}

/// Elementwise products spent by the reciprocal helper in one block that receives a cache.
pub fn helper_macs(cfg: &AttentionConfig, h: usize, w: usize) -> u64 {
    if cfg.helper && cfg.sp_heads > 0 && cfg.ch_heads > 0 {
        (h * w * cfg.channels) as u64
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.normal())
    }

    fn tau_const(g: &mut Graph<f64>, heads: usize, v: f64) -> Var {
        g.constant(Tensor::full([heads], v))
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn unit(a: &[f64]) -> Vec<f64> {
        let n = dot(a, a).sqrt().max(QK_EPS);
        a.iter().map(|x| x / n).collect()
    }

    fn softmax_row(r: &[f64]) -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    /// Dense window attention evaluated token by token from coordinates.
    #[allow(clippy::too_many_arguments)]
    fn spsa_oracle(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        h: usize,
        w: usize,
        heads: usize,
        m: usize,
        s: usize,
        tau: &[f64],
        table: &[f64],
    ) -> Vec<f64> {
        let c = q.dim(1);
        let d = c / heads;
        let row = |t: &Tensor<f64>, tok: usize, hd: usize| t.data()[tok * c + hd * d..tok * c + (hd + 1) * d].to_vec();
        let mut out = vec![0.0; h * w * c];
        // rolled coordinate (y', x') holds the original token ((y'+s)%h, (x'+s)%w)
        let orig = |y: usize, x: usize| ((y + s) % h) * w + (x + s) % w;
        let span = 2 * m - 1;
        for yi in 0..h {
            for xi in 0..w {
                let (wy, wx) = (yi / m, xi / m);
                let ti = orig(yi, xi);
                for hd in 0..heads {
                    let qi = unit(&row(q, ti, hd));
                    let mut logits = Vec::new();
                    let mut toks = Vec::new();
                    for yj in wy * m..(wy + 1) * m {
                        for xj in wx * m..(wx + 1) * m {
                            let tj = orig(yj, xj);
                            let kj = unit(&row(k, tj, hd));
                            let rel = (yi % m + m - 1 - yj % m) * span + (xi % m + m - 1 - xj % m);
                            logits.push(dot(&qi, &kj) / tau[hd] + table[rel]);
                            toks.push(tj);
                        }
                    }
                    let p = softmax_row(&logits);
                    for (pj, &tj) in p.iter().zip(&toks) {
                        let vj = row(v, tj, hd);
                        for e in 0..d {
                            out[ti * c + hd * d + e] += pj * vj[e];
                        }
                    }
                }
            }
        }
        out
    }

    fn chsa_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, tau: &[f64]) -> Vec<f64> {
        let (n, c) = (q.dim(0), q.dim(1));
        let d = c / heads;
        let col = |t: &Tensor<f64>, ch: usize| (0..n).map(|i| t.data()[i * c + ch]).collect::<Vec<_>>();
        let mut out = vec![0.0; n * c];
        for hd in 0..heads {
            for a in 0..d {
                let qa = unit(&col(q, hd * d + a));
                let logits: Vec<f64> = (0..d).map(|b| dot(&qa, &unit(&col(k, hd * d + b))) / tau[hd]).collect();
                let p = softmax_row(&logits);
                for (b, pb) in p.iter().enumerate() {
                    let vb = col(v, hd * d + b);
                    for i in 0..n {
                        out[i * c + hd * d + a] += pb * vb[i];
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() < tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn config_split_defaults() {
        let c = AttentionConfig::new(64, 4, 0.25, 8, false, true).unwrap();
        assert_eq!((c.sp_heads, c.ch_heads), (3, 1));
        assert_eq!((c.head_dim(), c.sp_channels(), c.ch_channels()), (16, 48, 16));
        assert_eq!(AttentionConfig::new(64, 4, 0.0, 8, true, false).unwrap().ch_heads, 0);
        assert!(AttentionConfig::new(64, 4, 1.0, 8, false, false).is_err());
        assert!(AttentionConfig::new(30, 4, 0.25, 8, false, false).is_err());
        assert_eq!(c.shift_size(), 0);
        assert_eq!(AttentionConfig::new(64, 4, 0.25, 8, true, true).unwrap().shift_size(), 4);
    }

    #[test]
    fn relative_index_range_and_center() {
        for m in 1..6 {
            let idx = relative_position_index(m);
            let span = 2 * m - 1;
            assert_eq!(idx.len(), m.pow(4));
            assert!(idx.iter().all(|&i| i < span * span));
            let center = (m - 1) * span + (m - 1);
            for i in 0..m * m {
                assert_eq!(idx[i * m * m + i], center);
            }
        }
    }

    #[test]
    fn partition_shapes_and_round_trip() {
        let mut rng = Rng::new(3);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(randn(&mut rng, &[256, 5]));
        let p = window_partition(&mut g, x, 16, 16, 8).unwrap();
        assert_eq!(g.shape(p), &[4, 64, 5]);
        let r = window_reverse(&mut g, p, 16, 16, 8).unwrap();
        assert_eq!(g.value(r), g.value(x));
        let y = g.constant(randn(&mut rng, &[64, 3]));
        let p1 = window_partition(&mut g, y, 8, 8, 8).unwrap();
        assert_eq!(g.value(p1).data(), g.value(y).data());
        assert!(matches!(
            window_partition(&mut g, y, 8, 8, 3),
            Err(TensorError::NotDivisible { .. })
        ));
    }

    #[test]
    fn shift_index_map_and_round_trip() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = cyclic_shift(&mut g, x, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 3.0, 2.0, 1.0]);
        let mut rng = Rng::new(4);
        let z = g.constant(randn(&mut rng, &[3, 8, 8]));
        let s = cyclic_shift(&mut g, z, 4, 4).unwrap();
        let b = cyclic_shift(&mut g, s, -4, -4).unwrap();
        assert_eq!(g.value(b), g.value(z));
        let id = cyclic_shift(&mut g, z, 0, 0).unwrap();
        assert_eq!(g.value(id), g.value(z));
    }

    #[test]
    fn singleton_window_is_identity_on_values() {
        let mut rng = Rng::new(5);
        let mut g = Graph::<f64>::inference();
        let (q, k, v) = (
            g.constant(randn(&mut rng, &[16, 4])),
            g.constant(randn(&mut rng, &[16, 4])),
            g.constant(randn(&mut rng, &[16, 4])),
        );
        let tau = tau_const(&mut g, 2, 0.1);
        let b = g.constant(Tensor::zeros([1, 1]));
        let o = spsa_core(&mut g, q, k, v, 4, 4, 2, 1, 0, tau, Some(b)).unwrap();
        assert!(g.value(o.map).data().iter().all(|&p| p == 1.0));
        assert_eq!(g.value(o.out), g.value(v));
        assert!(matches!(
            spsa_core(&mut g, q, k, v, 4, 4, 2, 1, 0, tau, None),
            Err(TensorError::MissingBias)
        ));
    }

    #[test]
    fn chsa_unit_head_dim_is_identity_on_values() {
        let mut rng = Rng::new(6);
        let mut g = Graph::<f64>::inference();
        let (q, k, v) = (
            g.constant(randn(&mut rng, &[10, 3])),
            g.constant(randn(&mut rng, &[10, 3])),
            g.constant(randn(&mut rng, &[10, 3])),
        );
        let tau = tau_const(&mut g, 3, 0.1);
        let o = chsa_core(&mut g, q, k, v, 3, tau).unwrap();
        assert!(g.value(o.map).data().iter().all(|&p| p == 1.0));
        assert_eq!(g.value(o.out), g.value(v));
    }

    #[test]
    fn spsa_matches_dense_oracle() {
        // (h, w, heads, d, m, shift)
        for &(h, w, heads, d, m, s) in &[(2, 2, 1, 2, 2, 0), (2, 2, 2, 2, 2, 0), (2, 4, 2, 2, 2, 1), (4, 2, 1, 4, 2, 1)] {
            for seed in 0..3 {
                let mut rng = Rng::new(seed);
                let c = heads * d;
                let (qt, kt, vt) = (
                    randn(&mut rng, &[h * w, c]),
                    randn(&mut rng, &[h * w, c]),
                    randn(&mut rng, &[h * w, c]),
                );
                let taus: Vec<f64> = (0..heads).map(|_| rng.uniform_range(0.05, 1.0)).collect();
                let span = 2 * m - 1;
                let table: Vec<f64> = (0..span * span).map(|_| rng.normal()).collect();
                let mut g = Graph::<f64>::inference();
                let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
                let tau = g.constant(Tensor::new([heads], taus.clone()).unwrap());
                let tb = g.constant(Tensor::new([span * span], table.clone()).unwrap());
                let b = g.gather_rows(tb, &relative_position_index(m), &[m * m, m * m]).unwrap();
                let o = spsa_core(&mut g, q, k, v, h, w, heads, m, s, tau, Some(b)).unwrap();
                let want = spsa_oracle(&qt, &kt, &vt, h, w, heads, m, s, &taus, &table);
                assert_close(g.value(o.out).data(), &want, 1e-10);
            }
        }
    }

    #[test]
    fn chsa_matches_dense_oracle() {
        for &(n, heads, d) in &[(2, 1, 2), (8, 2, 4), (5, 3, 1), (8, 1, 4)] {
            for seed in 0..3 {
                let mut rng = Rng::new(100 + seed);
                let c = heads * d;
                let (qt, kt, vt) = (randn(&mut rng, &[n, c]), randn(&mut rng, &[n, c]), randn(&mut rng, &[n, c]));
                let taus: Vec<f64> = (0..heads).map(|_| rng.uniform_range(0.05, 1.0)).collect();
                let mut g = Graph::<f64>::inference();
                let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
                let tau = g.constant(Tensor::new([heads], taus.clone()).unwrap());
                let o = chsa_core(&mut g, q, k, v, heads, tau).unwrap();
                assert_close(g.value(o.out).data(), &chsa_oracle(&qt, &kt, &vt, heads, &taus), 1e-10);
            }
        }
    }

    #[test]
    fn maps_are_row_stochastic_and_scale_invariant() {
        let mut rng = Rng::new(7);
        let (qt, kt, vt) = (randn(&mut rng, &[64, 8]), randn(&mut rng, &[64, 8]), randn(&mut rng, &[64, 8]));
        let scales: Vec<f64> = (0..64).map(|_| rng.uniform_range(0.1, 10.0)).collect();
        let scaled = |t: &Tensor<f64>| Tensor::from_fn([64, 8], |i| t.data()[i] * scales[i / 8]);
        let run = |q: Tensor<f64>, k: Tensor<f64>| {
            let mut g = Graph::<f64>::inference();
            let (q, k, v) = (g.constant(q), g.constant(k), g.constant(vt.clone()));
            let tau = tau_const(&mut g, 2, 0.1);
            let b = g.constant(Tensor::zeros([16, 16]));
            let sp = spsa_core(&mut g, q, k, v, 8, 8, 2, 4, 0, tau, Some(b)).unwrap();
            let ch = chsa_core(&mut g, q, k, v, 2, tau).unwrap();
            (g.value(sp.map).clone(), g.value(ch.map).clone())
        };
        let (sp, ch) = run(qt.clone(), kt.clone());
        for (map, len) in [(&sp, 16), (&ch, 4)] {
            for row in map.data().chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let (sp5, _) = run(qt.scale(5.0), kt.clone());
        assert_close(sp.data(), sp5.data(), 1e-6);
        let (spq, _) = run(scaled(&qt), scaled(&kt));
        assert_close(sp.data(), spq.data(), 1e-6);
    }

    #[test]
    fn chsa_is_spatially_permutation_equivariant() {
        let mut rng = Rng::new(8);
        let n = 12;
        let (qt, kt, vt) = (randn(&mut rng, &[n, 4]), randn(&mut rng, &[n, 4]), randn(&mut rng, &[n, 4]));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let permute = |t: &Tensor<f64>| Tensor::from_fn([n, 4], |i| t.data()[perm[i / 4] * 4 + i % 4]);
        let run = |q, k, v| {
            let mut g = Graph::<f64>::inference();
            let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
            let tau = tau_const(&mut g, 2, 0.1);
            let o = chsa_core(&mut g, q, k, v, 2, tau).unwrap();
            (g.value(o.out).clone(), g.value(o.map).clone())
        };
        let (o, m) = run(qt.clone(), kt.clone(), vt.clone());
        let (op, mp) = run(permute(&qt), permute(&kt), permute(&vt));
        assert_close(permute(&o).data(), op.data(), 1e-12);
        assert_close(m.data(), mp.data(), 1e-12);
    }

    fn token_grad_support(spatial: bool, seed: u64) -> (Vec<f64>, usize) {
        let mut rng = Rng::new(seed);
        let (h, w, c, m) = (8, 8, 4, 4);
        let mut ps = ParamStore::<f64>::new();
        let qkv = Linear::new(&mut ps, "qkv", c, 3 * c, &mut rng);
        ps.map_all(|_, t| Tensor::from_fn(t.shape().to_vec(), |_| rng.normal() * 0.5));
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(randn(&mut rng, &[h * w, c]));
        let t = qkv.forward(&mut g, &ps, x).unwrap();
        let q = g.narrow(t, 1, 0, c).unwrap();
        let k = g.narrow(t, 1, c, c).unwrap();
        let v = g.narrow(t, 1, 2 * c, c).unwrap();
        let tau = tau_const(&mut g, 2, 0.5);
        let out = if spatial {
            let b = g.constant(Tensor::zeros([m * m, m * m]));
            spsa_core(&mut g, q, k, v, h, w, 2, m, 0, tau, Some(b)).unwrap().out
        } else {
            chsa_core(&mut g, q, k, v, 2, tau).unwrap().out
        };
        let tok = 9; // (1, 1)
        let row = g.narrow(out, 0, tok, 1).unwrap();
        let loss = g.sum(row);
        let gr = g.backward(loss).unwrap();
        let gx = gr.get(x).unwrap();
        let per_token = gx.data().chunks(c).map(|r| r.iter().map(|v| v.abs()).sum()).collect();
        (per_token, tok)
    }

    #[test]
    fn spsa_gradient_is_window_local() {
        for seed in 0..3 {
            let (g, _) = token_grad_support(true, seed);
            for (i, &v) in g.iter().enumerate() {
                let (y, x) = (i / 8, i % 8);
                if y >= 4 || x >= 4 {
                    assert_eq!(v, 0.0, "token {i} outside window leaked gradient");
                } else {
                    assert!(v > 0.0);
                }
            }
        }
    }

    #[test]
    fn chsa_gradient_is_global() {
        let mut nonzero = 0;
        let mut total = 0;
        for seed in 0..5 {
            let (g, _) = token_grad_support(false, seed);
            nonzero += g.iter().filter(|&&v| v != 0.0).count();
            total += g.len();
        }
        assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero}/{total}");
    }

    fn block(cfg: AttentionConfig, seed: u64) -> (ParamStore<f64>, DramitAttention) {
        let mut ps = ParamStore::new();
        let mut rng = Rng::new(seed);
        let a = DramitAttention::new(&mut ps, "attn", cfg, MobiVariParams::default(), &mut rng).unwrap();
        ps.map_all(|n, t| {
            if n.ends_with("log_tau") {
                t.clone()
            } else {
                Tensor::from_fn(t.shape().to_vec(), |_| rng.normal() * 0.2)
            }
        });
        (ps, a)
    }

    #[test]
    fn helper_with_empty_cache_equals_disabled() {
        let on = AttentionConfig::new(16, 4, 0.25, 4, true, true).unwrap();
        let off = AttentionConfig { helper: false, ..on };
        let (ps, a_on) = block(on, 11);
        let a_off = DramitAttention { config: off, ..a_on.clone() };
        let mut rng = Rng::new(12);
        let xt = randn(&mut rng, &[16, 8, 8]);
        let mut g1 = Graph::<f64>::inference();
        let x1 = g1.constant(xt.clone());
        let o1 = a_on.forward(&mut g1, &ps, x1, &ReciprocalCache::empty()).unwrap();
        let mut g2 = Graph::<f64>::inference();
        let x2 = g2.constant(xt);
        let o2 = a_off.forward(&mut g2, &ps, x2, &ReciprocalCache::empty()).unwrap();
        let bits = |g: &Graph<f64>, v| g.value(v).data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1, o1.mixed), bits(&g2, o2.mixed));
        assert!(!o1.cache.is_empty());
        assert!(o2.cache.is_empty());
        assert_eq!(g1.shape(o1.cache.prev_chsa.unwrap()), &[64, 4]);
        assert_eq!(g1.shape(o1.cache.prev_spsa.unwrap()), &[64, 1]);

        // a filled cache changes the helper block but not the disabled one
        let c1 = o1.cache;
        let y1 = a_on.forward(&mut g1, &ps, o1.mixed, &c1).unwrap();
        let y0 = a_on.forward(&mut g1, &ps, o1.mixed, &ReciprocalCache::empty()).unwrap();
        assert_ne!(g1.value(y1.mixed), g1.value(y0.mixed));
        let z1 = a_off.forward(&mut g1, &ps, o1.mixed, &c1).unwrap();
        let z0 = a_off.forward(&mut g1, &ps, o1.mixed, &ReciprocalCache::empty()).unwrap();
        assert_eq!(g1.value(z1.mixed), g1.value(z0.mixed));
    }

    #[test]
    fn pure_spatial_split_has_no_channel_branch() {
        let cfg = AttentionConfig::new(16, 4, 0.0, 4, false, true).unwrap();
        let (ps, a) = block(cfg, 13);
        assert!(a.proj_ch.is_none() && a.tau_ch.is_none());
        assert_eq!(a.num_params(), ps.num_scalars());
        let mut g = Graph::<f64>::inference();
        let x = g.constant(randn(&mut Rng::new(1), &[16, 8, 12]));
        let o = a.forward(&mut g, &ps, x, &ReciprocalCache::empty()).unwrap();
        assert_eq!(g.shape(o.mixed), &[16, 8, 12]);
        assert!(o.ch_map.is_none() && o.cache.is_empty());
    }

    #[test]
    fn param_count_matches_store() {
        let cfg = AttentionConfig::new(64, 4, 0.25, 8, false, true).unwrap();
        let mut ps = ParamStore::<f32>::new();
        let a = DramitAttention::new(&mut ps, "a", cfg, MobiVariParams::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(a.num_params(), ps.num_scalars());
    }

    #[test]
    fn tau_floor_holds() {
        let mut ps = ParamStore::<f64>::new();
        let t = TauScale::new(&mut ps, "t", 3);
        assert!(t.values(&ps).iter().all(|&v| (v - TAU_INIT).abs() < 1e-12));
        ps.set(t.param, Tensor::from_f64([3], &[-100.0, -4.7, 2.0]).unwrap());
        let mut g = Graph::new();
        let e = t.effective(&mut g, &ps);
        for &v in g.value(e).data() {
            assert!(v > TAU_FLOOR - 1e-9);
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(complexity(ComplexityKind::Spsa, 8, 8, 4, 8, 1), 36_864);
        assert_eq!(complexity(ComplexityKind::Chsa, 8, 8, 4, 8, 1), 6_144);
        for (c, l, m) in [(64, 4, 8), (48, 4, 8), (16, 2, 4)] {
            assert!(c / l < m * m);
            assert!(complexity(ComplexityKind::Chsa, 32, 32, c, m, l) < complexity(ComplexityKind::Spsa, 32, 32, c, m, l));
        }
        let sp = AttentionConfig::with_split(4, 1, 0, 8, false, false).unwrap();
        assert_eq!(dramit_complexity(&sp, 8, 8), 36_864);
        let ch = AttentionConfig::with_split(4, 0, 1, 8, false, false).unwrap();
        assert_eq!(dramit_complexity(&ch, 8, 8), 6_144);
    }

    #[test]
    fn instrumented_core_count_equals_closed_form() {
        let cases = [
            AttentionConfig::with_split(4, 1, 0, 8, false, false).unwrap(),
            AttentionConfig::with_split(4, 0, 1, 8, false, false).unwrap(),
            AttentionConfig::new(16, 4, 0.25, 4, true, true).unwrap(),
            AttentionConfig::new(12, 3, 0.34, 4, false, false).unwrap(),
        ];
        for cfg in cases {
            let (ps, a) = block(cfg, 21);
            let mut g = Graph::<f64>::inference();
            let x = g.constant(randn(&mut Rng::new(2), &[cfg.channels, 8, 8]));
            a.forward(&mut g, &ps, x, &ReciprocalCache::empty()).unwrap();
            assert_eq!(g.macs(CORE), dramit_complexity(&cfg, 8, 8), "{cfg:?}");
            assert_eq!(g.macs(MIXER), a.mixer.macs(8, 8));
            assert_eq!(g.macs(HELPER), 0);
        }
        assert_eq!(
            dramit_complexity(&AttentionConfig::with_split(4, 1, 0, 8, false, false).unwrap(), 8, 8),
            complexity(ComplexityKind::Spsa, 8, 8, 4, 8, 1)
        );
    }
}
