use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::{Element, Result, Tensor};

pub const MIN_STD: f64 = 1e-3;

/// Per-channel input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Pooled statistics over `[C, H, W]` images; std is floored at [`MIN_STD`].
    pub fn compute<'a, T: Element + 'a>(images: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let mut sum = Vec::new();
        let mut sq = Vec::new();
        let mut count = 0usize;
        for t in images {
            let (c, hw) = (t.dim(0), t.dim(1) * t.dim(2));
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            }
            for ch in 0..c.min(sum.len()) {
                for v in &t.data()[ch * hw..(ch + 1) * hw] {
                    let v = v.f64();
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += hw;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn per_channel<T: Element>(&self, t: &Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) -> Tensor<T> {
        let hw = t.dim(1) * t.dim(2);
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let c = i / hw;
            T::c(f(t.data()[i].f64(), self.mean[c], self.std[c]))
        })
    }

    pub fn normalize<T: Element>(&self, t: &Tensor<T>) -> Tensor<T> {
        self.per_channel(t, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<T: Element>(&self, t: &Tensor<T>) -> Tensor<T> {
        self.per_channel(t, |v, m, s| v * s + m)
    }

    /// `y · std + mean` on the tape.
    pub fn denormalize_var<T: Element>(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        let c = self.channels();
        let s = g.constant(Tensor::from_f64([c, 1, 1], &self.std)?);
        let m = g.constant(Tensor::from_f64([c, 1, 1], &self.mean)?);
        let ys = g.mul(y, s)?;
        g.add(ys, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_and_moments() {
        let mut r = Rng::new(0);
        let imgs: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::from_fn([3, 8, 8], |i| 0.2 * (i / 64) as f64 + 0.1 * r.normal()))
            .collect();
        let st = NormStats::compute(&imgs);
        assert!(st.std.iter().all(|&s| s > 0.0));
        let z: Vec<Tensor<f64>> = imgs.iter().map(|t| st.normalize(t)).collect();
        let zs = NormStats::compute(&z);
        for c in 0..3 {
            assert!(zs.mean[c].abs() < 1e-12);
            assert!((zs.std[c] - 1.0).abs() < 1e-12);
        }
        let back = st.denormalize(&z[1]);
        for (a, b) in back.data().iter().zip(imgs[1].data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = NormStats::compute([&Tensor::<f64>::full([1, 2, 2], 0.5)]);
        assert_eq!(flat.std, vec![MIN_STD]);
    }
}
