//! Compute kernels: batched matmul, softmax, layer norm, grouped 2-D convolution.

use super::{broadcast_shapes, numel, Element, Result, Tensor, TensorError};

/// Single-image 2-D convolution parameters (stride 1, zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub groups: usize,
    pub padding: usize,
}

pub fn conv2d_output_shape(
    input: &[usize],
    weight: &[usize],
    spec: Conv2dSpec,
) -> Result<[usize; 3]> {
    if input.len() != 3 || weight.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    let (cin, h, w) = (input[0], input[1], input[2]);
    let (cout, cpg, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    let g = spec.groups;
    if g == 0 || cin % g != 0 {
        return Err(TensorError::GroupMismatch { channels: cin, groups: g });
    }
    if cout % g != 0 {
        return Err(TensorError::GroupMismatch { channels: cout, groups: g });
    }
    if cpg != cin / g || h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    Ok([cout, h + 2 * spec.padding + 1 - kh, w + 2 * spec.padding + 1 - kw])
}

/// `dst[..n] += a * src[..n]`
#[inline]
fn axpy<T: Element>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Valid output range along one axis for kernel tap `k` with padding `p`:
/// output positions `o` with `0 <= o + k - p < n_in`.
#[inline]
fn tap_range(k: usize, p: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k);
    let hi = (n_in + p).saturating_sub(k).min(n_out);
    (lo, hi.max(lo))
}

impl<T: Element> Tensor<T> {
    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.dim(ra - 2), self.dim(ra - 1));
        let (k2, n) = (other.dim(rb - 2), other.dim(rb - 1));
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &self.shape()[..ra - 2];
        let bb = &other.shape()[..rb - 2];
        let batch = broadcast_shapes(ba, bb).ok_or_else(mismatch)?;
        let nb = numel(&batch);
        let a_index = batch_index_map(ba, &batch);
        let b_index = batch_index_map(bb, &batch);
        let mut out = vec![T::zero(); nb * m * n];
        let (a, b) = (self.data(), other.data());
        for bi in 0..nb {
            let ao = a_index[bi] * m * k;
            let bo = b_index[bi] * k * n;
            let oo = bi * m * n;
            for i in 0..m {
                let row = &mut out[oo + i * n..oo + (i + 1) * n];
                for p in 0..k {
                    let av = a[ao + i * k + p];
                    if av != T::zero() {
                        axpy(row, av, &b[bo + p * n..bo + (p + 1) * n]);
                    }
                }
            }
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        Ok(Tensor::from_parts(shape, out))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let outer: usize = self.shape()[..axis].iter().product();
        let len = self.dim(axis);
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = self.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(out[at(a)]);
                }
                let mut s = T::zero();
                for a in 0..len {
                    let e = (out[at(a)] - mx).exp();
                    out[at(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    out[at(a)] /= s;
                }
            }
        }
        Ok(Tensor::from_parts(self.shape().to_vec(), out))
    }

    /// Grouped cross-correlation of `[C_in,H,W]` with `[C_out, C_in/g, kh, kw]`.
    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, spec: Conv2dSpec) -> Result<Self> {
        let [cout, oh, ow] = conv2d_output_shape(self.shape(), weight.shape(), spec)?;
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (cin, h, w) = (self.dim(0), self.dim(1), self.dim(2));
        let (kh, kw) = (weight.dim(2), weight.dim(3));
        let g = spec.groups;
        let (cpg_in, cpg_out) = (cin / g, cout / g);
        let p = spec.padding;
        let x = self.data();
        let wt = weight.data();
        let mut out = vec![T::zero(); cout * oh * ow];
        for oc in 0..cout {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            if let Some(b) = bias {
                plane.fill(b.data()[oc]);
            }
            let grp = oc / cpg_out;
            for icl in 0..cpg_in {
                let ic = grp * cpg_in + icl;
                let xin = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = tap_range(ky, p, h, oh);
                    for kx in 0..kw {
                        let wv = wt[((oc * cpg_in + icl) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = tap_range(kx, p, w, ow);
                        for y in y0..y1 {
                            let iy = y + ky - p;
                            let src = &xin[iy * w + x0 + kx - p..iy * w + x1 + kx - p];
                            axpy(&mut plane[y * ow + x0..y * ow + x1], wv, src);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![cout, oh, ow], out))
    }

    /// Gradients of [`conv2d`](Self::conv2d) w.r.t. input, weight and bias given `grad_out`.
    pub fn conv2d_backward(
        &self,
        weight: &Self,
        grad_out: &Self,
        spec: Conv2dSpec,
        need_input: bool,
        need_weight: bool,
    ) -> (Option<Self>, Option<Self>, Self) {
        let (cin, h, w) = (self.dim(0), self.dim(1), self.dim(2));
        let (cout, cpg_in, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        let (oh, ow) = (grad_out.dim(1), grad_out.dim(2));
        let cpg_out = cout / spec.groups;
        let p = spec.padding;
        let (x, wt, go) = (self.data(), weight.data(), grad_out.data());
        let mut gx = need_input.then(|| vec![T::zero(); cin * h * w]);
        let mut gw = need_weight.then(|| vec![T::zero(); weight.numel()]);
        let mut gb = vec![T::zero(); cout];
        for oc in 0..cout {
            let gplane = &go[oc * oh * ow..(oc + 1) * oh * ow];
            gb[oc] = gplane.iter().copied().sum();
            let grp = oc / cpg_out;
            for icl in 0..cpg_in {
                let ic = grp * cpg_in + icl;
                for ky in 0..kh {
                    let (y0, y1) = tap_range(ky, p, h, oh);
                    for kx in 0..kw {
                        let widx = ((oc * cpg_in + icl) * kh + ky) * kw + kx;
                        let (x0, x1) = tap_range(kx, p, w, ow);
                        if let Some(gx) = gx.as_mut() {
                            let wv = wt[widx];
                            if wv != T::zero() {
                                for y in y0..y1 {
                                    let iy = y + ky - p;
                                    let base = ic * h * w + iy * w + kx;
                                    axpy(
                                        &mut gx[base + x0 - p..base + x1 - p],
                                        wv,
                                        &gplane[y * ow + x0..y * ow + x1],
                                    );
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let iy = y + ky - p;
                                let base = ic * h * w + iy * w + kx;
                                acc += dot(&gplane[y * ow + x0..y * ow + x1], &x[base + x0 - p..base + x1 - p]);
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        (
            gx.map(|d| Tensor::from_parts(vec![cin, h, w], d)),
            gw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
            Tensor::from_parts(vec![cout], gb),
        )
    }
}

/// For each flattened index of `batch`, the flattened index into the (broadcast) `own` batch shape.
fn batch_index_map(own: &[usize], batch: &[usize]) -> Vec<usize> {
    let nb = numel(batch);
    if own == batch {
        return (0..nb).collect();
    }
    let offset = batch.len() - own.len();
    let own_strides = super::strides(own);
    let bstr = super::strides(batch);
    (0..nb)
        .map(|flat| {
            let mut off = 0;
            for d in 0..batch.len() {
                let i = (flat / bstr[d]) % batch[d];
                if d >= offset && own[d - offset] != 1 {
                    off += i * own_strides[d - offset];
                }
            }
            off
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let i2 = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap(), m);
        let r = Tensor::<f64>::from_f64([1, 2], &[1.0, 0.0]).unwrap();
        let c = Tensor::<f64>::from_f64([2, 1], &[0.0, 1.0]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        for seed in 0..5 {
            let a = Tensor::<f64>::from_fn([3, 3], lcg(seed));
            let b = Tensor::<f64>::from_fn([3, 3], lcg(seed + 100));
            let c = a.matmul(&b).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += a.at(&[i, k]) * b.at(&[k, j]);
                    }
                    assert!((c.at(&[i, j]) - s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let a = Tensor::<f64>::from_fn([2, 3, 2, 4], lcg(1));
        let b = Tensor::<f64>::from_fn([3, 4, 5], lcg(2));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2, 5]);
        let a1 = a.narrow(0, 1, 1).unwrap().narrow(1, 2, 1).unwrap().reshape([2, 4]).unwrap();
        let b1 = b.narrow(0, 2, 1).unwrap().reshape([4, 5]).unwrap();
        let c1 = c.narrow(0, 1, 1).unwrap().narrow(1, 2, 1).unwrap().reshape([2, 5]).unwrap();
        assert_eq!(a1.matmul(&b1).unwrap(), c1);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::<f64>::zeros([4]);
        assert_eq!(x.softmax(0).unwrap().data(), &[0.25; 4]);
        let x = Tensor::<f64>::from_f64([2], &[2f64.ln(), 0.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-12);
        let x = Tensor::<f32>::from_f64([2], &[1000.0, 0.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        assert!(Tensor::<f32>::zeros([2]).softmax(1).is_err());
    }

    #[test]
    fn one_by_one_permutation_conv() {
        let x = Tensor::<f64>::from_fn([3, 2, 2], |i| i as f64);
        // out channel o reads input channel perm[o]
        let perm = [2, 0, 1];
        let w = Tensor::<f64>::from_fn([3, 3, 1, 1], |i| if perm[i / 3] == i % 3 { 1.0 } else { 0.0 });
        let y = x.conv2d(&w, None, Conv2dSpec { groups: 1, padding: 0 }).unwrap();
        for (o, &src) in perm.iter().enumerate() {
            assert_eq!(y.narrow(0, o, 1).unwrap().data(), x.narrow(0, src, 1).unwrap().data());
        }
    }

    #[test]
    fn depthwise_ones_on_one_hot() {
        let mut x = Tensor::<f64>::zeros([2, 3, 3]);
        x.data_mut()[4] = 1.0; // channel 0, center
        x.data_mut()[9] = 1.0; // channel 1, top-left
        let w = Tensor::<f64>::ones([2, 1, 3, 3]);
        let y = x.conv2d(&w, None, Conv2dSpec { groups: 2, padding: 1 }).unwrap();
        // direct convolution oracle
        for c in 0..2 {
            for oy in 0..3i64 {
                for ox in 0..3i64 {
                    let mut s = 0.0;
                    for ky in -1..=1i64 {
                        for kx in -1..=1i64 {
                            let (iy, ix) = (oy + ky, ox + kx);
                            if (0..3).contains(&iy) && (0..3).contains(&ix) {
                                s += x.at(&[c, iy as usize, ix as usize]);
                            }
                        }
                    }
                    assert_eq!(y.at(&[c, oy as usize, ox as usize]), s);
                }
            }
        }
        assert!(y.narrow(0, 0, 1).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(y.narrow(0, 1, 1).unwrap().data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_group_mismatch() {
        let x = Tensor::<f32>::zeros([6, 4, 4]);
        let w = Tensor::<f32>::zeros([4, 3, 1, 1]);
        assert!(matches!(
            x.conv2d(&w, None, Conv2dSpec { groups: 4, padding: 0 }),
            Err(TensorError::GroupMismatch { .. })
        ));
    }

    #[test]
    fn grouped_conv_matches_naive() {
        let x = Tensor::<f64>::from_fn([4, 5, 6], lcg(3));
        let w = Tensor::<f64>::from_fn([6, 2, 3, 3], lcg(4));
        let b = Tensor::<f64>::from_fn([6], lcg(5));
        let spec = Conv2dSpec { groups: 2, padding: 1 };
        let y = x.conv2d(&w, Some(&b), spec).unwrap();
        for oc in 0..6 {
            let g = oc / 3;
            for oy in 0..5 {
                for ox in 0..6 {
                    let mut s = b.data()[oc];
                    for icl in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as i64 + ky as i64 - 1;
                                let ix = ox as i64 + kx as i64 - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    s += w.at(&[oc, icl, ky, kx])
                                        * x.at(&[g * 2 + icl, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[oc, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }
}
