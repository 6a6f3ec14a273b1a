//! Index-remapping kernels: permute, concat, narrow, roll, pixel (un)shuffle, gather.

use super::{numel, strides, Element, Result, Tensor, TensorError};

impl<T: Element> Tensor<T> {
    /// Materialized axis permutation: `out.shape[i] = self.shape[perm[i]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let src_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let st: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        if rank == 0 || n == 0 {
            return Ok(Tensor::from_parts(out_shape, self.data().to_vec()));
        }
        let last = out_shape[rank - 1];
        let ls = st[rank - 1];
        let mut idx = vec![0usize; rank];
        let src = self.data();
        for _ in 0..n / last {
            let base: usize = (0..rank - 1).map(|d| idx[d] * st[d]).sum();
            if ls == 1 {
                out.extend_from_slice(&src[base..base + last]);
            } else {
                out.extend((0..last).map(|j| src[base + j * ls]));
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        first.check_axis(axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            shape[axis] += p.dim(axis);
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.dim(axis) * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_parts(shape, out))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis(axis)?;
        if start + len > self.dim(axis) {
            return Err(TensorError::Invalid(format!(
                "narrow [{start}, {}) exceeds axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.dim(axis) * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Inverse of [`narrow`](Self::narrow): embeds `self` into zeros of length `full` along `axis`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let len = self.dim(axis);
        if start + len > full {
            return Err(TensorError::Invalid("pad_axis range exceeds target".into()));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut out = vec![T::zero(); numel(&shape)];
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            out[dst..dst + len * inner]
                .copy_from_slice(&self.data()[o * len * inner..(o + 1) * len * inner]);
        }
        Ok(Tensor::from_parts(shape, out))
    }

    /// Toroidal roll: `out[.., (i + shift) mod n, ..] = in[.., i, ..]` for each listed axis.
    pub fn roll(&self, axes: &[usize], shifts: &[isize]) -> Result<Self> {
        for &a in axes {
            self.check_axis(a)?;
        }
        let rank = self.rank();
        let mut shift = vec![0usize; rank];
        for (&a, &s) in axes.iter().zip(shifts) {
            let n = self.dim(a) as isize;
            shift[a] = s.rem_euclid(n.max(1)) as usize;
        }
        if shift.iter().all(|&s| s == 0) {
            return Ok(self.clone());
        }
        let st = strides(self.shape());
        let mut out = vec![T::zero(); self.numel()];
        let mut idx = vec![0usize; rank];
        for &v in self.data() {
            let mut off = 0;
            for d in 0..rank {
                let mut j = idx[d] + shift[d];
                if j >= self.shape()[d] {
                    j -= self.shape()[d];
                }
                off += j * st[d];
            }
            out[off] = v;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < self.shape()[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor::from_parts(self.shape().to_vec(), out))
    }

    /// `[C·r², H, W] -> [C, rH, rW]` with `out[c, r·i+di, r·j+dj] = in[c·r² + di·r + dj, i, j]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Self> {
        if self.rank() != 3 {
            return Err(TensorError::Invalid(format!(
                "pixel_shuffle expects [C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (cr, h, w) = (self.dim(0), self.dim(1), self.dim(2));
        if r == 0 || cr % (r * r) != 0 {
            return Err(TensorError::ChannelNotDivisible {
                channels: cr,
                factor: r * r,
            });
        }
        let c = cr / (r * r);
        self.reshape([c, r, r, h, w])?
            .permute(&[0, 3, 1, 4, 2])?
            .reshape([c, h * r, w * r])
    }

    /// `[C, rH, rW] -> [C·r², H, W]`, the exact inverse of [`pixel_shuffle`](Self::pixel_shuffle).
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Self> {
        if self.rank() != 3 {
            return Err(TensorError::Invalid(format!(
                "pixel_unshuffle expects [C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (c, hr, wr) = (self.dim(0), self.dim(1), self.dim(2));
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(TensorError::NotDivisible {
                height: hr,
                width: wr,
                window: r,
            });
        }
        let (h, w) = (hr / r, wr / r);
        self.reshape([c, h, r, w, r])?
            .permute(&[0, 2, 4, 1, 3])?
            .reshape([c * r * r, h, w])
    }

    /// Row lookup: `out[..idx, ..row] = self[idx[..], ..]` where `self` is `[rows, ..]`.
    pub fn gather_rows(&self, index: &[usize], index_shape: &[usize]) -> Result<Self> {
        let rows = self.shape().first().copied().unwrap_or(0);
        let row: usize = self.shape()[1..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!(
                "gather index {bad} out of range {rows}"
            )));
        }
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        let mut shape = index_shape.to_vec();
        shape.extend_from_slice(&self.shape()[1..]);
        Ok(Tensor::from_parts(shape, out))
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): scatter-add rows into a table shaped `table_shape`.
    pub fn scatter_add_rows(&self, index: &[usize], table_shape: &[usize]) -> Self {
        let row: usize = table_shape[1..].iter().product();
        let mut out = vec![T::zero(); numel(table_shape)];
        for (k, &i) in index.iter().enumerate() {
            let src = &self.data()[k * row..(k + 1) * row];
            for (d, &s) in out[i * row..(i + 1) * row].iter_mut().zip(src) {
                *d += s;
            }
        }
        Tensor::from_parts(table_shape.to_vec(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_shape_law() {
        let x = Tensor::<f32>::zeros([4, 2, 2]);
        assert_eq!(x.pixel_shuffle(2).unwrap().shape(), &[1, 4, 4]);
    }

    #[test]
    fn shuffle_index_map() {
        // out[c, r*i+di, r*j+dj] = in[c*r*r + di*r + dj, i, j]
        let x = Tensor::<f64>::from_fn([4, 2, 2], |i| (i / 4) as f64);
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.at(&[0, 0, 0]), 0.0);
        assert_eq!(y.at(&[0, 0, 1]), 1.0);
        assert_eq!(y.at(&[0, 1, 0]), 2.0);
        assert_eq!(y.at(&[0, 1, 1]), 3.0);
        let brute = Tensor::<f64>::from_fn([2, 6, 6], |k| {
            let (c, rest) = (k / 36, k % 36);
            let (y, x) = (rest / 6, rest % 6);
            let (i, di, j, dj) = (y / 3, y % 3, x / 3, x % 3);
            (((c * 9 + di * 3 + dj) * 2 + i) * 2 + j) as f64
        });
        let src = Tensor::<f64>::from_fn([18, 2, 2], |i| i as f64);
        assert_eq!(src.pixel_shuffle(3).unwrap(), brute);
    }

    #[test]
    fn shuffle_rejects_bad_channels() {
        let x = Tensor::<f32>::zeros([6, 2, 2]);
        assert!(matches!(
            x.pixel_shuffle(2),
            Err(TensorError::ChannelNotDivisible { .. })
        ));
    }

    #[test]
    fn roll_two_by_two() {
        // [[a,b],[c,d]] rolled (1,1) -> [[d,c],[b,a]]
        let x = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.roll(&[1, 2], &[1, 1]).unwrap();
        assert_eq!(y.data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn concat_narrow_inverse() {
        let a = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn([2, 1], |i| 100.0 + i as f64);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(c.data(), &[0.0, 1.0, 2.0, 100.0, 3.0, 4.0, 5.0, 101.0]);
        assert_eq!(c.narrow(1, 0, 3).unwrap(), a);
        assert_eq!(c.narrow(1, 3, 1).unwrap(), b);
        assert_eq!(b.pad_axis(1, 3, 4).unwrap().narrow(1, 3, 1).unwrap(), b);
    }

    #[test]
    fn permute_matches_index_oracle() {
        let x = Tensor::<f64>::from_fn([2, 3, 4], |i| i as f64);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let table = Tensor::<f64>::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        let idx = [2, 0, 2, 1];
        let g = table.gather_rows(&idx, &[2, 2]).unwrap();
        assert_eq!(g.data(), &[3.0, 1.0, 3.0, 2.0]);
        let back = Tensor::<f64>::ones([2, 2]).scatter_add_rows(&idx, &[3]);
        assert_eq!(back.data(), &[1.0, 1.0, 2.0]);
    }
}
