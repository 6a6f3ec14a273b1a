//! Synthetic degradation and geometric sampling of `[C, H, W]` images.

use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::PipelineError;

pub const MAX_SIGMA: f64 = 50.0;

/// Adds `N(0, (σ/255)²)` noise per element; values are not clipped.
pub fn awgn_degrade<T: Element>(hq: &Tensor<T>, sigma: f64, rng: &mut Rng) -> Tensor<T> {
    if sigma == 0.0 {
        return hq.clone();
    }
    let s = sigma / 255.0;
    let d = hq.data();
    Tensor::from_fn(hq.shape().to_vec(), |i| T::c(d[i].f64() + s * rng.normal()))
}

/// Box-filter downsampling by an integer factor (stand-in LQ for upscaling when no pair is given).
pub fn box_downsample<T: Element>(hq: &Tensor<T>, r: usize) -> Tensor<T> {
    let (c, h, w) = (hq.dim(0), hq.dim(1) / r, hq.dim(2) / r);
    let (hh, ww) = (hq.dim(1), hq.dim(2));
    let inv = 1.0 / (r * r) as f64;
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let mut s = 0.0;
        for dy in 0..r {
            for dx in 0..r {
                s += hq.data()[ch * hh * ww + (y * r + dy) * ww + x * r + dx].f64();
            }
        }
        T::c(s * inv)
    })
}

/// Element `R^rot · F^flip` of the dihedral group of the square, where `F`
/// mirrors columns and `R` rotates a quarter turn counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(Self::from_index)
    }

    pub fn from_index(k: u8) -> Self {
        Self {
            rot: k % 4,
            flip: k >= 4,
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        Self::from_index(rng.below(8) as u8)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Self) -> Self {
        let r2 = if self.flip { (4 - other.rot) % 4 } else { other.rot };
        Self {
            rot: (self.rot + r2) % 4,
            flip: self.flip ^ other.flip,
        }
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Self {
                rot: (4 - self.rot) % 4,
                flip: false,
            }
        }
    }

    pub fn apply<T: Element>(self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = if self.flip { mirror(x) } else { x.clone() };
        for _ in 0..self.rot {
            y = rot90(&y);
        }
        y
    }
}

fn mirror<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
        x.data()[ch * h * w + y * w + (w - 1 - xx)]
    })
}

/// `out[c, i, j] = in[c, j, W−1−i]`
fn rot90<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    Tensor::from_fn([c, w, h], |i| {
        let (ch, r, col) = (i / (h * w), (i / h) % w, i % h);
        x.data()[ch * h * w + col * w + (w - 1 - r)]
    })
}

fn check_aligned<T: Element>(hq: &Tensor<T>, lq: &Tensor<T>, r: usize) -> Result<(), PipelineError> {
    let (a, b) = (hq.shape(), lq.shape());
    if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[1] != r * b[1] || a[2] != r * b[2] {
        return Err(PipelineError::MisalignedPair {
            hq: a.to_vec(),
            lq: b.to_vec(),
            scale: r,
        });
    }
    Ok(())
}

/// One random dihedral transform applied to both images of an aligned pair.
pub fn augment<T: Element>(hq: &Tensor<T>, lq: &Tensor<T>, r: usize, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>, Dihedral), PipelineError> {
    check_aligned(hq, lq, r)?;
    let d = Dihedral::sample(rng);
    Ok((d.apply(hq), d.apply(lq), d))
}

/// Aligned random crop: `p × p` from `lq` and the matching `rp × rp` from `hq`.
pub fn crop_patch<T: Element>(hq: &Tensor<T>, lq: &Tensor<T>, p: usize, r: usize, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>), PipelineError> {
    check_aligned(hq, lq, r)?;
    let (h, w) = (lq.dim(1), lq.dim(2));
    if p == 0 || p > h || p > w {
        return Err(PipelineError::PatchTooLarge { patch: p, height: h, width: w });
    }
    let y = rng.below(h - p + 1);
    let x = rng.below(w - p + 1);
    Ok((crop(hq, r * y, r * x, r * p, r * p), crop(lq, y, x, p, p)))
}

pub fn crop<T: Element>(t: &Tensor<T>, y: usize, x: usize, h: usize, w: usize) -> Tensor<T> {
    t.narrow(1, y, h).and_then(|v| v.narrow(2, x, w)).expect("crop inside bounds")
}

/// Symmetric reflection index for a coordinate past the end.
fn reflect(i: usize, n: usize) -> usize {
    let j = i % (2 * n);
    if j < n {
        j
    } else {
        2 * n - 1 - j
    }
}

/// Mirror-pads right and bottom up to multiples of `m`; returns the original `(H, W)`.
pub fn pad_to_multiple<T: Element>(x: &Tensor<T>, m: usize) -> (Tensor<T>, (usize, usize)) {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let m = m.max(1);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return (x.clone(), (h, w));
    }
    let out = Tensor::from_fn([c, ph, pw], |i| {
        let (ch, y, xx) = (i / (ph * pw), (i / pw) % ph, i % pw);
        x.data()[ch * h * w + reflect(y, h) * w + reflect(xx, w)]
    });
    (out, (h, w))
}

/// Crops back to the original size, scaled by `r` for upscaling tasks.
pub fn crop_back<T: Element>(y: &Tensor<T>, original: (usize, usize), r: usize) -> Tensor<T> {
    crop(y, 0, 0, original.0 * r, original.1 * r)
}
