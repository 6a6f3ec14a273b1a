//! Binary Netpbm (P5 gray, P6 RGB) with maxval 255.

use std::path::Path;

use crate::tensor::{Element, Tensor};

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved, row-major.
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, PipelineError> {
        if channels != 1 && channels != 3 {
            return Err(PipelineError::UnsupportedFormat(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(PipelineError::TruncatedData {
                expected: width * height * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Planar `[C, H, W]` in `[0, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (c, h, w) = (self.channels, self.height, self.width);
        Tensor::from_fn([c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            T::c(self.data[p * c + ch] as f64 / 255.0)
        })
    }

    /// Clamps to `[0, 1]` and rounds to the nearest level.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self, PipelineError> {
        let s = t.shape();
        if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
            return Err(PipelineError::ShapeMismatch(format!("cannot write a {s:?} tensor as an image")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let v = t.data()[ch * h * w + p].f64().clamp(0.0, 1.0);
                data[p * c + ch] = (v * 255.0).round() as u8;
            }
        }
        Self::new(w, h, c, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PipelineError> {
        if bytes.len() < 2 || bytes[0] != b'P' {
            return Err(PipelineError::UnsupportedFormat("not a Netpbm file".into()));
        }
        let channels = match bytes[1] {
            b'5' => 1,
            b'6' => 3,
            k => return Err(PipelineError::UnsupportedFormat(format!("P{} (only binary P5/P6)", k as char))),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in fields.iter_mut() {
            skip_space_and_comments(bytes, &mut pos)?;
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos {
                return Err(PipelineError::CorruptHeader(format!("expected a number at byte {start}")));
            }
            *f = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|e| PipelineError::CorruptHeader(format!("{e}")))?;
        }
        let [width, height, maxval] = fields;
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(PipelineError::CorruptHeader("missing whitespace after maxval".into()));
        }
        pos += 1;
        if maxval != 255 {
            return Err(PipelineError::UnsupportedFormat(format!("maxval {maxval} (only 255)")));
        }
        if width == 0 || height == 0 {
            return Err(PipelineError::CorruptHeader("zero image dimension".into()));
        }
        let need = width * height * channels;
        let data = &bytes[pos..];
        if data.len() < need {
            return Err(PipelineError::TruncatedData {
                expected: need,
                got: data.len(),
            });
        }
        Self::new(width, height, channels, data[..need].to_vec())
    }
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) -> Result<(), PipelineError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            Some(_) => return Ok(()),
            None => return Err(PipelineError::CorruptHeader("header ends early".into())),
        }
    }
}

pub fn load_image(path: &Path) -> Result<ImageBuffer, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    ImageBuffer::decode(&bytes)
}

pub fn save_image(buf: &ImageBuffer, path: &Path) -> Result<(), PipelineError> {
    super::write_atomic(path, &buf.encode()).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}
