//! The frame type flowing through the pipeline: an 8-bit image with a
//! timestamp index, shared cheaply between stages via `Arc`.

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame data length {got} does not match {width}x{height}x{channels}")]
    BadDataLength {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    BadChannels(usize),
}

/// A grayscale or RGB frame with row-major 8-bit samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub index: u64,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Arc<Vec<u8>>,
}

impl Frame {
    pub fn new(
        index: u64,
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, FrameError> {
        if channels != 1 && channels != 3 {
            return Err(FrameError::BadChannels(channels));
        }
        if data.len() != width * height * channels {
            return Err(FrameError::BadDataLength {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        Ok(Self {
            index,
            width,
            height,
            channels,
            data: Arc::new(data),
        })
    }

    pub fn filled(index: u64, width: usize, height: usize, value: u8) -> Self {
        Self::new(index, width, height, 1, vec![value; width * height]).unwrap()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn sample_u8(&self, x: usize, y: usize, ch: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    /// Single-channel luma view as f32 in [0, 1]; RGB uses BT.601 weights.
    pub fn to_luma_f32(&self) -> GrayImage {
        let mut pix = vec![0.0f32; self.width * self.height];
        match self.channels {
            1 => {
                for (dst, &src) in pix.iter_mut().zip(self.data.iter()) {
                    *dst = src as f32 / 255.0;
                }
            }
            _ => {
                for (i, dst) in pix.iter_mut().enumerate() {
                    let r = self.data[3 * i] as f32;
                    let g = self.data[3 * i + 1] as f32;
                    let b = self.data[3 * i + 2] as f32;
                    *dst = (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
                }
            }
        }
        GrayImage {
            width: self.width,
            height: self.height,
            pix,
        }
    }

    pub fn with_index(&self, index: u64) -> Frame {
        let mut f = self.clone();
        f.index = index;
        f
    }
}

/// A float grayscale image with clamped border access.
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pix: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pix: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pix[y * self.width + x]
    }

    /// Border-clamped integer access.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y)
    }

    /// Border-clamped bilinear sample at real coordinates.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let xf = x.clamp(0.0, (self.width - 1) as f32);
        let yf = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xf - x0 as f32;
        let fy = yf - y0 as f32;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// 2x downscale by box averaging (odd trailing row/col folded into the
    /// last output cell through clamping).
    pub fn half_size(&self) -> GrayImage {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut out = GrayImage::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let x0 = 2 * x;
                let y0 = 2 * y;
                let x1 = (x0 + 1).min(self.width - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                out.pix[y * w + x] =
                    0.25 * (self.at(x0, y0) + self.at(x1, y0) + self.at(x0, y1) + self.at(x1, y1));
            }
        }
        out
    }
}
