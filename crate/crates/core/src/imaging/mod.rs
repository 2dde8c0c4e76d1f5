//! 8-bit images, file I/O, and quality metrics on the luminance channel.

mod io;
mod metrics;

pub use io::{decode_image, decode_pgm, decode_png, encode_pgm, read_image, read_pgm, read_png, write_pgm, write_png};
pub use metrics::{psnr, quality, ssim, Quality, PSNR_IDENTICAL};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Row-major, channel-interleaved 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{}x{})", self.width, self.height, self.channels)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::dim("image", "element", width * height * channels, data.len()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Image::new(width, height, 1, data)
    }

    pub fn from_fn_gray(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Samples of one channel in row-major order.
    pub fn channel(&self, c: usize) -> impl Iterator<Item = u8> + '_ {
        self.data.iter().skip(c).step_by(self.channels).copied()
    }

    /// Rectangular window `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width {
            return Err(Error::dim("crop", "width", self.width, x0 + w));
        }
        if y0 + h > self.height {
            return Err(Error::dim("crop", "height", self.height, y0 + h));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image::new(w, h, c, data)
    }

    /// Centre crop to the largest size divisible by `s`; returns the image
    /// and the `(left, top)` offset of the kept window.
    pub fn crop_to_multiple(&self, s: usize) -> Result<(Image, (usize, usize))> {
        let (w, h) = (self.width - self.width % s, self.height - self.height % s);
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image is smaller than the scale factor {s}",
                self.width, self.height
            )));
        }
        let (left, top) = ((self.width - w) / 2, (self.height - h) / 2);
        Ok((self.crop(left, top, w, h)?, (left, top)))
    }

    /// Place `self` at `(left, top)` inside a `width x height` canvas,
    /// filling the margin by edge replication.
    pub fn pad_replicate(&self, width: usize, height: usize, left: usize, top: usize) -> Result<Image> {
        if left + self.width > width || top + self.height > height || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot place {}x{} at ({left}, {top}) in {width}x{height}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in 0..height {
            let sy = y.saturating_sub(top).min(self.height - 1);
            for x in 0..width {
                let sx = x.saturating_sub(left).min(self.width - 1);
                let at = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[at..at + c]);
            }
        }
        Image::new(width, height, c, data)
    }

    /// Rotate counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rotate(&self, quarter_turns: usize) -> Image {
        let mut img = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (w, h, c) = (img.width, img.height, img.channels);
            let mut data = vec![0u8; img.data.len()];
            // (x, y) -> (y, w - 1 - x)
            for y in 0..h {
                for x in 0..w {
                    let (nx, ny) = (y, w - 1 - x);
                    let src = (y * w + x) * c;
                    let dst = (ny * h + nx) * c;
                    data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
                }
            }
            img = Image {
                width: h,
                height: w,
                channels: c,
                data,
            };
        }
        img
    }

    /// Luminance; 1-channel images pass through unchanged.
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            self.clone()
        } else {
            rgb_to_y(self)
        }
    }

    /// `(1, 1, h, w)` tensor with samples scaled to `[0, 1]` (luminance only).
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.channels != 1 {
            return Err(Error::dim("to_tensor", "channel", 1, self.channels));
        }
        let step = 1.0 / 255.0;
        let data = self.data.iter().map(|&v| T::from_f64(step * f64::from(v))).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data)
    }

    /// Single-channel image from plane `(n, 0)` of a tensor; values are
    /// scaled by 255, rounded, and clamped.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Image> {
        let s = t.shape();
        if s.c != 1 {
            return Err(Error::dim("from_tensor", "channel", 1, s.c));
        }
        let data = t.plane(n, 0).iter().map(|&v| to_u8(v.to_f64() * 255.0)).collect();
        Image::gray(s.w, s.h, data)
    }
}

fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// BT.601 studio-swing luma: `16 + (65.481 R + 128.553 G + 24.966 B) / 255`,
/// rounded and clamped to `[16, 235]`. Gray images pass through.
pub fn rgb_to_y(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let (r, g, b) = (f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
            let y = 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0;
            y.round().clamp(16.0, 235.0) as u8
        })
        .collect();
    Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_reference_values() {
        let img = Image::new(3, 1, 3, vec![255, 255, 255, 0, 0, 0, 128, 128, 128]).unwrap();
        let y = rgb_to_y(&img);
        assert_eq!(y.data(), &[235, 16, 126]);
        let gray = Image::gray(1, 1, vec![77]).unwrap();
        assert_eq!(rgb_to_y(&gray), gray);
    }

    #[test]
    fn tensor_round_trip_within_half_step() {
        let img = Image::from_fn_gray(16, 9, |x, y| (x * 17 + y * 29) as u8);
        let t = img.to_tensor::<f32>().unwrap();
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
        let t = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f64 / 15.0 * 0.999);
        let back = Image::from_tensor(&t, 0).unwrap().to_tensor::<f64>().unwrap();
        assert!(t.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-12);
    }

    #[test]
    fn crop_and_pad() {
        let img = Image::from_fn_gray(7, 5, |x, y| (10 * y + x) as u8);
        let (c, (l, t)) = img.crop_to_multiple(3).unwrap();
        assert_eq!((c.width(), c.height(), l, t), (6, 3, 0, 1));
        assert_eq!(c.get(0, 0, 0), 10);
        let p = c.pad_replicate(7, 5, l, t).unwrap();
        assert_eq!(p.get(6, 4, 0), c.get(5, 2, 0));
        assert_eq!(p.get(0, 0, 0), c.get(0, 0, 0));
        assert!(img.crop(5, 0, 3, 1).is_err());
    }

    #[test]
    fn rotation_cycles() {
        let img = Image::from_fn_gray(5, 3, |x, y| (x + 5 * y) as u8);
        let r = img.rotate(1);
        assert_eq!((r.width(), r.height()), (3, 5));
        assert_eq!(r.get(0, 4, 0), img.get(0, 0, 0));
        assert_eq!(img.rotate(4), img);
        assert_eq!(r.rotate(3), img);
    }
}
