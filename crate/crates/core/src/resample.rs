//! Separable nearest, bilinear and bicubic resampling.
//!
//! Pixel centres sit at half-integer coordinates: destination index `i`
//! maps to source coordinate `(i + 0.5) * in / out - 0.5`. Taps that fall
//! outside the image are clamped to the nearest edge pixel. When shrinking
//! with `antialias` on, the kernel is stretched by the shrink factor (the
//! `imresize` convention); nearest-neighbour always point-samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Nearest,
    Bilinear,
    Bicubic,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Nearest, Kernel::Bilinear, Kernel::Bicubic];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Nearest => "nearest",
            Kernel::Bilinear => "bilinear",
            Kernel::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(Kernel::Nearest),
            "bilinear" => Ok(Kernel::Bilinear),
            "bicubic" => Ok(Kernel::Bicubic),
            other => Err(Error::InvalidArgument(format!("unknown interpolation kernel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interp {
    pub kernel: Kernel,
    /// Bicubic sharpness parameter.
    pub a: f64,
    pub antialias: bool,
}

impl Interp {
    pub const fn new(kernel: Kernel) -> Self {
        Interp {
            kernel,
            a: -0.5,
            antialias: true,
        }
    }

    pub const fn nearest() -> Self {
        Interp::new(Kernel::Nearest)
    }

    pub const fn bilinear() -> Self {
        Interp::new(Kernel::Bilinear)
    }

    pub const fn bicubic() -> Self {
        Interp::new(Kernel::Bicubic)
    }

    pub const fn without_antialias(mut self) -> Self {
        self.antialias = false;
        self
    }

    fn support(&self) -> f64 {
        match self.kernel {
            Kernel::Nearest => 0.5,
            Kernel::Bilinear => 1.0,
            Kernel::Bicubic => 2.0,
        }
    }

    fn weight(&self, x: f64) -> f64 {
        match self.kernel {
            Kernel::Nearest => f64::from(u8::from((-0.5..0.5).contains(&x))),
            Kernel::Bilinear => (1.0 - x.abs()).max(0.0),
            Kernel::Bicubic => keys_cubic(x, self.a),
        }
    }
}

/// Keys cubic convolution kernel with parameter `a`.
pub fn keys_cubic(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps contributing to one destination sample.
#[derive(Debug, Clone)]
struct Taps {
    index: Vec<usize>,
    weight: Vec<f64>,
}

fn axis_taps(input: usize, output: usize, interp: &Interp) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            if interp.kernel == Kernel::Nearest {
                let src = (((i as f64 + 0.5) * scale).floor() as usize).min(input - 1);
                return Taps {
                    index: vec![src],
                    weight: vec![1.0],
                };
            }
            let stretch = if interp.antialias && scale > 1.0 { scale } else { 1.0 };
            let center = (i as f64 + 0.5) * scale - 0.5;
            let reach = interp.support() * stretch;
            let lo = (center - reach).floor() as isize;
            let hi = (center + reach).ceil() as isize;
            let mut taps = Taps {
                index: Vec::new(),
                weight: Vec::new(),
            };
            for j in lo..=hi {
                let w = interp.weight((center - j as f64) / stretch);
                if w == 0.0 {
                    continue;
                }
                let src = j.clamp(0, input as isize - 1) as usize;
                match taps.index.iter().position(|&k| k == src) {
                    Some(p) => taps.weight[p] += w,
                    None => {
                        taps.index.push(src);
                        taps.weight.push(w);
                    }
                }
            }
            let total: f64 = taps.weight.iter().sum();
            for w in &mut taps.weight {
                *w /= total;
            }
            debug_assert!((taps.weight.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            taps
        })
        .collect()
}

/// Sum of weights at every destination coordinate of one axis; each entry
/// is 1 up to rounding.
pub fn weight_sums(input: usize, output: usize, interp: &Interp) -> Vec<f64> {
    axis_taps(input, output, interp)
        .iter()
        .map(|t| t.weight.iter().sum())
        .collect()
}

/// Resample a row-major `width x height` plane.
pub fn resize_plane(
    src: &[f64],
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
    interp: &Interp,
) -> Result<Vec<f64>> {
    if width == 0 || height == 0 || out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize: dimensions must be positive ({width}x{height} -> {out_w}x{out_h})"
        )));
    }
    if src.len() != width * height {
        return Err(Error::dim("resize", "element", width * height, src.len()));
    }
    let hx = axis_taps(width, out_w, interp);
    let hy = axis_taps(height, out_h, interp);
    let mut tmp = vec![0.0; height * out_w];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for (x, t) in hx.iter().enumerate() {
            tmp[y * out_w + x] = t.index.iter().zip(&t.weight).map(|(&i, &w)| row[i] * w).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (y, t) in hy.iter().enumerate() {
        let dst = &mut out[y * out_w..(y + 1) * out_w];
        for (&i, &w) in t.index.iter().zip(&t.weight) {
            let row = &tmp[i * out_w..(i + 1) * out_w];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v * w;
            }
        }
    }
    Ok(out)
}

/// Resample every channel of an 8-bit image, rounding and clamping.
pub fn resize_image(img: &Image, out_w: usize, out_h: usize, interp: &Interp) -> Result<Image> {
    let c = img.channels();
    let mut out = vec![0u8; out_w * out_h * c];
    for ch in 0..c {
        let plane: Vec<f64> = img.channel(ch).map(f64::from).collect();
        let r = resize_plane(&plane, img.width(), img.height(), out_w, out_h, interp)?;
        for (i, v) in r.into_iter().enumerate() {
            out[i * c + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Image::new(out_w, out_h, c, out)
}

/// Resample every `(n, c)` plane of a tensor.
pub fn resize_tensor<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize, interp: &Interp) -> Result<Tensor<T>> {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let plane: Vec<f64> = t.plane(n, c).iter().map(|v| v.to_f64()).collect();
            let r = resize_plane(&plane, s.w, s.h, out_w, out_h, interp)?;
            for (d, v) in out.plane_mut(n, c).iter_mut().zip(r) {
                *d = T::from_f64(v);
            }
        }
    }
    Ok(out)
}
