//! Browser bindings: the quantizer's transfer curve, classical resampling
//! round trips, and learned round trips from an uploaded checkpoint.

use dsn_core::experiments::{classical_roundtrip, roundtrip};
use dsn_core::imaging::{decode_image, quality, Image};
use dsn_core::layers::QBReluParams;
use dsn_core::model::{DsnConfig, DsnModel};
use dsn_core::resample::{resize_image, Interp, Kernel};
use dsn_core::synth;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Interleaved `(x, q(x), surrogate'(x))` triples over `n` points of
/// `[x_min, x_max]`.
pub fn qbrelu_samples(t_min: f64, t_max: f64, levels: u32, x_min: f64, x_max: f64, n: usize) -> dsn_core::Result<Vec<f64>> {
    let p = QBReluParams::new(t_min, t_max, levels)?;
    let n = n.max(2);
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let x = x_min + (x_max - x_min) * i as f64 / (n - 1) as f64;
        out.extend([x, p.quantize(x), p.surrogate_derivative(x)]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn qbrelu_curve(t_min: f64, t_max: f64, levels: u32, x_min: f64, x_max: f64, n: usize) -> Result<Vec<f64>, JsError> {
    qbrelu_samples(t_min, t_max, levels, x_min, x_max, n).map_err(js)
}

/// Gray samples expanded to opaque RGBA for `ImageData`.
pub fn to_rgba(img: &Image) -> Vec<u8> {
    let y = img.to_luma();
    y.data().iter().flat_map(|&v| [v, v, v, 255]).collect()
}

/// Luminance image loaded in the page, cropped to a multiple of 12 so
/// every scale from 2 to 4 divides it.
#[wasm_bindgen]
pub struct Picture {
    img: Image,
}

#[wasm_bindgen]
impl Picture {
    pub fn synthetic(width: usize, height: usize, seed: u64) -> Result<Picture, JsError> {
        Picture::new(synth::scene(width.max(12), height.max(12), seed, &Default::default()))
    }

    /// PGM (P5) or PNG file contents.
    pub fn decode(bytes: &[u8]) -> Result<Picture, JsError> {
        Picture::new(decode_image(bytes).map_err(js)?)
    }

    fn new(img: Image) -> Result<Picture, JsError> {
        let (img, _) = img.to_luma().crop_to_multiple(12).map_err(js)?;
        Ok(Picture { img })
    }

    pub fn width(&self) -> usize {
        self.img.width()
    }

    pub fn height(&self) -> usize {
        self.img.height()
    }

    pub fn rgba(&self) -> Vec<u8> {
        to_rgba(&self.img)
    }
}

/// Low-resolution and restored images of one round trip, with quality
/// measured against the original (border of `scale` pixels excluded).
#[wasm_bindgen]
pub struct Trip {
    lr: Image,
    sr: Image,
    psnr: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl Trip {
    pub fn lr_width(&self) -> usize {
        self.lr.width()
    }
    pub fn lr_height(&self) -> usize {
        self.lr.height()
    }
    pub fn lr_rgba(&self) -> Vec<u8> {
        to_rgba(&self.lr)
    }
    pub fn sr_rgba(&self) -> Vec<u8> {
        to_rgba(&self.sr)
    }
    /// `+inf` for identical images.
    pub fn psnr(&self) -> f64 {
        self.psnr
    }
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

fn trip(hr: &Image, lr: Image, sr: Image, scale: usize) -> dsn_core::Result<Trip> {
    let q = quality(hr, &sr, scale)?;
    Ok(Trip {
        lr,
        sr,
        psnr: q.psnr,
        ssim: q.ssim,
    })
}

pub fn classical_trip(pic: &Picture, scale: usize, kernel: &str) -> dsn_core::Result<Trip> {
    if !(2..=4).contains(&scale) {
        return Err(dsn_core::Error::InvalidArgument(format!("scale must be 2, 3 or 4, got {scale}")));
    }
    let interp = Interp::new(kernel.parse::<Kernel>()?);
    let hr = &pic.img;
    let lr = resize_image(hr, hr.width() / scale, hr.height() / scale, &interp)?;
    let sr = classical_roundtrip(hr, scale, &interp)?;
    trip(hr, lr, sr, scale)
}

#[wasm_bindgen]
pub fn resample(pic: &Picture, scale: usize, kernel: &str) -> Result<Trip, JsError> {
    classical_trip(pic, scale, kernel).map_err(js)
}

#[wasm_bindgen]
pub struct Network {
    model: DsnModel,
}

#[wasm_bindgen]
impl Network {
    /// Untrained network with zeroed residual heads: average pooling down,
    /// nearest-neighbour up.
    pub fn zero_head(scale: usize) -> Result<Network, JsError> {
        let mut model = DsnModel::init(DsnConfig::tiny(scale), 0).map_err(js)?;
        model.zero_residual_heads();
        Ok(Network { model })
    }

    /// Checkpoint file contents.
    pub fn load(bytes: &[u8]) -> Result<Network, JsError> {
        Ok(Network {
            model: DsnModel::from_bytes(bytes).map_err(js)?,
        })
    }

    pub fn scale(&self) -> usize {
        self.model.scale()
    }

    pub fn describe(&self) -> String {
        let c = self.model.config();
        format!(
            "scale {}, {} parameters, down widths {:?}, dense depth {} growth {}, {} levels",
            c.scale,
            self.model.param_count(),
            c.down_widths,
            c.dense.depth,
            c.dense.growth,
            c.qbrelu.levels
        )
    }

    pub fn roundtrip(&self, pic: &Picture) -> Result<Trip, JsError> {
        network_trip(&self.model, pic).map_err(js)
    }
}

pub fn network_trip(model: &DsnModel, pic: &Picture) -> dsn_core::Result<Trip> {
    let (lr, sr) = roundtrip(model, &pic.img)?;
    trip(&pic.img, lr, sr, model.scale())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_is_a_staircase_with_straight_through_slope() {
        let v = qbrelu_samples(0.0, 1.0, 4, -0.5, 1.5, 9).unwrap();
        assert_eq!(v.len(), 27);
        let q: Vec<f64> = v.chunks(3).map(|c| c[1]).collect();
        let d: Vec<f64> = v.chunks(3).map(|c| c[2]).collect();
        assert_eq!(q[0], 0.0);
        assert_eq!(q[8], 1.0);
        assert!((q[3] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(d, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(qbrelu_samples(1.0, 0.0, 4, 0.0, 1.0, 3).is_err());
    }

    #[test]
    fn zero_head_network_matches_pooling_and_nearest() {
        let pic = Picture {
            img: synth::scene(24, 24, 4, &Default::default()),
        };
        let mut model = DsnModel::init(DsnConfig::tiny(2), 0).unwrap();
        model.zero_residual_heads();
        let t = network_trip(&model, &pic).unwrap();
        assert_eq!((t.lr_width(), t.lr_height()), (12, 12));
        let nearest = resize_image(&t.lr, 24, 24, &Interp::nearest()).unwrap();
        assert_eq!(t.sr, nearest);
        assert!(t.psnr > 20.0 && t.ssim > 0.5);
        assert_eq!(t.sr_rgba().len(), 24 * 24 * 4);
    }

    #[test]
    fn classical_trips_validate_arguments() {
        let pic = Picture {
            img: synth::scene(48, 48, 9, &Default::default()),
        };
        let cubic = classical_trip(&pic, 2, "bicubic").unwrap();
        let near = classical_trip(&pic, 2, "nearest").unwrap();
        assert!(cubic.psnr.is_finite() && near.psnr.is_finite());
        assert!(classical_trip(&pic, 5, "bicubic").is_err());
        assert!(classical_trip(&pic, 2, "lanczos").is_err());
    }
}
