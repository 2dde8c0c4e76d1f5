//! PSNR and SSIM on single-channel 8-bit images.

use super::Image;
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

fn same_gray(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.channels() != 1 {
        return Err(Error::dim(op, "channel", 1, a.channels()));
    }
    if b.channels() != 1 {
        return Err(Error::dim(op, "channel", 1, b.channels()));
    }
    if a.width() != b.width() {
        return Err(Error::dim(op, "width", a.width(), b.width()));
    }
    if a.height() != b.height() {
        return Err(Error::dim(op, "height", a.height(), b.height()));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` after removing `crop` pixels from every border.
pub fn psnr(a: &Image, b: &Image, crop: usize) -> Result<f64> {
    same_gray("psnr", a, b)?;
    let (w, h) = (a.width(), a.height());
    if 2 * crop >= w.min(h) {
        return Err(Error::InvalidArgument(format!(
            "border crop {crop} leaves nothing of a {w}x{h} image"
        )));
    }
    let mut sse = 0u64;
    for y in crop..h - crop {
        for x in crop..w - crop {
            let d = i64::from(a.get(x, y, 0)) - i64::from(b.get(x, y, 0));
            sse += (d * d) as u64;
        }
    }
    if sse == 0 {
        return Ok(PSNR_IDENTICAL);
    }
    let n = ((w - 2 * crop) * (h - 2 * crop)) as f64;
    Ok(10.0 * (255.0f64 * 255.0 / (sse as f64 / n)).log10())
}

/// PSNR and SSIM of one image pair after a border crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

/// Evaluation protocol: luminance of both images, `crop` pixels removed
/// from every border, then PSNR and SSIM.
pub fn quality(reference: &Image, test: &Image, crop: usize) -> Result<Quality> {
    let (a, b) = (reference.to_luma(), test.to_luma());
    let p = psnr(&a, &b, crop)?;
    let (w, h) = (a.width() - 2 * crop, a.height() - 2 * crop);
    let ca = a.crop(crop, crop, w, h)?;
    let cb = b.crop(crop, crop, w, h)?;
    Ok(Quality {
        psnr: p,
        ssim: ssim(&ca, &cb)?,
    })
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; WIN] {
    let mut g = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; WIN]) -> Vec<f64> {
    let (ow, oh) = (w - WIN + 1, h - WIN + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WIN).map(|k| src[y * w + x + k] * g[k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|k| rows[(y + k) * ow + x] * g[k]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, dynamic range 255; windows lie fully inside
/// the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_gray("ssim", a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < WIN || h < WIN {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {WIN}x{WIN} pixels, got {w}x{h}"
        )));
    }
    let g = gaussian_window();
    let x: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| f64::from(v)).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &g);
    let my = filter_valid(&y, w, h, &g);
    let mxx = filter_valid(&prod(&x, &x), w, h, &g);
    let myy = filter_valid(&prod(&y, &y), w, h, &g);
    let mxy = filter_valid(&prod(&x, &y), w, h, &g);
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> Image {
        Image::from_fn_gray(w, h, |x, y| {
            let v = 128.0 + 50.0 * ((x as f64) * 0.7).sin() * ((y as f64) * 0.45).cos();
            v.round() as u8
        })
    }

    #[test]
    fn psnr_offset_by_one() {
        let a = textured(20, 20);
        let b = Image::from_fn_gray(20, 20, |x, y| a.get(x, y, 0) + 1);
        let p = psnr(&a, &b, 0).unwrap();
        assert!((p - 48.130803608679).abs() < 1e-4, "{p}");
        assert_eq!(psnr(&a, &a, 2).unwrap(), PSNR_IDENTICAL);
    }

    #[test]
    fn psnr_crop_ignores_border() {
        let a = textured(12, 12);
        let b = Image::from_fn_gray(12, 12, |x, y| if x == 0 { 0 } else { a.get(x, y, 0) });
        assert!(psnr(&a, &b, 0).unwrap().is_finite());
        assert_eq!(psnr(&a, &b, 2).unwrap(), PSNR_IDENTICAL);
        assert!(psnr(&a, &b, 6).is_err());
    }

    #[test]
    fn psnr_dimension_error() {
        let err = psnr(&textured(5, 5), &textured(6, 5), 0).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn ssim_identity_symmetry_inversion() {
        let a = textured(32, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = Image::from_fn_gray(32, 24, |x, y| 255 - a.get(x, y, 0));
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 0.5, "{s}");
        assert_eq!(s, ssim(&inv, &a).unwrap());
        assert!(ssim(&textured(10, 20), &textured(10, 20)).is_err());
    }

    #[test]
    fn quality_crops_both_metrics() {
        let a = textured(30, 30);
        let b = Image::from_fn_gray(30, 30, |x, y| if y < 2 { 0 } else { a.get(x, y, 0) });
        let q = quality(&a, &b, 2).unwrap();
        assert_eq!(q.psnr, PSNR_IDENTICAL);
        assert_eq!(q.ssim, 1.0);
        assert!(quality(&a, &b, 0).unwrap().ssim < 1.0);
    }

    #[test]
    fn window_is_normalized() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(g[5] > g[4] && g[4] == g[6]);
    }
}
