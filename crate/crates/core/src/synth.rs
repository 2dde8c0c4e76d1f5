//! Seeded synthetic grayscale scenes for toy-scale training and evaluation:
//! smooth illumination, soft-edged shapes, oriented stripe patches, and
//! mild sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub shapes: usize,
    pub stripe_patches: usize,
    /// Standard deviation of additive noise in gray levels.
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            shapes: 6,
            stripe_patches: 2,
            noise: 1.5,
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

enum Layer {
    Disc { cx: f64, cy: f64, r: f64, soft: f64, value: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64, soft: f64, value: f64 },
    Stripes { cx: f64, cy: f64, radius: f64, period: f64, angle: f64, amp: f64 },
}

/// One `width x height` scene drawn from `seed`.
pub fn scene(width: usize, height: usize, seed: u64, p: &SceneParams) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let size = w.min(h);
    let base = rng.random_range(60.0..190.0);
    let (gx, gy) = (rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
    let (fx, fy, ph) = (
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let wave = rng.random_range(5.0..25.0);
    let mut layers = Vec::new();
    for _ in 0..p.shapes {
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let value = rng.random_range(20.0..235.0);
        let soft = rng.random_range(0.5..2.5);
        if rng.random_bool(0.5) {
            layers.push(Layer::Disc {
                cx,
                cy,
                r: rng.random_range(0.06..0.25) * size,
                soft,
                value,
            });
        } else {
            layers.push(Layer::Rect {
                cx,
                cy,
                hw: rng.random_range(0.05..0.25) * size,
                hh: rng.random_range(0.05..0.25) * size,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                soft,
                value,
            });
        }
    }
    for _ in 0..p.stripe_patches {
        layers.push(Layer::Stripes {
            cx: rng.random_range(0.0..w),
            cy: rng.random_range(0.0..h),
            radius: rng.random_range(0.15..0.35) * size,
            period: rng.random_range(3.0..9.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            amp: rng.random_range(15.0..45.0),
        });
    }
    let noise = Normal::new(0.0, p.noise.max(1e-12)).expect("finite noise level");
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = base
                + gx * (xf / w - 0.5)
                + gy * (yf / h - 0.5)
                + wave * (std::f64::consts::TAU * (fx * xf / w + fy * yf / h) + ph).sin();
            for layer in &layers {
                match *layer {
                    Layer::Disc { cx, cy, r, soft, value } => {
                        let d = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                        let a = 1.0 - smoothstep(r - soft, r + soft, d);
                        v = v * (1.0 - a) + value * a;
                    }
                    Layer::Rect { cx, cy, hw, hh, angle, soft, value } => {
                        let (s, c) = angle.sin_cos();
                        let (dx, dy) = (xf - cx, yf - cy);
                        let (u, t) = ((c * dx + s * dy).abs(), (-s * dx + c * dy).abs());
                        let a = (1.0 - smoothstep(hw - soft, hw + soft, u)) * (1.0 - smoothstep(hh - soft, hh + soft, t));
                        v = v * (1.0 - a) + value * a;
                    }
                    Layer::Stripes { cx, cy, radius, period, angle, amp } => {
                        let (dx, dy) = (xf - cx, yf - cy);
                        let d = (dx * dx + dy * dy).sqrt();
                        let env = 1.0 - smoothstep(0.6 * radius, radius, d);
                        let (s, c) = angle.sin_cos();
                        let phase = (c * dx + s * dy) * std::f64::consts::TAU / period;
                        v += amp * env * phase.sin();
                    }
                }
            }
            if p.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Image::gray(width, height, data).expect("buffer matches dimensions")
}

/// `count` scenes with consecutive seeds starting at `seed`.
pub fn corpus(count: usize, width: usize, height: usize, seed: u64) -> Vec<Image> {
    let p = SceneParams::default();
    (0..count as u64).map(|i| scene(width, height, seed.wrapping_add(i), &p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let p = SceneParams::default();
        let a = scene(40, 30, 1, &p);
        assert_eq!(a, scene(40, 30, 1, &p));
        assert_ne!(a, scene(40, 30, 2, &p));
        assert_eq!((a.width(), a.height()), (40, 30));
        let min = *a.data().iter().min().unwrap();
        let max = *a.data().iter().max().unwrap();
        assert!(max - min > 40, "{min}..{max}");
    }

    #[test]
    fn corpus_size() {
        let c = corpus(3, 16, 16, 9);
        assert_eq!(c.len(), 3);
        assert_eq!(c[1], scene(16, 16, 10, &SceneParams::default()));
    }
}
