//! Forward and backward kernels for the differentiable operations.
//!
//! These are plain functions over [`Tensor`]s; [`super::Graph`] records which
//! one produced each node and replays the matching backward kernel.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Output extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: Shape, weight: Shape, bias: Shape, stride: usize, pad: usize) -> Result<Self> {
        if weight.c != input.c {
            return Err(Error::dim("conv2d", "channel", weight.c, input.c));
        }
        if weight.h != weight.w {
            return Err(Error::dim("conv2d", "kernel width", weight.h, weight.w));
        }
        if bias.len() != weight.n {
            return Err(Error::dim("conv2d", "bias", weight.n, bias.len()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let k = weight.h;
        let oh = conv_out_dim(input.h, k, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", "height", k, input.h + 2 * pad))?;
        let ow = conv_out_dim(input.w, k, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", "width", k, input.w + 2 * pad))?;
        Ok(ConvGeom {
            ci: input.c,
            h: input.h,
            w: input.w,
            co: weight.n,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate for output index `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let op = self.out_plane();
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * op..(row + 1) * op];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ky, self.h) {
                            None => line.fill(T::ZERO),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kx, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => T::ZERO,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        let op = self.out_plane();
        for c in 0..self.ci {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * op..(row + 1) * op];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is `(c_out, c_in, k, k)`,
/// `bias` holds `c_out` values.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let n = input.shape().n;
    let mut out = Tensor::zeros(Shape::new(n, g.co, g.oh, g.ow));
    let op = g.out_plane();
    let kk = g.patch_len();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; kk * op]
    };
    for b in 0..n {
        let x = input.item(b);
        let y = out.item_mut(b);
        for (c, &bv) in bias.data().iter().enumerate() {
            y[c * op..(c + 1) * op].fill(bv);
        }
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        T::gemm(
            g.co,
            kk,
            op,
            weight.data(),
            (kk as isize, 1),
            src,
            (op as isize, 1),
            T::ONE,
            y,
            (op as isize, 1),
        );
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let n = input.shape().n;
    Shape::new(n, g.co, g.oh, g.ow).expect(&grad_out.shape(), "conv2d backward")?;
    let op = g.out_plane();
    let kk = g.patch_len();
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(bias.shape());
    let mut gi = want_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; kk * op]
    };
    let mut gcols = if g.is_pointwise() || !want_input {
        Vec::new()
    } else {
        vec![T::ZERO; kk * op]
    };
    for b in 0..n {
        let x = input.item(b);
        let go = grad_out.item(b);
        for (c, acc) in gb.data_mut().iter_mut().enumerate() {
            for &v in &go[c * op..(c + 1) * op] {
                *acc += v;
            }
        }
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        // dW += dY * cols^T
        T::gemm(
            g.co,
            op,
            kk,
            go,
            (op as isize, 1),
            src,
            (1, op as isize),
            T::ONE,
            gw.data_mut(),
            (kk as isize, 1),
        );
        if let Some(gi) = gi.as_mut() {
            let gx = gi.item_mut(b);
            // dcols = W^T * dY
            if g.is_pointwise() {
                T::gemm(
                    kk,
                    g.co,
                    op,
                    weight.data(),
                    (1, kk as isize),
                    go,
                    (op as isize, 1),
                    T::ONE,
                    gx,
                    (op as isize, 1),
                );
            } else {
                T::gemm(
                    kk,
                    g.co,
                    op,
                    weight.data(),
                    (1, kk as isize),
                    go,
                    (op as isize, 1),
                    T::ZERO,
                    &mut gcols,
                    (op as isize, 1),
                );
                g.col2im(&gcols, gx);
            }
        }
    }
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

fn check_divisible(op: &'static str, shape: Shape, s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::InvalidArgument(format!("{op}: scale must be >= 1")));
    }
    if !shape.h.is_multiple_of(s) {
        return Err(Error::dim(op, "height", shape.h.next_multiple_of(s), shape.h));
    }
    if !shape.w.is_multiple_of(s) {
        return Err(Error::dim(op, "width", shape.w.next_multiple_of(s), shape.w));
    }
    Ok(())
}

/// Non-overlapping `s x s` mean pooling.
pub fn avg_pool<T: Real>(input: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = input.shape();
    check_divisible("avg_pool", sh, s)?;
    let (oh, ow) = (sh.h / s, sh.w / s);
    let inv = T::from_f64(1.0 / (s * s) as f64);
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, oh, ow));
    for n in 0..sh.n {
        for c in 0..sh.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = T::ZERO;
                    for dy in 0..s {
                        let row = &src[(y * s + dy) * sh.w + x * s..][..s];
                        for &v in row {
                            acc += v;
                        }
                    }
                    dst[y * ow + x] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Spread each pooled gradient uniformly (`g / s^2`) over its window.
pub fn avg_pool_backward<T: Real>(grad_out: &Tensor<T>, s: usize) -> Tensor<T> {
    let inv = T::from_f64(1.0 / (s * s) as f64);
    tile_upsample(grad_out, s).map(|v| v * inv)
}

/// Nearest-neighbour replication of every pixel into an `s x s` block.
pub fn tile_upsample<T: Real>(input: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = input.shape();
    let (oh, ow) = (sh.h * s, sh.w * s);
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, oh, ow));
    for n in 0..sh.n {
        for c in 0..sh.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..oh {
                let src_row = &src[(y / s) * sh.w..(y / s + 1) * sh.w];
                let dst_row = &mut dst[y * ow..(y + 1) * ow];
                for (x, v) in dst_row.iter_mut().enumerate() {
                    *v = src_row[x / s];
                }
            }
        }
    }
    out
}

/// Sum of gradients over each replicated block.
pub fn tile_backward<T: Real>(grad_out: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = grad_out.shape();
    check_divisible("tile_upsample backward", sh, s)?;
    let (oh, ow) = (sh.h / s, sh.w / s);
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, oh, ow));
    for n in 0..sh.n {
        for c in 0..sh.c {
            let src = grad_out.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..sh.h {
                for x in 0..sh.w {
                    dst[(y / s) * ow + x / s] += src[y * sh.w + x];
                }
            }
        }
    }
    Ok(out)
}

/// `(n, s^2, h, w) -> (n, 1, s*h, s*w)` with
/// `out(row, col) = in(s * (row % s) + col % s, row / s, col / s)`.
pub fn pixel_shuffle<T: Real>(input: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = input.shape();
    if s == 0 {
        return Err(Error::InvalidArgument("pixel_shuffle: scale must be >= 1".into()));
    }
    if sh.c != s * s {
        return Err(Error::dim("pixel_shuffle", "channel", s * s, sh.c));
    }
    let (oh, ow) = (sh.h * s, sh.w * s);
    let mut out = Tensor::zeros(Shape::new(sh.n, 1, oh, ow));
    for n in 0..sh.n {
        for c in 0..sh.c {
            let (dy, dx) = (c / s, c % s);
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, 0);
            for y in 0..sh.h {
                for x in 0..sh.w {
                    dst[(y * s + dy) * ow + x * s + dx] = src[y * sh.w + x];
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(input: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = input.shape();
    if sh.c != 1 {
        return Err(Error::dim("pixel_unshuffle", "channel", 1, sh.c));
    }
    check_divisible("pixel_unshuffle", sh, s)?;
    let (oh, ow) = (sh.h / s, sh.w / s);
    let mut out = Tensor::zeros(Shape::new(sh.n, s * s, oh, ow));
    for n in 0..sh.n {
        let src = input.plane(n, 0).to_vec();
        for c in 0..s * s {
            let (dy, dx) = (c / s, c % s);
            let dst = out.plane_mut(n, c);
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y * s + dy) * sh.w + x * s + dx];
                }
            }
        }
    }
    Ok(out)
}

/// Channel-wise concatenation in argument order.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels: no inputs".into()))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        Shape::new(first.n, s.c, first.h, first.w).expect(&s, "concat_channels")?;
        channels += s.c;
    }
    let mut out = Tensor::zeros(Shape::new(first.n, channels, first.h, first.w));
    let plane = first.plane();
    for n in 0..first.n {
        let dst = out.item_mut(n);
        let mut at = 0;
        for t in inputs {
            let src = t.item(n);
            dst[at..at + src.len()].copy_from_slice(src);
            at += src.len();
        }
        debug_assert_eq!(at, channels * plane);
    }
    Ok(out)
}

/// Channels `[start, start + count)` of `input`.
pub fn slice_channels<T: Real>(input: &Tensor<T>, start: usize, count: usize) -> Tensor<T> {
    let sh = input.shape();
    let plane = sh.plane();
    let mut out = Tensor::zeros(Shape::new(sh.n, count, sh.h, sh.w));
    for n in 0..sh.n {
        let src = &input.item(n)[start * plane..(start + count) * plane];
        out.item_mut(n).copy_from_slice(src);
    }
    out
}

pub fn zip_map<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    a.shape().expect(&b.shape(), op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 5, 4), |n, c, y, x| {
            ((n * 7 + c * 3 + y * 5 + x) % 11) as f64 - 5.0
        });
        let w = Tensor::<f64>::from_fn(Shape::new(3, 2, 3, 3), |o, c, y, x| {
            ((o * 5 + c * 2 + y * 3 + x) % 7) as f64 * 0.25 - 0.5
        });
        let b = t(Shape::new(1, 3, 1, 1), &[0.5, -1.0, 2.0]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (3, 2)] {
            let y = conv2d(&x, &w, &b, stride, pad).unwrap();
            let ys = y.shape();
            for n in 0..2 {
                for o in 0..3 {
                    for oy in 0..ys.h {
                        for ox in 0..ys.w {
                            let mut acc = b.data()[o];
                            for c in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                            continue;
                                        }
                                        acc += x[[n, c, iy as usize, ix as usize]] * w[[o, c, ky, kx]];
                                    }
                                }
                            }
                            assert!((y[[n, o, oy, ox]] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let err = conv2d(&x, &w, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }

    #[test]
    fn avg_pool_mean() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 5.0]);
        assert_eq!(avg_pool(&x, 2).unwrap().data(), &[2.75]);
        assert!(avg_pool(&Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4)), 2).is_err());
    }

    #[test]
    fn pixel_shuffle_channel_law() {
        let x = t(Shape::new(1, 4, 1, 1), &[10.0, 20.0, 30.0, 40.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[10.0, 20.0, 30.0, 40.0]);
        let back = pixel_unshuffle(&y, 2).unwrap();
        assert_eq!(back, x);
        assert!(pixel_shuffle(&x, 3).is_err());
    }

    #[test]
    fn tile_replicates() {
        let x = t(Shape::new(1, 1, 1, 1), &[3.5]);
        let y = tile_upsample(&x, 2);
        assert_eq!(y.data(), &[3.5; 4]);
        assert_eq!(tile_backward(&y, 2).unwrap().data(), &[14.0]);
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::<f64>::full(Shape::new(2, 2, 4, 4), 1.0);
        let b = Tensor::<f64>::full(Shape::new(2, 2, 4, 4), 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 4, 4, 4));
        assert_eq!(slice_channels(&c, 2, 2), b);
        let bad = Tensor::<f64>::zeros(Shape::new(2, 1, 3, 4));
        assert!(concat_channels(&[&a, &bad]).is_err());
    }
}
