use std::sync::Arc;

use dsn_core::autodiff::kernels::{avg_pool, conv2d, pixel_shuffle, pixel_unshuffle, tile_upsample};
use dsn_core::autodiff::Graph;
use dsn_core::imaging::{psnr, ssim, Image};
use dsn_core::layers::{q_brelu_backward, QBRelu, QBReluParams};
use dsn_core::resample::{weight_sums, Interp, Kernel};
use dsn_core::{Shape, Tensor};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = QBReluParams> {
    (-2.0f64..1.0, 0.1f64..3.0, 2u32..300).prop_map(|(t_min, span, levels)| QBReluParams {
        t_min,
        t_max: t_min + span,
        levels,
    })
}

fn on_grid(p: &QBReluParams, v: f64) -> bool {
    let k = (v - p.t_min) / p.step();
    (k - k.round()).abs() < 1e-9 && p.grid_value(k.round() as u32) == v
}

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-10.0f64..10.0, shape.len()).prop_map(move |d| Tensor::from_vec(shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // 100 cases x 1000 samples = 1e5 samples per property.
    #[test]
    fn q_brelu_grid_rails_bound_idempotence(p in params(), xs in prop::collection::vec(-5.0f64..5.0, 1000)) {
        let half = p.step() / 2.0;
        for &x in &xs {
            let q = p.quantize(x);
            prop_assert!(p.t_min <= q && q <= p.t_max);
            prop_assert!(on_grid(&p, q), "{q} off grid for {p:?}");
            let c = p.clamp(x);
            prop_assert!((q - c).abs() <= half + f64::EPSILON * c.abs().max(1.0) * 4.0, "x={x} q={q}");
            prop_assert_eq!(p.quantize(q), q);
        }
    }

    #[test]
    fn q_brelu_monotone(p in params(), mut xs in prop::collection::vec(-5.0f64..5.0, 1000)) {
        xs.sort_by(f64::total_cmp);
        for w in xs.windows(2) {
            prop_assert!(p.quantize(w[0]) <= p.quantize(w[1]));
        }
    }

    #[test]
    fn straight_through_backward_is_exact(p in params(), xs in prop::collection::vec(-5.0f64..5.0, 1000), gs in prop::collection::vec(-3.0f64..3.0, 1000)) {
        let back = q_brelu_backward(&gs, &xs, &p).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(Shape::new(1, 1000, 1, 1), xs.clone()).unwrap());
        let y = g.map(x, Arc::new(QBRelu(p)));
        // Weighted sum via a 1x1 convolution over 1000 channels.
        let w = g.input(Tensor::from_vec(Shape::new(1, 1000, 1, 1), gs.clone()).unwrap());
        let b = g.input(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let dot = g.conv2d(y, w, b, 1, 0).unwrap();
        g.backward(dot).unwrap();
        let graph_grad = g.grad(x).unwrap().data().to_vec();
        for i in 0..xs.len() {
            let inside = p.t_min < xs[i] && xs[i] < p.t_max;
            let expect = if inside { gs[i] } else { 0.0 };
            prop_assert_eq!(back[i], expect);
            prop_assert_eq!(graph_grad[i], expect);
        }
    }

    #[test]
    fn shuffle_round_trips(t in tensor(Shape::new(2, 1, 6, 12)), s in prop::sample::select(vec![1usize, 2, 3])) {
        let u = pixel_unshuffle(&t, s).unwrap();
        prop_assert_eq!(u.shape().c, s * s);
        prop_assert_eq!(pixel_shuffle(&u, s).unwrap(), t);
    }

    #[test]
    fn unshuffle_of_shuffle(t in tensor(Shape::new(1, 4, 3, 5))) {
        prop_assert_eq!(pixel_unshuffle(&pixel_shuffle(&t, 2).unwrap(), 2).unwrap(), t);
    }

    #[test]
    fn pool_inverts_tile(t in tensor(Shape::new(2, 2, 3, 4)), s in 1usize..=4) {
        let back = avg_pool(&tile_upsample(&t, s), s).unwrap();
        prop_assert!(back.max_abs_diff(&t) <= 4.0 * f64::EPSILON * 10.0);
    }

    #[test]
    fn identity_kernel(t in tensor(Shape::new(1, 3, 4, 5))) {
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            w[[c, c, 0, 0]] = 1.0;
        }
        let y = conv2d(&t, &w, &Tensor::zeros(Shape::new(1, 3, 1, 1)), 1, 0).unwrap();
        prop_assert_eq!(y, t);
    }

    #[test]
    fn partition_of_unity(input in 1usize..40, output in 1usize..40, k in prop::sample::select(Kernel::ALL.to_vec()), aa in any::<bool>()) {
        let interp = Interp { antialias: aa, ..Interp::new(k) };
        for w in weight_sums(input, output, &interp) {
            prop_assert!((w - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn psnr_symmetric_and_ssim_bounded(a in prop::collection::vec(any::<u8>(), 16 * 16), b in prop::collection::vec(any::<u8>(), 16 * 16)) {
        let a = Image::gray(16, 16, a).unwrap();
        let b = Image::gray(16, 16, b).unwrap();
        prop_assert_eq!(psnr(&a, &b, 0).unwrap(), psnr(&b, &a, 0).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s == 1.0, a == b);
    }

    #[test]
    fn tensor_image_quantization_bound(vals in prop::collection::vec(0.0f64..=1.0, 64)) {
        let t = Tensor::from_vec(Shape::new(1, 1, 8, 8), vals).unwrap();
        let back = Image::from_tensor(&t, 0).unwrap().to_tensor::<f64>().unwrap();
        prop_assert!(t.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-12);
    }
}

#[test]
fn zero_mean_deviation() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for p in [QBReluParams::default(), QBReluParams::new(-1.0, 2.0, 17).unwrap()] {
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let x = rng.random_range(p.t_min..p.t_max);
                p.quantize(x) - x
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < p.step() * 0.05, "{p:?}: {mean}");
    }
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let base = dsn_core::synth::scene(48, 48, 3, &Default::default());
    let mut last = f64::INFINITY;
    for amp in [1i32, 2, 4, 8] {
        // Deterministic +/- amp pattern, clamped.
        let noisy = Image::from_fn_gray(48, 48, |x, y| {
            let sign = if (x * 7 + y * 13) % 3 == 0 { -1 } else { 1 };
            (i32::from(base.get(x, y, 0)) + sign * amp).clamp(0, 255) as u8
        });
        let p = psnr(&base, &noisy, 0).unwrap();
        assert!(p < last, "amp {amp}: {p} !< {last}");
        last = p;
    }
}
