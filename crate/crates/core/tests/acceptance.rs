//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured numbers before asserting.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dsn_core::autodiff::kernels::{avg_pool, pixel_shuffle, pixel_unshuffle, tile_upsample};
use dsn_core::autodiff::GradCheckOptions;
use dsn_core::compression::Codec;
use dsn_core::experiments::{compare_compression, degradation_matrix, evaluate_roundtrip, mean_psnr, CompressionComparison};
use dsn_core::gradsuite;
use dsn_core::imaging::{decode_pgm, encode_pgm, psnr, ssim, Image};
use dsn_core::layers::QBReluParams;
use dsn_core::model::{DsnConfig, DsnModel};
use dsn_core::resample::{Interp, Kernel};
use dsn_core::synth;
use dsn_core::trainer::{patches_from_images, train, TrainConfig, TrainOptions};
use dsn_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
}

fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn_gray(w, h, |_, _| rng.random())
}

#[test]
fn criterion_1_gradient_oracle() {
    let t0 = Instant::now();
    let entries = gradsuite::run(&GradCheckOptions::default()).unwrap();
    let elapsed = t0.elapsed();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let ok = entries.iter().all(|e| e.report.passed() && e.report.checked >= 50)
        && entries.iter().any(|e| e.name.contains("full network"))
        && elapsed < Duration::from_secs(300);
    report(
        1,
        ok,
        &format!(
            "{} cases, worst {:.2e} ({}), {:.1}s",
            entries.len(),
            worst.report.max_rel_error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_2_layer_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    for s in 1..=4 {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 1, 4 * s, 3 * s), |_, _, _, _| rng.random_range(-1.0..1.0));
        ok &= pixel_shuffle(&pixel_unshuffle(&t, s).unwrap(), s).unwrap() == t;
        let small = Tensor::<f32>::from_fn(Shape::new(1, s * s, 3, 5), |_, _, _, _| rng.random_range(-1.0..1.0));
        ok &= pixel_unshuffle(&pixel_shuffle(&small, s).unwrap(), s).unwrap() == small;
        // Dyadic values keep the mean of s^2 equal copies exact.
        let lr = Tensor::<f32>::from_fn(Shape::new(1, 2, 4, 5), |_, _, _, _| f32::from(rng.random::<u8>()) / 256.0);
        ok &= avg_pool(&tile_upsample(&lr, s), s).unwrap() == lr;
    }

    let mut checked = 0;
    for s in 2..=4 {
        let mut model = DsnModel::init(DsnConfig::tiny(s), 7).unwrap();
        model.zero_residual_heads();
        let hr = random_image(8 * s, 6 * s, s as u64).to_tensor::<f32>().unwrap();
        let p: QBReluParams = model.config().qbrelu;
        let expected = avg_pool(&hr, s).unwrap().map(|v| p.quantize(f64::from(v)) as f32);
        let lr = model.forward_down(&hr).unwrap();
        ok &= lr == expected;
        ok &= model.forward_up(&lr).unwrap() == tile_upsample(&lr, s);
        checked += 1;
    }
    report(2, ok, &format!("shuffle/pool for s=1..4, zero-head networks for {checked} scales"));
    assert!(ok);
}

#[test]
fn criterion_3_qbrelu_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut ok = true;
    for p in [
        QBReluParams::default(),
        QBReluParams::new(-1.0, 1.5, 17).unwrap(),
        QBReluParams::new(0.25, 0.3, 2).unwrap(),
    ] {
        let q1 = f64::from(p.levels - 1);
        let bound = p.span() / (2.0 * q1);
        for _ in 0..n {
            let x = rng.random_range(p.t_min - 1.0..p.t_max + 1.0);
            let q = p.quantize(x);
            let level = p.level(x);
            ok &= p.grid_value(level) == q;
            ok &= p.t_min <= q && q <= p.t_max;
            ok &= (q - p.clamp(x)).abs() <= bound * (1.0 + 1e-12);
            ok &= p.quantize(q) == q;
            let y = x + rng.random_range(0.0..0.5);
            ok &= p.quantize(y) >= q;
            let expected = if p.t_min < x && x < p.t_max { 1.0 } else { 0.0 };
            ok &= p.surrogate_derivative(x) == expected;
        }
    }
    report(3, ok, &format!("{n} samples for each of 3 parameter sets"));
    assert!(ok);
}

#[test]
fn criterion_4_overfit_convergence() {
    let t0 = Instant::now();
    let img = synth::scene(64, 64, 2024, &Default::default());
    let set = patches_from_images(std::slice::from_ref(&img), &["scene".into()], 64, false).unwrap();
    let cfg = TrainConfig {
        patch_size: 64,
        batch_size: 1,
        epochs: 2000,
        max_steps: 2000,
        decay_every: 500,
        checkpoint_every: 0,
        rotations: false,
        ..TrainConfig::for_scale(2)
    };
    let run = || {
        let mut m = DsnModel::init(DsnConfig::tiny(2), 0).unwrap();
        let r = train(&mut m, &set, &cfg, TrainOptions::default()).unwrap();
        (m, r.steps)
    };
    let (model, steps) = run();
    let first_run = t0.elapsed();
    let (_, sr) = model.forward_roundtrip(&img.to_tensor::<f32>().unwrap()).unwrap();
    let p = psnr(&img, &Image::from_tensor(&sr, 0).unwrap(), 0).unwrap();
    let (again, _) = run();
    let deterministic = again.params() == model.params();
    let ok = p >= 40.0 && steps <= 2000 && deterministic && first_run < Duration::from_secs(600);
    report(
        4,
        ok,
        &format!("{p:.2} dB after {steps} steps in {:.0}s, deterministic {deterministic}", first_run.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn criterion_5_degradation_matrix() {
    let t0 = Instant::now();
    let s = 2;
    let train_set = synth::corpus(20, 96, 96, 1000);
    let test_set = synth::corpus(5, 96, 96, 5000);
    let epochs = 40;
    let cfg = TrainConfig {
        patch_size: 32,
        batch_size: 16,
        epochs,
        decay_every: epochs / 2 + 1,
        checkpoint_every: 0,
        ..TrainConfig::for_scale(s)
    };
    let m = degradation_matrix(&train_set, &test_set, &DsnConfig::tiny(s), &cfg, &Kernel::ALL, s, |_, _, _| {}).unwrap();
    let mut table = Vec::new();
    m.write_csv(&mut table).unwrap();
    print!("{}", String::from_utf8(table).unwrap());
    let bicubic = Kernel::ALL.iter().position(|&k| k == Kernel::Bicubic).unwrap();
    let ok = m.diagonally_dominant() && m.best_row() == bicubic && t0.elapsed() < Duration::from_secs(7200);
    let diag: Vec<String> = (0..m.kernels.len()).map(|i| format!("{:.2}", m.psnr[i][i])).collect();
    report(
        5,
        ok,
        &format!(
            "diagonals {} dominant {} best row {} in {:.0}s",
            diag.join("/"),
            m.diagonally_dominant(),
            m.kernels[m.best_row()].name(),
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

const TOY_SCALE: usize = 3;
const TOY_EPOCHS: usize = 300;
/// A 7-bit low-resolution image; the rate knob of the learned pipeline.
const TOY_LEVELS: u32 = 128;

struct Toy {
    model: DsnModel,
    test: Vec<Image>,
    elapsed: Duration,
}

/// One co-trained model shared by the roundtrip and compression criteria.
fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let t0 = Instant::now();
        let train_set = synth::corpus(20, 96, 96, 1000);
        let test = synth::corpus(5, 96, 96, 5000);
        let cfg = TrainConfig {
            patch_size: 36,
            batch_size: 16,
            epochs: TOY_EPOCHS,
            decay_every: TOY_EPOCHS / 2 + 1,
            checkpoint_every: 0,
            ..TrainConfig::for_scale(TOY_SCALE)
        };
        let names: Vec<String> = (0..train_set.len()).map(|i| format!("train{i}")).collect();
        let set = patches_from_images(&train_set, &names, cfg.patch(), cfg.rotations).unwrap();
        let mut model_cfg = DsnConfig::tiny(TOY_SCALE);
        model_cfg.qbrelu.levels = TOY_LEVELS;
        let mut model = DsnModel::init(model_cfg, 0).unwrap();
        train(&mut model, &set, &cfg, TrainOptions::default()).unwrap();
        Toy {
            model,
            test,
            elapsed: t0.elapsed(),
        }
    })
}

#[test]
fn criterion_6_dsn_beats_bicubic() {
    let toy = toy();
    let named: Vec<(String, Image)> = toy.test.iter().enumerate().map(|(i, t)| (format!("test{i}"), t.clone())).collect();
    let rows = evaluate_roundtrip(&toy.model, &named, &[Interp::bicubic()], TOY_SCALE).unwrap();
    let dsn = mean_psnr(&rows, "dsn");
    let bicubic = mean_psnr(&rows, Kernel::Bicubic.name());
    let ok = dsn - bicubic >= 0.3 && toy.elapsed < Duration::from_secs(7200);
    report(
        6,
        ok,
        &format!("dsn {dsn:.2} dB vs bicubic {bicubic:.2} dB, training {:.0}s", toy.elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn criterion_7_compression_direction() {
    let toy = toy();
    let rows: Vec<CompressionComparison> = toy
        .test
        .iter()
        .map(|t| compare_compression(&toy.model, t, Interp::bicubic(), &Codec::Deflate, TOY_SCALE).unwrap())
        .collect();
    let mut wins = 0;
    for (i, r) in rows.iter().enumerate() {
        let win = r.dsn_ssim > r.baseline_ssim && r.dsn_bpp <= r.baseline_bpp;
        wins += usize::from(win);
        println!(
            "  test{i}: dsn {:.4} bpp ssim {:.4} | bicubic {:.4} bpp ssim {:.4} {}",
            r.dsn_bpp,
            r.dsn_ssim,
            r.baseline_bpp,
            r.baseline_ssim,
            if win { "win" } else { "loss" }
        );
    }
    let lossless = rows.iter().all(|r| r.lossless);
    let ok = wins >= 4 && lossless;
    report(7, ok, &format!("{wins}/5 images win, inner codec lossless {lossless}"));
    assert!(ok);
}

#[test]
fn criterion_8_metrics_sanity() {
    let a = random_image(64, 48, 8);
    let plus = Image::from_fn_gray(64, 48, |x, y| a.get(x, y, 0).min(254) + 1);
    let base = Image::from_fn_gray(64, 48, |x, y| a.get(x, y, 0).min(254));
    let p = psnr(&base, &plus, 0).unwrap();
    let s = ssim(&a, &a).unwrap();

    let pgm = encode_pgm(&a).unwrap();
    let pgm_ok = decode_pgm(&pgm).unwrap() == a && encode_pgm(&decode_pgm(&pgm).unwrap()).unwrap() == pgm;

    let model = DsnModel::init(DsnConfig::tiny(3), 8).unwrap();
    let bytes = model.to_bytes();
    let back = DsnModel::from_bytes(&bytes).unwrap();
    let ckpt_ok = back.to_bytes() == bytes && back.params() == model.params();

    let ok = (p - 48.1308).abs() <= 1e-4 && s == 1.0 && pgm_ok && ckpt_ok;
    report(
        8,
        ok,
        &format!("+1 offset {p:.6} dB, ssim(identical) {s}, pgm bitwise {pgm_ok}, checkpoint bitwise {ckpt_ok}"),
    );
    assert!(ok);
}
