//! Finite-difference checks of every differentiable operation and of the
//! assembled networks, at `f64`.
//!
//! Each check reduces the operation's output to the scalar `mean(exp(out))`,
//! so every element carries its own non-zero weight in the gradient.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Coordinate, Elementwise, GradCheckOptions, GradCheckReport, Graph, NodeId};
use crate::error::Result;
use crate::layers::{dense_block, ConvParams, DenseBlockConfig, DenseLayerParams, QBReluParams, QuantMode};
use crate::model::{DsnConfig, DsnModel};
use crate::tensor::{Shape, Tensor};

/// Inputs closer than this to an activation kink are not compared.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

#[derive(Debug)]
struct Exp;

impl Elementwise for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn forward(&self, x: f64) -> f64 {
        x.exp()
    }
    fn derivative(&self, x: f64) -> f64 {
        x.exp()
    }
    fn region(&self, _: f64) -> i64 {
        0
    }
}

fn reduce(g: &mut Graph<f64>, out: NodeId) -> Result<NodeId> {
    // exp > 0, so the L1 distance to zero is the plain mean.
    let e = g.map(out, Arc::new(Exp));
    let zero = g.input(Tensor::zeros(g.shape(e)));
    g.l1_loss(e, zero)
}

fn random(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn conv_case(
    rng: &mut ChaCha8Rng,
    input: Shape,
    filters: usize,
    k: usize,
    stride: usize,
    pad: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = [
        random(rng, input, -1.0, 1.0),
        random(rng, Shape::new(filters, input.c, k, k), -0.5, 0.5),
        random(rng, Shape::new(1, filters, 1, 1), -0.5, 0.5),
    ];
    grad_check(
        &params,
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
            reduce(g, y)
        },
        opts,
        None,
    )
}

/// Tiny model whose residual heads use the same He scale as every other
/// layer and whose biases are non-zero, so no layer's gradient is starved.
fn lively_model(scale: usize, seed: u64) -> Result<DsnModel> {
    let mut m = DsnModel::init(DsnConfig::tiny(scale), seed)?;
    let specs = m.specs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (spec, p) in specs.iter().zip(m.params_mut()) {
        if spec.name.ends_with(".bias") {
            *p = p.map(|_| rng.random_range(-0.05..0.05));
        } else if spec.is_final {
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            *p = p.map(|_| (rng.random_range(-1.0..1.0) * std * 3f64.sqrt()) as f32);
        }
    }
    Ok(m)
}

/// Run every check. `opts.tolerance` applies to all cases except average
/// pooling, which is held to `1e-6`.
pub fn run(opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| out.push(SuiteEntry { name, report });

    push("conv2d 3x3 pad 1", conv_case(&mut rng, Shape::new(2, 3, 8, 8), 4, 3, 1, 1, opts)?);
    push("conv2d 3x3 stride 3", conv_case(&mut rng, Shape::new(1, 2, 9, 9), 2, 3, 3, 0, opts)?);
    push("conv2d 3x3 stride 2 pad 1", conv_case(&mut rng, Shape::new(1, 2, 7, 7), 3, 3, 2, 1, opts)?);
    push("conv2d 1x1", conv_case(&mut rng, Shape::new(1, 4, 5, 5), 3, 1, 1, 0, opts)?);

    let strict = GradCheckOptions {
        tolerance: opts.tolerance.min(1e-6),
        ..opts.clone()
    };
    for (name, shape, s) in [
        ("avg_pool s=3", Shape::new(2, 1, 6, 6), 3usize),
        ("avg_pool s=2", Shape::new(1, 2, 6, 8), 2),
    ] {
        let x = random(&mut rng, shape, -1.0, 1.0);
        let r = grad_check(
            &[x],
            |g, ids| {
                let y = g.avg_pool(ids[0], s)?;
                reduce(g, y)
            },
            &strict,
            None,
        )?;
        push(name, r);
    }

    let x = random(&mut rng, Shape::new(2, 2, 4, 4), -1.0, 1.0);
    push(
        "tile_upsample s=3",
        grad_check(
            &[x],
            |g, ids| {
                let y = g.tile_upsample(ids[0], 3)?;
                reduce(g, y)
            },
            opts,
            None,
        )?,
    );

    let x = random(&mut rng, Shape::new(2, 4, 3, 3), -1.0, 1.0);
    push(
        "pixel_shuffle s=2",
        grad_check(
            &[x],
            |g, ids| {
                let y = g.pixel_shuffle(ids[0], 2)?;
                reduce(g, y)
            },
            opts,
            None,
        )?,
    );
    let x = random(&mut rng, Shape::new(1, 1, 9, 9), -1.0, 1.0);
    push(
        "pixel_unshuffle s=3",
        grad_check(
            &[x],
            |g, ids| {
                let y = g.pixel_unshuffle(ids[0], 3)?;
                reduce(g, y)
            },
            opts,
            None,
        )?,
    );

    let x = random(&mut rng, Shape::new(1, 2, 6, 6), -1.0, 1.0);
    let near_zero = |c: Coordinate| x.data()[c.index].abs() < KINK_MARGIN;
    push(
        "leaky_relu",
        grad_check(
            std::slice::from_ref(&x),
            |g, ids| {
                let y = g.leaky_relu(ids[0], 0.05)?;
                reduce(g, y)
            },
            opts,
            Some(&near_zero),
        )?,
    );

    let q = QBReluParams::default();
    let x = random(&mut rng, Shape::new(1, 2, 6, 6), -0.5, 1.5);
    let near_rail = |c: Coordinate| {
        let v = x.data()[c.index];
        (v - q.t_min).abs() < KINK_MARGIN || (v - q.t_max).abs() < KINK_MARGIN
    };
    push(
        "brelu (straight-through path)",
        grad_check(
            std::slice::from_ref(&x),
            |g, ids| {
                let y = g.map(ids[0], q.activation(QuantMode::Relaxed));
                reduce(g, y)
            },
            opts,
            Some(&near_rail),
        )?,
    );

    let a = random(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let b = random(&mut rng, Shape::new(1, 3, 4, 4), -1.0, 1.0);
    push(
        "concat_channels",
        grad_check(
            &[a, b],
            |g, ids| {
                let y = g.concat_channels(&[ids[0], ids[1]])?;
                reduce(g, y)
            },
            opts,
            None,
        )?,
    );

    let a = random(&mut rng, Shape::new(1, 2, 5, 5), -1.0, 1.0);
    let b = random(&mut rng, Shape::new(1, 2, 5, 5), -1.0, 1.0);
    push(
        "add, sub, scalar_mul",
        grad_check(
            &[a, b],
            |g, ids| {
                let s = g.add(ids[0], ids[1])?;
                let d = g.sub(s, ids[1])?;
                let d = g.sub(d, ids[1])?;
                let y = g.scalar_mul(d, 0.7);
                reduce(g, y)
            },
            opts,
            None,
        )?,
    );

    let a = random(&mut rng, Shape::new(2, 1, 6, 6), 0.0, 1.0);
    let b = random(&mut rng, Shape::new(2, 1, 6, 6), 0.0, 1.0);
    push(
        "l1_loss",
        grad_check(&[a, b], |g, ids| g.l1_loss(ids[0], ids[1]), opts, None)?,
    );

    let cfg = DenseBlockConfig {
        depth: 4,
        growth: 3,
        bottleneck_width: 4,
        input_width: 4,
    };
    let mut params = vec![random(&mut rng, Shape::new(1, cfg.input_width, 5, 5), -1.0, 1.0)];
    for l in 1..=cfg.depth {
        let ci = cfg.layer_input_channels(l);
        params.push(random(&mut rng, Shape::new(cfg.bottleneck_width, ci, 1, 1), -0.5, 0.5));
        params.push(random(&mut rng, Shape::new(1, cfg.bottleneck_width, 1, 1), -0.1, 0.1));
        params.push(random(&mut rng, Shape::new(cfg.growth, cfg.bottleneck_width, 3, 3), -0.3, 0.3));
        params.push(random(&mut rng, Shape::new(1, cfg.growth, 1, 1), -0.1, 0.1));
    }
    push(
        "dense_block",
        grad_check(
            &params,
            |g, ids| {
                let layers: Vec<DenseLayerParams> = ids[1..]
                    .chunks(4)
                    .map(|c| DenseLayerParams {
                        bottleneck: ConvParams {
                            weight: c[0],
                            bias: c[1],
                        },
                        conv: ConvParams {
                            weight: c[2],
                            bias: c[3],
                        },
                    })
                    .collect();
                let y = dense_block(g, ids[0], &cfg, &layers, 0.05)?;
                reduce(g, y)
            },
            opts,
            None,
        )?,
    );

    // Whole networks: every parameter tensor of a tiny model plus the input.
    let model = lively_model(2, opts.seed)?;
    let mc = model.config().clone();
    let mut params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.cast()).collect();
    let n_model = params.len();
    params.push(random(&mut rng, Shape::new(1, 1, 5, 6), 0.1, 0.9));
    push(
        "up-sampler",
        grad_check(
            &params,
            |g, ids| {
                let s = mc.up_graph(g, &ids[..n_model], ids[n_model])?;
                reduce(g, s)
            },
            opts,
            None,
        )?,
    );

    let model = lively_model(2, opts.seed.wrapping_add(1))?;
    let mc = model.config().clone();
    let params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.cast()).collect();
    let hr = random(&mut rng, Shape::new(2, 1, 8, 8), 0.05, 0.95);
    push(
        "down-sampler (relaxed quantizer)",
        grad_check(
            &params,
            |g, ids| {
                let h = g.input(hr.clone());
                let l = mc.down_graph(g, ids, h, QuantMode::Relaxed)?;
                reduce(g, l)
            },
            opts,
            None,
        )?,
    );
    push(
        "full network, L1 roundtrip loss",
        grad_check(
            &params,
            |g, ids| {
                let h = g.input(hr.clone());
                let l = mc.down_graph(g, ids, h, QuantMode::Relaxed)?;
                let s = mc.up_graph(g, ids, l)?;
                g.l1_loss(s, h)
            },
            opts,
            None,
        )?,
    );
    Ok(out)
}
