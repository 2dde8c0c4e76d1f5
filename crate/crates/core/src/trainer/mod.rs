//! Patch pipeline, optimizer, and the co-training loop.

mod config;
mod optim;
mod patches;
mod state;

pub use config::{default_patch_size, lr_at, TrainConfig};
pub use optim::Adam;
pub use patches::{build_patchset, load_images, patches_from_images, scan_images, ImageScan, PatchSet, Provenance};
pub use state::{TrainState, STATE_MAGIC};

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::QuantMode;
use crate::model::{DsnModel, ParamSpec, Role};
use crate::resample::{resize_tensor, Interp};
use crate::tensor::Tensor;

/// What the network is asked to reproduce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `L1(up(down(H)), H)`; the down-sampler trains unless frozen.
    Roundtrip,
    /// `L1(up(resize(H)), H)` with a fixed classical degradation; only the
    /// up-sampler trains.
    SuperResolve(Interp),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training L1 loss over the epoch's batches.
    pub loss: f64,
    /// Training PSNR on the `[0, 1]` scale, from the same forward passes.
    pub psnr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

/// Run-time options that are not part of the reproducible configuration.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `model.dsnc`, `state.dsnt`, and `loss.csv`.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<TrainState>,
    pub observer: Option<&'a mut dyn FnMut(&EpochStats)>,
}

pub const MODEL_FILE: &str = "model.dsnc";
pub const STATE_FILE: &str = "state.dsnt";
pub const LOSS_LOG: &str = "loss.csv";

fn trainable(objective: Objective, freeze_down: bool) -> impl Fn(&ParamSpec) -> bool {
    move |spec: &ParamSpec| match objective {
        Objective::Roundtrip => !(freeze_down && spec.role == Role::Down),
        Objective::SuperResolve(_) => spec.role == Role::Up,
    }
}

struct StepResult {
    loss: f64,
    mse: f64,
    grads: Vec<Option<Tensor<f32>>>,
}

fn forward_backward(
    model: &DsnModel,
    hr: &Tensor<f32>,
    lr: Option<&Tensor<f32>>,
    train: &dyn Fn(&ParamSpec) -> bool,
) -> Result<StepResult> {
    let cfg = model.config();
    let mut g = Graph::<f32>::new();
    let ids = model.bind(&mut g, train);
    let h = g.input(hr.clone());
    let l = match lr {
        Some(lr) => g.input(lr.clone()),
        None => cfg.down_graph(&mut g, &ids, h, QuantMode::Quantized)?,
    };
    let s = cfg.up_graph(&mut g, &ids, l)?;
    let loss = g.l1_loss(s, h)?;
    let mse = g
        .value(s)
        .data()
        .iter()
        .zip(hr.data())
        .map(|(&a, &b)| f64::from(a - b).powi(2))
        .sum::<f64>()
        / hr.shape().len() as f64;
    g.backward(loss)?;
    let grads = ids.iter().map(|&id| g.grad(id).cloned()).collect();
    Ok(StepResult {
        loss: g.scalar(loss)?,
        mse,
        grads,
    })
}

/// L2 norm of the gradient of every parameter tensor for one batch.
pub fn gradient_norms(model: &DsnModel, hr: &Tensor<f32>, freeze_down: bool) -> Result<Vec<(String, f64)>> {
    let train = trainable(Objective::Roundtrip, freeze_down);
    let r = forward_backward(model, hr, None, &train)?;
    Ok(model
        .specs()
        .into_iter()
        .zip(r.grads)
        .map(|(spec, g)| {
            let n = g.map_or(0.0, |g| g.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt());
            (spec.name, n)
        })
        .collect())
}

/// Degrade every patch with `interp` and snap to the 8-bit grid, as a
/// stored low-resolution image would be.
fn degrade(hr: &Tensor<f32>, scale: usize, interp: &Interp) -> Result<Tensor<f32>> {
    let s = hr.shape();
    let lr = resize_tensor(hr, s.h / scale, s.w / scale, interp)?;
    Ok(lr.map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0))
}

fn append_log(dir: &Path, rows: &[EpochStats]) -> Result<()> {
    let path = dir.join(LOSS_LOG);
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::Malformed {
        format: "csv",
        reason: e.to_string(),
    };
    if fresh {
        w.write_record(["epoch", "lr", "loss", "psnr"]).map_err(csv_err)?;
    }
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{:e}", r.lr),
            format!("{:.8}", r.loss),
            format!("{:.4}", r.psnr),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn write_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.model.save(dir.join(MODEL_FILE))?;
    state.save(dir.join(STATE_FILE))
}

/// Minimize the L1 reconstruction loss of `objective` over `data`.
///
/// Batches are reshuffled every epoch from a stream derived from the seed
/// and epoch number, so a resumed run follows the uninterrupted one
/// exactly. A non-finite loss or gradient aborts the run, restores the
/// weights of the last completed epoch, and leaves on-disk checkpoints
/// untouched.
pub fn train_with(
    model: &mut DsnModel,
    data: &PatchSet,
    cfg: &TrainConfig,
    objective: Objective,
    mut opts: TrainOptions<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.scale() != cfg.scale {
        return Err(Error::InvalidArgument(format!(
            "model scale {} differs from training scale {}",
            model.scale(),
            cfg.scale
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training patches".into()));
    }
    if !data.patch_size().is_multiple_of(cfg.scale) {
        return Err(Error::InvalidArgument(format!(
            "patch size {} is not divisible by scale {}",
            data.patch_size(),
            cfg.scale
        )));
    }
    let specs = model.specs();
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let train = trainable(objective, cfg.freeze_down);
    let (mut adam, first_epoch, mut step) = match opts.resume.take() {
        Some(st) => {
            if st.model.config() != model.config() {
                return Err(Error::ConfigMismatch);
            }
            *model = st.model;
            (st.adam, st.next_epoch, st.step)
        }
        None => (Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps), 0, 0),
    };
    let degraded = match objective {
        Objective::SuperResolve(interp) => Some(degrade(&data.patches, cfg.scale, &interp)?),
        Objective::Roundtrip => None,
    };
    let mut report = TrainReport::default();
    let mut last_good = model.clone();
    let mut unlogged = Vec::new();
    let limit_hit = |step: usize| cfg.max_steps > 0 && step >= cfg.max_steps;

    for epoch in first_epoch..cfg.epochs {
        if limit_hit(step) {
            break;
        }
        let lr = lr_at(epoch, cfg);
        let lrs: Vec<f64> = specs
            .iter()
            .map(|s| if s.is_final { lr * cfg.final_layer_lr_mult } else { lr })
            .collect();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut mse_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if limit_hit(step) {
                break;
            }
            let hr = data.batch(chunk)?;
            let lr_batch = match &degraded {
                Some(d) => {
                    let mut b = Tensor::zeros(crate::tensor::Shape::new(chunk.len(), 1, d.shape().h, d.shape().w));
                    for (dst, &i) in chunk.iter().enumerate() {
                        b.item_mut(dst).copy_from_slice(d.item(i));
                    }
                    Some(b)
                }
                None => None,
            };
            let outcome = forward_backward(model, &hr, lr_batch.as_ref(), &train).and_then(|r| {
                if !r.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {} at epoch {epoch}, step {}",
                        r.loss,
                        step + 1
                    )));
                }
                adam.step(model.params_mut(), &r.grads, &lrs, &names)?;
                Ok(r)
            });
            let r = match outcome {
                Ok(r) => r,
                Err(Error::Numeric(msg)) => {
                    *model = last_good;
                    return Err(Error::Numeric(format!(
                        "{msg}; weights restored to the last completed epoch"
                    )));
                }
                Err(e) => return Err(e),
            };
            if model.params().iter().any(|p| !p.all_finite()) {
                *model = last_good;
                return Err(Error::Numeric(format!(
                    "non-finite weights after step {}; weights restored to the last completed epoch",
                    step + 1
                )));
            }
            step += 1;
            loss_sum += r.loss;
            mse_sum += r.mse;
            batches += 1;
            report.step_losses.push(r.loss);
        }
        if batches == 0 {
            break;
        }
        let mse = mse_sum / batches as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            psnr: if mse > 0.0 { -10.0 * mse.log10() } else { f64::INFINITY },
            steps: batches,
        };
        report.epochs.push(stats);
        unlogged.push(stats);
        if let Some(obs) = opts.observer.as_mut() {
            obs(&stats);
        }
        last_good = model.clone();
        let finished = epoch + 1 == cfg.epochs || limit_hit(step);
        let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if let Some(dir) = &opts.checkpoint_dir {
            if due || finished {
                let st = TrainState {
                    model: model.clone(),
                    adam: adam.clone(),
                    next_epoch: epoch + 1,
                    step,
                };
                write_checkpoint(dir, &st)?;
                append_log(dir, &unlogged)?;
                unlogged.clear();
            }
        }
    }
    report.steps = step;
    Ok(report)
}

/// Co-train both subnetworks on the roundtrip loss (down-sampler frozen if
/// `cfg.freeze_down`).
pub fn train(model: &mut DsnModel, data: &PatchSet, cfg: &TrainConfig, opts: TrainOptions<'_>) -> Result<TrainReport> {
    train_with(model, data, cfg, Objective::Roundtrip, opts)
}

/// Train the up-sampler alone to invert a fixed classical down-sampler.
pub fn train_sr_baseline(
    model: &mut DsnModel,
    data: &PatchSet,
    cfg: &TrainConfig,
    degradation: Interp,
    opts: TrainOptions<'_>,
) -> Result<TrainReport> {
    train_with(model, data, cfg, Objective::SuperResolve(degradation), opts)
}
