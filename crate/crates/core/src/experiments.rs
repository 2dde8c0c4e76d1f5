//! Evaluation drivers: roundtrip and super-resolution inference on whole
//! images, per-image metric tables, and the train/test degradation matrix.

use std::io::Write;

use crate::compression::{compress, decompress, Codec, Transform};
use crate::error::{Error, Result};
use crate::imaging::{quality, Image};
use crate::model::{DsnConfig, DsnModel};
use crate::resample::{resize_image, Interp, Kernel};
use crate::tensor::{Shape, Tensor};
use crate::trainer::{patches_from_images, train_sr_baseline, TrainConfig, TrainOptions};

/// Restore an 8-bit low-resolution image with the up-sampler.
pub fn super_resolve(model: &DsnModel, lr: &Image) -> Result<Image> {
    let t = lr.to_luma().to_tensor::<f32>()?;
    Image::from_tensor(&model.forward_up(&t)?, 0)
}

/// `(L, S)` for the luminance of `hr`, which must have dims divisible by
/// the scale. `L` is the 8-bit learned low-resolution image.
pub fn roundtrip(model: &DsnModel, hr: &Image) -> Result<(Image, Image)> {
    let t = Transform::Model(model);
    let y = hr.to_luma();
    let lr = t.down(&y)?;
    let sr = t.up(&lr)?;
    Ok((lr, sr))
}

/// Classical down then up with one kernel.
pub fn classical_roundtrip(hr: &Image, scale: usize, interp: &Interp) -> Result<Image> {
    let y = hr.to_luma();
    let (w, h) = (y.width(), y.height());
    let lr = resize_image(&y, w / scale, h / scale, interp)?;
    resize_image(&lr, w, h, interp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub image: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Roundtrip quality of the model and each classical baseline on every
/// image (centre-cropped to the scale, border `crop` excluded), followed by
/// one `mean` row per method.
pub fn evaluate_roundtrip(
    model: &DsnModel,
    images: &[(String, Image)],
    baselines: &[Interp],
    crop: usize,
) -> Result<Vec<MetricRow>> {
    let s = model.scale();
    let mut rows = Vec::new();
    for (name, img) in images {
        let (hr, _) = img.to_luma().crop_to_multiple(s)?;
        let (_, sr) = roundtrip(model, &hr)?;
        let q = quality(&hr, &sr, crop)?;
        rows.push(MetricRow {
            image: name.clone(),
            method: "dsn".into(),
            psnr: q.psnr,
            ssim: q.ssim,
        });
        for b in baselines {
            let out = classical_roundtrip(&hr, s, b)?;
            let q = quality(&hr, &out, crop)?;
            rows.push(MetricRow {
                image: name.clone(),
                method: b.kernel.to_string(),
                psnr: q.psnr,
                ssim: q.ssim,
            });
        }
    }
    let mut methods: Vec<String> = Vec::new();
    for r in &rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    for m in methods {
        let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.method == m).collect();
        let n = sel.len() as f64;
        rows.push(MetricRow {
            image: "mean".into(),
            method: m,
            psnr: sel.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
        });
    }
    Ok(rows)
}

/// Mean PSNR of `method` over the non-summary rows.
pub fn mean_psnr(rows: &[MetricRow], method: &str) -> f64 {
    let sel: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.image != "mean")
        .map(|r| r.psnr)
        .collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

fn csv_error(e: csv::Error) -> Error {
    Error::Malformed {
        format: "csv",
        reason: e.to_string(),
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image", "method", "psnr_db", "ssim"]).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.image.clone(),
            r.method.clone(),
            format!("{:.4}", r.psnr),
            format!("{:.4}", r.ssim),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| csv_error(e.into()))
}

/// PSNR of models trained on one degradation and tested on each.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationMatrix {
    pub kernels: Vec<Kernel>,
    /// `psnr[i][j]`: trained with `kernels[i]`, tested with `kernels[j]`.
    pub psnr: Vec<Vec<f64>>,
}

impl DegradationMatrix {
    pub fn row_average(&self, i: usize) -> f64 {
        self.psnr[i].iter().sum::<f64>() / self.psnr[i].len() as f64
    }

    /// Every row peaks strictly on the diagonal.
    pub fn diagonally_dominant(&self) -> bool {
        (0..self.kernels.len()).all(|i| (0..self.kernels.len()).all(|j| i == j || self.psnr[i][i] > self.psnr[i][j]))
    }

    /// Row index with the highest average.
    pub fn best_row(&self) -> usize {
        (0..self.kernels.len())
            .max_by(|&a, &b| self.row_average(a).total_cmp(&self.row_average(b)))
            .unwrap_or(0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["train\\test".to_string()];
        header.extend(self.kernels.iter().map(|k| k.to_string()));
        header.push("avg".into());
        w.write_record(&header).map_err(csv_error)?;
        for (i, k) in self.kernels.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(self.psnr[i].iter().map(|v| format!("{v:.4}")));
            row.push(format!("{:.4}", self.row_average(i)));
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush().map_err(|e| csv_error(e.into()))
    }
}

/// Train one up-sampler per degradation kernel on `train` and score each on
/// `test` degraded with every kernel. All models start from the same seed.
pub fn degradation_matrix(
    train: &[Image],
    test: &[Image],
    model_cfg: &DsnConfig,
    cfg: &TrainConfig,
    kernels: &[Kernel],
    crop: usize,
    mut progress: impl FnMut(Kernel, usize, f64),
) -> Result<DegradationMatrix> {
    let s = cfg.scale;
    let names: Vec<String> = (0..train.len()).map(|i| format!("train{i}")).collect();
    let patches = patches_from_images(train, &names, cfg.patch(), cfg.rotations)?;
    let tests: Vec<Image> = test
        .iter()
        .map(|t| t.to_luma().crop_to_multiple(s).map(|(c, _)| c))
        .collect::<Result<_>>()?;
    let mut psnr = Vec::new();
    for &k in kernels {
        let mut model = DsnModel::init(model_cfg.clone(), cfg.seed)?;
        let mut observer = |e: &crate::trainer::EpochStats| progress(k, e.epoch, e.loss);
        train_sr_baseline(
            &mut model,
            &patches,
            cfg,
            Interp::new(k),
            TrainOptions {
                observer: Some(&mut observer),
                ..Default::default()
            },
        )?;
        let mut row = Vec::new();
        for &j in kernels {
            let mut total = 0.0;
            for hr in &tests {
                let lr = resize_image(hr, hr.width() / s, hr.height() / s, &Interp::new(j))?;
                let sr = super_resolve(&model, &lr)?;
                total += quality(hr, &sr, crop)?.psnr;
            }
            row.push(total / tests.len() as f64);
        }
        psnr.push(row);
    }
    Ok(DegradationMatrix {
        kernels: kernels.to_vec(),
        psnr,
    })
}

/// One image through the DSN and classical compression pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionComparison {
    pub dsn_bpp: f64,
    pub dsn_ssim: f64,
    pub baseline_bpp: f64,
    pub baseline_ssim: f64,
    /// Decoded low-resolution payload equals the encoder's image bitwise.
    pub lossless: bool,
}

pub fn compare_compression(
    model: &DsnModel,
    hr: &Image,
    baseline: Interp,
    codec: &Codec,
    crop: usize,
) -> Result<CompressionComparison> {
    let y = hr.to_luma();
    let dsn = Transform::Model(model);
    let classical = Transform::Classical {
        scale: model.scale(),
        interp: baseline,
    };
    let bd = compress(&y, dsn, codec)?;
    let bc = compress(&y, classical, codec)?;
    let (cropped, _) = y.crop_to_multiple(model.scale())?;
    let lossless = crate::compression::decode_lr(&bd, codec)? == dsn.down(&cropped)?
        && crate::compression::decode_lr(&bc, codec)? == classical.down(&cropped)?;
    let od = decompress(&bd, dsn, codec)?;
    let oc = decompress(&bc, classical, codec)?;
    Ok(CompressionComparison {
        dsn_bpp: bd.bpp(),
        dsn_ssim: quality(&y, &od, crop)?.ssim,
        baseline_bpp: bc.bpp(),
        baseline_ssim: quality(&y, &oc, crop)?.ssim,
        lossless,
    })
}

/// Stack luminance images of equal size into one `(n, 1, h, w)` batch.
pub fn batch_of(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image list".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut out = Tensor::zeros(Shape::new(images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        let t = img.to_luma().to_tensor::<f32>()?;
        t.shape().expect(&Shape::new(1, 1, h, w), "batch_of")?;
        out.item_mut(i).copy_from_slice(t.data());
    }
    Ok(out)
}
