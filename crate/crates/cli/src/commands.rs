use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use dsn_core::autodiff::GradCheckOptions;
use dsn_core::compression::{compress, decompress, rate_distortion_report, write_rd_csv, Bundle, Codec, Transform};
use dsn_core::experiments::{classical_roundtrip, degradation_matrix, evaluate_roundtrip, roundtrip, write_metrics_csv};
use dsn_core::gradsuite;
use dsn_core::imaging::{quality, read_image, write_pgm, write_png, Image};
use dsn_core::model::{DsnConfig, DsnModel};
use dsn_core::resample::{Interp, Kernel};
use dsn_core::synth;
use dsn_core::trainer::{build_patchset, load_images, scan_images, train, EpochStats, TrainConfig, TrainOptions, TrainState, MODEL_FILE, STATE_FILE};
use toml::{Table, Value};

use crate::manifest::Manifest;
use crate::{
    CodecArgs, Command, CompressArgs, DecompressArgs, DegmatrixArgs, EvalArgs, GradcheckArgs, InferArgs, NumericFailure, RdreportArgs,
    RoundtripArgs, TrainArgs, TransformArgs, UsageError,
};

pub const CONFIG_FILE: &str = "config.toml";

pub fn run(command: Command) -> Result<()> {
    let threads = threads()?;
    match command {
        Command::Train(a) => cmd_train(a, threads),
        Command::Down(a) => cmd_down(a, threads),
        Command::Up(a) => cmd_up(a, threads),
        Command::Roundtrip(a) => cmd_roundtrip(a, threads),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Degmatrix(a) => cmd_degmatrix(a, threads),
        Command::Compress(a) => cmd_compress(a, threads),
        Command::Decompress(a) => cmd_decompress(a, threads),
        Command::Rdreport(a) => cmd_rdreport(a, threads),
        Command::Gradcheck(a) => cmd_gradcheck(a, threads),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Worker cap from `DSN_THREADS`. Every kernel currently runs on one
/// thread, so the value is validated and recorded only.
fn threads() -> Result<usize> {
    match std::env::var("DSN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("DSN_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}

fn arch(name: &str, scale: usize) -> Result<DsnConfig> {
    let cfg = match name {
        "standard" => DsnConfig::with_scale(scale),
        "tiny" => DsnConfig::tiny(scale),
        other => return Err(usage(format!("unknown --arch {other:?} (expected standard or tiny)"))),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn kernel(name: &str) -> Result<Interp> {
    Kernel::from_str(name).map(Interp::new).map_err(|e| usage(e.to_string()))
}

/// Apply `key=value` overrides; values use config-file syntax, with bare
/// words taken as strings.
pub fn apply_overrides(cfg: &TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut table: Table = toml::from_str(&cfg.to_text()).expect("config text is valid toml");
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("override {o:?} is not key=value")))?;
        let key = key.trim();
        if !table.contains_key(key) {
            return Err(usage(format!("unknown config key {key:?}")));
        }
        let parsed = toml::from_str::<Table>(&format!("v = {}", value.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(value.trim().to_string()));
        table.insert(key.to_string(), parsed);
    }
    TrainConfig::from_text(&toml::to_string(&table)?).map_err(|e| usage(e.to_string()))
}

fn load_model(path: &Path) -> Result<DsnModel> {
    DsnModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_luma(path: &Path) -> Result<Image> {
    Ok(read_image(path).with_context(|| format!("reading {}", path.display()))?.to_luma())
}

fn write_image(path: &Path, img: &Image) -> Result<()> {
    let png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if png {
        write_png(path, img)?;
    } else {
        write_pgm(path, img)?;
    }
    Ok(())
}

/// The image itself when its size is a multiple of `s`, its centre crop
/// with `auto_crop`, a usage error otherwise.
fn divisible(img: Image, s: usize, auto_crop: bool, path: &Path) -> Result<Image> {
    if img.width().is_multiple_of(s) && img.height().is_multiple_of(s) {
        return Ok(img);
    }
    if auto_crop {
        return Ok(img.crop_to_multiple(s)?.0);
    }
    Err(usage(format!(
        "{} is {}x{}, not a multiple of the scale {s}; pass --auto-crop to centre-crop it",
        path.display(),
        img.width(),
        img.height()
    )))
}

fn codec(a: &CodecArgs) -> Result<Codec> {
    match a.codec.as_str() {
        "deflate" => Ok(Codec::Deflate),
        "external" => {
            let encode = a
                .encode_cmd
                .clone()
                .ok_or_else(|| usage("--codec external needs --encode-cmd"))?;
            Ok(Codec::External {
                encode,
                decode: a.decode_cmd.clone(),
            })
        }
        other => Err(usage(format!("unknown --codec {other:?} (expected deflate or external)"))),
    }
}

fn csv_out(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_train(a: TrainArgs, threads: usize) -> Result<()> {
    let config_path = a
        .config
        .clone()
        .or_else(|| a.resume.as_ref().map(|d| d.join(CONFIG_FILE)));
    let mut cfg = match &config_path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::for_scale(a.scale.unwrap_or(3)),
    };
    if let Some(s) = a.scale {
        if config_path.is_some() && s != cfg.scale {
            return Err(usage(format!("--scale {s} contradicts the config's scale {}", cfg.scale)));
        }
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.freeze_down |= a.freeze_down;
    let cfg = apply_overrides(&cfg, &a.overrides)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let out = a
        .out
        .clone()
        .or_else(|| a.resume.clone())
        .ok_or_else(|| usage("train needs --out (or --resume)"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(out.join(CONFIG_FILE))?;

    let (mut model, resume) = match &a.resume {
        Some(dir) => {
            let st = TrainState::load(dir.join(STATE_FILE), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
                .with_context(|| format!("resuming from {}", dir.display()))?;
            eprintln!("resuming at epoch {} (step {})", st.next_epoch, st.step);
            (st.model.clone(), Some(st))
        }
        None => (DsnModel::init(arch(&a.arch, cfg.scale)?, cfg.seed)?, None),
    };
    let data = build_patchset(&a.data, &cfg)?;
    eprintln!(
        "{} patches of {}x{} from {}",
        data.len(),
        data.patch_size(),
        data.patch_size(),
        data.sources.len()
    );
    let mut observer = |e: &EpochStats| {
        eprintln!("epoch {:>4}  lr {:.2e}  loss {:.5}  psnr {:.2} dB", e.epoch, e.lr, e.loss, e.psnr);
    };
    let report = train(
        &mut model,
        &data,
        &cfg,
        TrainOptions {
            checkpoint_dir: Some(out.clone()),
            resume,
            observer: Some(&mut observer),
        },
    )?;

    // Also covers runs with no epochs left to train.
    model.save(out.join(MODEL_FILE))?;
    let mut m = Manifest::new("train", threads);
    m.set("data", a.data.display().to_string())
        .set("patches", data.len() as i64)
        .set("steps", report.steps as i64)
        .set("model_file", MODEL_FILE)
        .train_config(&cfg)
        .model("model", &model);
    if let Some(last) = report.epochs.last() {
        m.set("final_loss", last.loss).set("final_psnr_db", last.psnr);
    }
    m.write_beside(&out)?;
    println!("wrote {}", out.join(MODEL_FILE).display());
    Ok(())
}

fn cmd_down(a: InferArgs, threads: usize) -> Result<()> {
    let model = load_model(&a.model)?;
    let img = divisible(read_luma(&a.input)?, model.scale(), a.auto_crop, &a.input)?;
    let lr = Transform::Model(&model).down(&img)?;
    write_image(&a.output, &lr)?;
    Manifest::new("down", threads)
        .set("input", a.input.display().to_string())
        .set("output", a.output.display().to_string())
        .model("model", &model)
        .write_beside(&a.output)?;
    Ok(())
}

fn cmd_up(a: InferArgs, threads: usize) -> Result<()> {
    let model = load_model(&a.model)?;
    let lr = read_luma(&a.input)?;
    let sr = Transform::Model(&model).up(&lr)?;
    write_image(&a.output, &sr)?;
    Manifest::new("up", threads)
        .set("input", a.input.display().to_string())
        .set("output", a.output.display().to_string())
        .model("model", &model)
        .write_beside(&a.output)?;
    Ok(())
}

fn cmd_roundtrip(a: RoundtripArgs, threads: usize) -> Result<()> {
    let model = load_model(&a.model)?;
    let s = model.scale();
    let crop = a.crop.unwrap_or(s);
    let hr = divisible(read_luma(&a.input)?, s, a.auto_crop, &a.input)?;
    let (_, sr) = roundtrip(&model, &hr)?;
    let q = quality(&hr, &sr, crop)?;
    println!("dsn      psnr {:.4} dB  ssim {:.4}", q.psnr, q.ssim);
    let mut m = Manifest::new("roundtrip", threads);
    m.set("input", a.input.display().to_string())
        .set("crop", crop as i64)
        .set("psnr_db", q.psnr)
        .set("ssim", q.ssim)
        .model("model", &model);
    if let Some(name) = &a.baseline {
        let interp = kernel(name)?;
        let out = classical_roundtrip(&hr, s, &interp)?;
        let b = quality(&hr, &out, crop)?;
        println!("{:<8} psnr {:.4} dB  ssim {:.4}", interp.kernel.name(), b.psnr, b.ssim);
        m.set("baseline", interp.kernel.name())
            .set("baseline_psnr_db", b.psnr)
            .set("baseline_ssim", b.ssim);
    }
    if let Some(out) = &a.output {
        write_image(out, &sr)?;
        m.set("output", out.display().to_string());
        m.write_beside(out)?;
    } else {
        // Metrics are the only output.
        print!("{}", m.to_text());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, threads: usize) -> Result<()> {
    let model = load_model(&a.model)?;
    let s = model.scale();
    let crop = a.crop.unwrap_or(s);
    let baselines = a.baselines.iter().map(|b| kernel(b)).collect::<Result<Vec<_>>>()?;
    // Smaller images cannot keep anything after the border crop.
    let scan = scan_images(&a.data, 2 * crop + s)?;
    for sk in &scan.skipped {
        eprintln!("warning: skipped {sk}");
    }
    let named: Vec<(String, Image)> = scan.names.iter().cloned().zip(scan.images.iter().cloned()).collect();
    let rows = evaluate_roundtrip(&model, &named, &baselines, crop)?;
    write_metrics_csv(&rows, csv_out(&a.out)?)?;
    for r in rows.iter().filter(|r| r.image == "mean") {
        println!("{:<8} mean psnr {:.4} dB  ssim {:.4}", r.method, r.psnr, r.ssim);
    }
    let skipped: Vec<Value> = scan.skipped.iter().map(|s| Value::from(s.as_str())).collect();
    Manifest::new("eval", threads)
        .set("data", a.data.display().to_string())
        .set("images", scan.images.len() as i64)
        .set("skipped", scan.skipped.len() as i64)
        .set("skipped_files", Value::Array(skipped))
        .set("crop", crop as i64)
        .set("channel", "luminance")
        .model("model", &model)
        .write_beside(&a.out)?;
    Ok(())
}

fn cmd_degmatrix(a: DegmatrixArgs, threads: usize) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::for_scale(a.scale.unwrap_or(2)),
    };
    if let Some(s) = a.scale {
        if a.config.is_some() && s != cfg.scale {
            return Err(usage(format!("--scale {s} contradicts the config's scale {}", cfg.scale)));
        }
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let cfg = apply_overrides(&cfg, &a.overrides)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let s = cfg.scale;
    let crop = a.crop.unwrap_or(s);
    let (train_set, test_set, source) = if a.synthetic {
        (synth::corpus(20, 96, 96, 1000), synth::corpus(5, 96, 96, 5000), "synthetic".to_string())
    } else {
        let (Some(tr), Some(te)) = (&a.train, &a.test) else {
            bail!(UsageError("degmatrix needs --train and --test, or --synthetic".into()));
        };
        let train_set = load_images(tr, cfg.patch())?.0;
        let test_set = load_images(te, 2 * crop + s)?.0;
        (train_set, test_set, format!("{} / {}", tr.display(), te.display()))
    };
    let model_cfg = arch(&a.arch, s)?;
    let m = degradation_matrix(&train_set, &test_set, &model_cfg, &cfg, &Kernel::ALL, crop, |k, e, loss| {
        eprintln!("{k:<8} epoch {e:>4}  loss {loss:.5}");
    })?;
    m.write_csv(csv_out(&a.out)?)?;
    m.write_csv(std::io::stdout())?;
    println!(
        "diagonally dominant: {}  best row: {}",
        m.diagonally_dominant(),
        m.kernels[m.best_row()]
    );
    Manifest::new("degmatrix", threads)
        .set("data", source)
        .set("crop", crop as i64)
        .set("diagonally_dominant", m.diagonally_dominant())
        .set("best_row", m.kernels[m.best_row()].name())
        .train_config(&cfg)
        .write_beside(&a.out)?;
    Ok(())
}

enum Owned {
    Model(DsnModel),
    Classical { scale: usize, interp: Interp },
}

impl Owned {
    fn from_args(t: &TransformArgs, scale: Option<usize>) -> Result<Owned> {
        match (&t.model, &t.baseline) {
            (Some(p), _) => Ok(Owned::Model(load_model(p)?)),
            (None, Some(b)) => Ok(Owned::Classical {
                scale: scale.ok_or_else(|| usage("classical baselines need --scale"))?,
                interp: kernel(b)?,
            }),
            (None, None) => Err(usage("pass --model or --baseline")),
        }
    }

    fn transform(&self) -> Transform<'_> {
        match self {
            Owned::Model(m) => Transform::Model(m),
            Owned::Classical { scale, interp } => Transform::Classical {
                scale: *scale,
                interp: *interp,
            },
        }
    }

    fn record(&self, m: &mut Manifest) {
        match self {
            Owned::Model(model) => {
                m.model("model", model);
            }
            Owned::Classical { scale, interp } => {
                m.set("baseline", interp.kernel.name()).set("scale", *scale as i64);
            }
        }
    }
}

fn cmd_compress(a: CompressArgs, threads: usize) -> Result<()> {
    let t = Owned::from_args(&a.transform, a.scale)?;
    let codec = codec(&a.codec)?;
    let img = read_luma(&a.input)?;
    let bundle = compress(&img, t.transform(), &codec)?;
    bundle.save(&a.output)?;
    println!("{} bytes, {:.4} bpp", bundle.byte_len(), bundle.bpp());
    let mut m = Manifest::new("compress", threads);
    m.set("input", a.input.display().to_string())
        .set("codec", codec.name())
        .set("bytes", bundle.byte_len() as i64)
        .set("bpp", bundle.bpp());
    t.record(&mut m);
    m.write_beside(&a.output)?;
    Ok(())
}

fn cmd_decompress(a: DecompressArgs, threads: usize) -> Result<()> {
    let bundle = Bundle::load(&a.input)?;
    let t = Owned::from_args(&a.transform, Some(bundle.scale))?;
    let codec = codec(&a.codec)?;
    let img = decompress(&bundle, t.transform(), &codec)?;
    write_image(&a.output, &img)?;
    let mut m = Manifest::new("decompress", threads);
    m.set("input", a.input.display().to_string())
        .set("width", img.width() as i64)
        .set("height", img.height() as i64);
    t.record(&mut m);
    m.write_beside(&a.output)?;
    Ok(())
}

fn cmd_rdreport(a: RdreportArgs, threads: usize) -> Result<()> {
    let model = a.model.as_deref().map(load_model).transpose()?;
    let s = match (&model, a.scale) {
        (Some(m), Some(s)) if s != m.scale() => {
            return Err(usage(format!("--scale {s} contradicts the model's scale {}", m.scale())));
        }
        (Some(m), _) => m.scale(),
        (None, Some(s)) => s,
        (None, None) => return Err(usage("rdreport needs --model or --scale")),
    };
    let names = if a.baselines.is_empty() {
        vec!["bicubic".to_string()]
    } else {
        a.baselines.clone()
    };
    let interps = names.iter().map(|b| kernel(b)).collect::<Result<Vec<_>>>()?;
    let mut transforms: Vec<Transform<'_>> = Vec::new();
    if let Some(m) = &model {
        transforms.push(Transform::Model(m));
    }
    transforms.extend(interps.iter().map(|&interp| Transform::Classical { scale: s, interp }));
    let codec = codec(&a.codec)?;
    let crop = a.crop.unwrap_or(s);
    let scan = scan_images(&a.data, 2 * crop + s)?;
    for sk in &scan.skipped {
        eprintln!("warning: skipped {sk}");
    }
    let named: Vec<(String, Image)> = scan.names.iter().cloned().zip(scan.images.iter().cloned()).collect();
    let rows = rate_distortion_report(&named, &transforms, &codec, crop)?;
    write_rd_csv(&rows, csv_out(&a.out)?)?;
    write_rd_csv(&rows, std::io::stdout())?;
    let mut m = Manifest::new("rdreport", threads);
    m.set("data", a.data.display().to_string())
        .set("images", scan.images.len() as i64)
        .set("skipped", scan.skipped.len() as i64)
        .set("codec", codec.name())
        .set("crop", crop as i64);
    if let Some(model) = &model {
        m.model("model", model);
    }
    m.write_beside(&a.out)?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, threads: usize) -> Result<()> {
    let opts = GradCheckOptions {
        seed: a.seed,
        samples: a.samples,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let entries = gradsuite::run(&opts)?;
    let mut failed = Vec::new();
    let mut csv = String::from("case,max_rel_error,checked,skipped_kinks,excluded,tolerance,passed\n");
    for e in &entries {
        let r = &e.report;
        let ok = r.passed();
        println!(
            "{} {:<34} max rel err {:.3e}  checked {:>3}  kinks skipped {:>2}  excluded {:>2}",
            if ok { "pass" } else { "FAIL" },
            e.name,
            r.max_rel_error,
            r.checked,
            r.skipped_kinks,
            r.excluded
        );
        csv.push_str(&format!(
            "{},{:e},{},{},{},{:e},{}\n",
            e.name, r.max_rel_error, r.checked, r.skipped_kinks, r.excluded, r.tolerance, ok
        ));
        if !ok {
            failed.push(e.name);
        }
    }
    if let Some(out) = &a.out {
        fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
        Manifest::new("gradcheck", threads)
            .set("seed", a.seed as i64)
            .set("samples", a.samples as i64)
            .set("tolerance", a.tolerance)
            .set("cases", entries.len() as i64)
            .set("failed", failed.len() as i64)
            .write_beside(out)?;
    }
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    println!("all {} cases passed", entries.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_values_and_reject_unknown_keys() {
        let base = TrainConfig::for_scale(2);
        let cfg = apply_overrides(&base, &["epochs=7".into(), "lr_start = 0.002".into(), "rotations=false".into()]).unwrap();
        assert_eq!((cfg.epochs, cfg.lr_start, cfg.rotations), (7, 0.002, false));
        assert!(apply_overrides(&base, &["nope=1".into()]).unwrap_err().is::<UsageError>());
        assert!(apply_overrides(&base, &["epochs".into()]).is_err());
        assert!(apply_overrides(&base, &["batch_size=big".into()]).is_err());
    }

    #[test]
    fn arch_names() {
        assert_eq!(arch("tiny", 3).unwrap(), DsnConfig::tiny(3));
        assert!(arch("huge", 3).unwrap_err().is::<UsageError>());
    }
}
