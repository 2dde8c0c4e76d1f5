//! Down-sampler as a compression transform: the learned low-resolution
//! image is stored as a PGM inside a lossless codec, and the up-sampler
//! decodes it.
//!
//! Bundle layout (little-endian):
//!
//! ```text
//! "DSNB"          magic
//! u32             version
//! u32             scale factor
//! u32, u32        original width, height
//! u32, u32        crop offset left, top
//! [u8; 32]        transform hash (model checkpoint or classical kernel)
//! u8              codec tag: 0 deflate, 1 external
//! u32             payload length
//! payload         codec output for the PGM bytes of the LR image
//! u32             CRC-32 of every preceding byte
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::process::Command;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{decode_pgm, encode_pgm, quality, Image};
use crate::model::DsnModel;
use crate::resample::{resize_image, Interp};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: [u8; 4] = *b"DSNB";
pub const BUNDLE_VERSION: u32 = 1;
const FORMAT: &str = "bundle";
/// Fixed bytes around the payload.
pub const BUNDLE_OVERHEAD: usize = 4 + 4 * 6 + 32 + 1 + 4 + 4;

/// Lossless inner codec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Codec {
    Deflate,
    /// Shell command templates; `{in}` and `{out}` are replaced by file
    /// paths. The payload is whatever `encode` writes to `{out}`.
    External { encode: String, decode: Option<String> },
}

impl Codec {
    pub fn tag(&self) -> u8 {
        match self {
            Codec::Deflate => 0,
            Codec::External { .. } => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Codec::Deflate => "deflate",
            Codec::External { .. } => "external",
        }
    }

    pub fn encode(&self, data: &[u8]) -> Result<Vec<u8>> {
        match self {
            Codec::Deflate => {
                let mut enc = ZlibEncoder::new(Vec::new(), Compression::best());
                enc.write_all(data).and_then(|_| enc.finish()).map_err(|e| Error::Malformed {
                    format: "deflate",
                    reason: e.to_string(),
                })
            }
            Codec::External { encode, .. } => run_external(encode, data),
        }
    }

    pub fn decode(&self, data: &[u8]) -> Result<Vec<u8>> {
        match self {
            Codec::Deflate => {
                let mut out = Vec::new();
                ZlibDecoder::new(data).read_to_end(&mut out).map_err(|e| Error::Malformed {
                    format: "deflate",
                    reason: e.to_string(),
                })?;
                Ok(out)
            }
            Codec::External { decode: Some(cmd), .. } => run_external(cmd, data),
            Codec::External { decode: None, .. } => Err(Error::InvalidArgument(
                "bundle uses an external codec; a decode command is required".into(),
            )),
        }
    }
}

fn run_external(template: &str, data: &[u8]) -> Result<Vec<u8>> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("in.bin");
    let output = dir.path().join("out.bin");
    fs::write(&input, data).map_err(|e| Error::io(&input, e))?;
    let cmd = template
        .replace("{in}", &input.to_string_lossy())
        .replace("{out}", &output.to_string_lossy());
    let status = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| Error::ExternalCodec {
            command: cmd.clone(),
            status: e.to_string(),
        })?;
    if !status.success() {
        return Err(Error::ExternalCodec {
            command: cmd,
            status: status.to_string(),
        });
    }
    fs::read(&output).map_err(|e| Error::io(&output, e))
}

/// Down/up-sampling pair used around the codec.
#[derive(Debug, Clone, Copy)]
pub enum Transform<'a> {
    Model(&'a DsnModel),
    /// Classical resize down and back up with the same kernel.
    Classical { scale: usize, interp: Interp },
}

impl Transform<'_> {
    pub fn scale(&self) -> usize {
        match self {
            Transform::Model(m) => m.scale(),
            Transform::Classical { scale, .. } => *scale,
        }
    }

    /// Identifies the decoder a bundle needs.
    pub fn hash(&self) -> [u8; 32] {
        match self {
            Transform::Model(m) => m.hash(),
            Transform::Classical { scale, interp } => Sha256::digest(format!(
                "classical:{}:{}:{}:{}",
                interp.kernel, interp.a, interp.antialias, scale
            ))
            .into(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Transform::Model(_) => "dsn".into(),
            Transform::Classical { interp, .. } => interp.kernel.to_string(),
        }
    }

    /// 8-bit low-resolution image of a luminance image with dims divisible
    /// by the scale.
    pub fn down(&self, hr: &Image) -> Result<Image> {
        let s = self.scale();
        match self {
            Transform::Model(m) => {
                let q = m.config().qbrelu;
                if q.levels > 256 {
                    return Err(Error::Unsupported {
                        format: FORMAT,
                        reason: format!("{} quantization levels do not fit in 8 bits", q.levels),
                    });
                }
                let lr = m.forward_down(&hr.to_tensor::<f32>()?)?;
                let data = lr.data().iter().map(|&v| q.level(f64::from(v)) as u8).collect();
                Image::gray(hr.width() / s, hr.height() / s, data)
            }
            Transform::Classical { interp, .. } => resize_image(hr, hr.width() / s, hr.height() / s, interp),
        }
    }

    pub fn up(&self, lr: &Image) -> Result<Image> {
        let s = self.scale();
        match self {
            Transform::Model(m) => {
                let q = m.config().qbrelu;
                let data = lr.data().iter().map(|&l| q.grid_value(u32::from(l)) as f32).collect();
                let t = Tensor::from_vec(crate::tensor::Shape::new(1, 1, lr.height(), lr.width()), data)?;
                Image::from_tensor(&m.forward_up(&t)?, 0)
            }
            Transform::Classical { interp, .. } => resize_image(lr, lr.width() * s, lr.height() * s, interp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub scale: usize,
    pub width: usize,
    pub height: usize,
    pub crop_left: usize,
    pub crop_top: usize,
    pub transform_hash: [u8; 32],
    pub codec_tag: u8,
    pub payload: Vec<u8>,
}

fn put_u32(b: &mut Vec<u8>, v: usize) {
    b.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Bundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(BUNDLE_OVERHEAD + self.payload.len());
        b.extend_from_slice(&BUNDLE_MAGIC);
        b.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        for v in [self.scale, self.width, self.height, self.crop_left, self.crop_top] {
            put_u32(&mut b, v);
        }
        b.extend_from_slice(&self.transform_hash);
        b.push(self.codec_tag);
        put_u32(&mut b, self.payload.len());
        b.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != BUNDLE_MAGIC {
            return Err(Error::BadMagic {
                expected: BUNDLE_MAGIC,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < BUNDLE_OVERHEAD {
            return Err(Error::Truncated {
                format: FORMAT,
                expected: BUNDLE_OVERHEAD,
                actual: bytes.len(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let word = |i: usize| u32::from_le_bytes(body[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != BUNDLE_VERSION {
            return Err(Error::Version {
                found: word(0),
                supported: BUNDLE_VERSION,
            });
        }
        let at = 4 + 4 * 6;
        let transform_hash: [u8; 32] = body[at..at + 32].try_into().unwrap();
        let codec_tag = body[at + 32];
        let len = u32::from_le_bytes(body[at + 33..at + 37].try_into().unwrap()) as usize;
        let payload = &body[at + 37..];
        if payload.len() != len {
            return Err(Error::Truncated {
                format: FORMAT,
                expected: len,
                actual: payload.len(),
            });
        }
        if codec_tag > 1 {
            return Err(Error::Unsupported {
                format: FORMAT,
                reason: format!("codec tag {codec_tag}"),
            });
        }
        Ok(Bundle {
            scale: word(1) as usize,
            width: word(2) as usize,
            height: word(3) as usize,
            crop_left: word(4) as usize,
            crop_top: word(5) as usize,
            transform_hash,
            codec_tag,
            payload: payload.to_vec(),
        })
    }

    /// Serialized size in bytes, header and checksum included.
    pub fn byte_len(&self) -> usize {
        BUNDLE_OVERHEAD + self.payload.len()
    }

    /// Bits per original pixel over the whole serialized bundle.
    pub fn bpp(&self) -> f64 {
        bits_per_pixel(self.byte_len(), self.width * self.height)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Bundle::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn bits_per_pixel(bytes: usize, pixels: usize) -> f64 {
    8.0 * bytes as f64 / pixels as f64
}

/// Luminance of `hr`, centre-cropped to the scale, down-sampled, written as
/// PGM, and losslessly coded.
pub fn compress(hr: &Image, transform: Transform<'_>, codec: &Codec) -> Result<Bundle> {
    let s = transform.scale();
    let y = hr.to_luma();
    let (cropped, (left, top)) = y.crop_to_multiple(s)?;
    let lr = transform.down(&cropped)?;
    Ok(Bundle {
        scale: s,
        width: y.width(),
        height: y.height(),
        crop_left: left,
        crop_top: top,
        transform_hash: transform.hash(),
        codec_tag: codec.tag(),
        payload: codec.encode(&encode_pgm(&lr)?)?,
    })
}

/// The stored low-resolution image.
pub fn decode_lr(bundle: &Bundle, codec: &Codec) -> Result<Image> {
    if codec.tag() != bundle.codec_tag {
        return Err(Error::InvalidArgument(format!(
            "bundle codec tag {} does not match {}",
            bundle.codec_tag,
            codec.name()
        )));
    }
    decode_pgm(&codec.decode(&bundle.payload)?)
}

/// Inverse of [`compress`]; the output has the original dimensions, with
/// any cropped margin restored by edge replication.
pub fn decompress(bundle: &Bundle, transform: Transform<'_>, codec: &Codec) -> Result<Image> {
    if transform.hash() != bundle.transform_hash {
        return Err(Error::ModelMismatch);
    }
    if transform.scale() != bundle.scale {
        return Err(Error::dim("decompress", "scale", bundle.scale, transform.scale()));
    }
    let lr = decode_lr(bundle, codec)?;
    let s = bundle.scale;
    let (cw, ch) = (bundle.width - bundle.width % s, bundle.height - bundle.height % s);
    if lr.width() * s != cw || lr.height() * s != ch {
        return Err(Error::Malformed {
            format: FORMAT,
            reason: format!(
                "{}x{} payload does not match {}x{} at scale {s}",
                lr.width(),
                lr.height(),
                bundle.width,
                bundle.height
            ),
        });
    }
    let restored = transform.up(&lr)?;
    restored.pad_replicate(bundle.width, bundle.height, bundle.crop_left, bundle.crop_top)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdRow {
    pub image: String,
    pub method: String,
    pub bytes: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Compress and decompress each image with each transform; quality is
/// measured on luminance after removing `crop` border pixels.
pub fn rate_distortion_report(
    images: &[(String, Image)],
    transforms: &[Transform<'_>],
    codec: &Codec,
    crop: usize,
) -> Result<Vec<RdRow>> {
    let mut rows = Vec::new();
    for (name, img) in images {
        let y = img.to_luma();
        for t in transforms {
            let bundle = compress(&y, *t, codec)?;
            let out = decompress(&bundle, *t, codec)?;
            let q = quality(&y, &out, crop)?;
            rows.push(RdRow {
                image: name.clone(),
                method: format!("{}+{}", t.name(), codec.name()),
                bytes: bundle.byte_len(),
                bpp: bundle.bpp(),
                psnr: q.psnr,
                ssim: q.ssim,
            });
        }
    }
    Ok(rows)
}

pub fn write_rd_csv<W: Write>(rows: &[RdRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Malformed {
        format: "csv",
        reason: e.to_string(),
    };
    w.write_record(["image", "method", "bytes", "bpp", "psnr_db", "ssim"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.image.clone(),
            r.method.clone(),
            r.bytes.to_string(),
            format!("{:.4}", r.bpp),
            format!("{:.4}", r.psnr),
            format!("{:.4}", r.ssim),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Malformed {
        format: "csv",
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DsnConfig;
    use crate::synth;

    fn zero_head(s: usize) -> DsnModel {
        let mut m = DsnModel::init(DsnConfig::tiny(s), 0).unwrap();
        m.zero_residual_heads();
        m
    }

    #[test]
    fn bpp_definition() {
        assert!((bits_per_pixel(1000, 510 * 510) - 0.030757).abs() < 1e-6);
    }

    #[test]
    fn deflate_is_lossless() {
        let data: Vec<u8> = (0..5000u32).map(|i| (i * i % 251) as u8).collect();
        let c = Codec::Deflate;
        assert_eq!(c.decode(&c.encode(&data).unwrap()).unwrap(), data);
        assert_eq!(c.decode(&c.encode(&[]).unwrap()).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn stored_lr_matches_forward_down() {
        let m = zero_head(3);
        let img = synth::scene(30, 24, 1, &Default::default());
        let b = compress(&img, Transform::Model(&m), &Codec::Deflate).unwrap();
        let lr = decode_lr(&b, &Codec::Deflate).unwrap();
        let direct = m.forward_down(&img.to_tensor().unwrap()).unwrap();
        assert_eq!(lr, Image::from_tensor(&direct, 0).unwrap());
        assert_eq!(b.byte_len(), b.to_bytes().len());
    }

    #[test]
    fn zero_heads_decode_to_pool_then_replicate() {
        let m = zero_head(2);
        let img = synth::scene(16, 12, 4, &Default::default());
        let b = compress(&img, Transform::Model(&m), &Codec::Deflate).unwrap();
        let out = decompress(&b, Transform::Model(&m), &Codec::Deflate).unwrap();
        let lr = decode_lr(&b, &Codec::Deflate).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                assert_eq!(out.get(x, y, 0), lr.get(x / 2, y / 2, 0), "({x}, {y})");
            }
        }
    }

    #[test]
    fn odd_dims_are_restored() {
        let m = zero_head(3);
        let img = synth::scene(31, 26, 2, &Default::default());
        let b = compress(&img, Transform::Model(&m), &Codec::Deflate).unwrap();
        assert_eq!((b.width, b.height, b.crop_left, b.crop_top), (31, 26, 0, 1));
        let back = Bundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        let out = decompress(&back, Transform::Model(&m), &Codec::Deflate).unwrap();
        assert_eq!((out.width(), out.height()), (31, 26));
    }

    #[test]
    fn header_layout_and_checks() {
        let t = Transform::Classical {
            scale: 2,
            interp: Interp::bicubic(),
        };
        let img = synth::scene(20, 20, 3, &Default::default());
        let b = compress(&img, t, &Codec::Deflate).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"DSNB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 20);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Bundle::from_bytes(&bad), Err(Error::Checksum { .. })));
        let m = zero_head(2);
        assert!(matches!(
            decompress(&b, Transform::Model(&m), &Codec::Deflate),
            Err(Error::ModelMismatch)
        ));
        let out = decompress(&b, t, &Codec::Deflate).unwrap();
        assert_eq!((out.width(), out.height()), (20, 20));
    }

    #[cfg(unix)]
    #[test]
    fn external_codec_hook() {
        let c = Codec::External {
            encode: "cp {in} {out}".into(),
            decode: Some("cp {in} {out}".into()),
        };
        let m = zero_head(2);
        let img = synth::scene(20, 20, 5, &Default::default());
        let b = compress(&img, Transform::Model(&m), &c).unwrap();
        assert_eq!(b.codec_tag, 1);
        assert_eq!(b.payload.len(), 13 + 10 * 10);
        decompress(&b, Transform::Model(&m), &c).unwrap();
        let failing = Codec::External {
            encode: "exit 3".into(),
            decode: None,
        };
        let err = compress(&img, Transform::Model(&m), &failing).unwrap_err();
        assert!(matches!(err, Error::ExternalCodec { .. }), "{err}");
        assert!(err.to_string().contains("3"), "{err}");
    }

    #[test]
    fn report_rows() {
        let m = zero_head(2);
        let imgs = vec![("a".to_string(), synth::scene(24, 24, 6, &Default::default()))];
        let rows = rate_distortion_report(
            &imgs,
            &[
                Transform::Model(&m),
                Transform::Classical {
                    scale: 2,
                    interp: Interp::bicubic(),
                },
            ],
            &Codec::Deflate,
            2,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.bpp < 8.0));
        let mut out = Vec::new();
        write_rd_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("image,method,bytes,bpp,psnr_db,ssim\n"));
        assert!(text.contains("dsn+deflate"));
    }
}
