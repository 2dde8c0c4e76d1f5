//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "DSNC"                       magic
//! u32                          format version
//! u32                          scale factor
//! u32 + bytes                  canonical config block (see `config_bytes`)
//! [u8; 32]                     SHA-256 of the config block
//! u32                          tensor count
//!   per tensor: u16 name length, UTF-8 name, 4 x u32 dims
//! f32 * total                  weights in table order
//! u32                          CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DsnConfig, DsnModel};
use crate::error::{Error, Result};
use crate::layers::{DenseBlockConfig, QBReluParams};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSNC";
pub const CHECKPOINT_VERSION: u32 = 1;

const FORMAT: &str = "checkpoint";

/// Canonical byte encoding of everything in a config except the scale.
fn config_bytes(cfg: &DsnConfig) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&(cfg.scale as u32).to_le_bytes());
    b.extend_from_slice(&(cfg.down_widths.len() as u32).to_le_bytes());
    for &w in &cfg.down_widths {
        b.extend_from_slice(&(w as u32).to_le_bytes());
    }
    let d = &cfg.dense;
    for v in [d.depth, d.growth, d.bottleneck_width, d.input_width] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(&cfg.leaky_slope.to_le_bytes());
    b.extend_from_slice(&cfg.qbrelu.t_min.to_le_bytes());
    b.extend_from_slice(&cfg.qbrelu.t_max.to_le_bytes());
    b.extend_from_slice(&cfg.qbrelu.levels.to_le_bytes());
    b
}

/// SHA-256 of the canonical config encoding.
pub fn config_hash(cfg: &DsnConfig) -> [u8; 32] {
    Sha256::digest(config_bytes(cfg)).into()
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Truncated {
                format: FORMAT,
                expected: self.at + n,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn parse_config(bytes: &[u8]) -> Result<DsnConfig> {
    let mut r = Reader { buf: bytes, at: 0 };
    let scale = r.usize()?;
    let n = r.usize()?;
    if n > 1024 {
        return Err(Error::Malformed {
            format: FORMAT,
            reason: format!("implausible down-sampler depth {n}"),
        });
    }
    let down_widths = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let dense = DenseBlockConfig {
        depth: r.usize()?,
        growth: r.usize()?,
        bottleneck_width: r.usize()?,
        input_width: r.usize()?,
    };
    let leaky_slope = r.f64()?;
    let qbrelu = QBReluParams {
        t_min: r.f64()?,
        t_max: r.f64()?,
        levels: r.u32()?,
    };
    if r.at != bytes.len() {
        return Err(Error::Malformed {
            format: FORMAT,
            reason: "trailing bytes in config block".into(),
        });
    }
    Ok(DsnConfig {
        scale,
        down_widths,
        dense,
        leaky_slope,
        qbrelu,
    })
}

impl DsnModel {
    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(&self.config)
    }

    /// SHA-256 over the serialized checkpoint; identifies the exact weights.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = config_bytes(&self.config);
        let mut b = Vec::with_capacity(64 + cfg.len() + 4 * self.param_count());
        b.extend_from_slice(&CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.scale as u32).to_le_bytes());
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(&cfg);
        b.extend_from_slice(&config_hash(&self.config));
        let specs = self.config.param_specs();
        b.extend_from_slice(&(specs.len() as u32).to_le_bytes());
        for spec in &specs {
            b.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
            b.extend_from_slice(spec.name.as_bytes());
            for d in spec.shape.dims() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for p in &self.params {
            for v in p.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                format: FORMAT,
                expected: 12,
                actual: bytes.len(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, at: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let scale = r.usize()?;
        let cfg_len = r.usize()?;
        let config = parse_config(r.take(cfg_len)?)?;
        if config.scale != scale {
            return Err(Error::Malformed {
                format: FORMAT,
                reason: format!("scale {scale} disagrees with config scale {}", config.scale),
            });
        }
        let stored_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if stored_hash != config_hash(&config) {
            return Err(Error::Malformed {
                format: FORMAT,
                reason: "config hash does not match config block".into(),
            });
        }
        config.validate()?;
        let specs = config.param_specs();
        let count = r.usize()?;
        if count != specs.len() {
            return Err(Error::Malformed {
                format: FORMAT,
                reason: format!("expected {} tensors, table lists {count}", specs.len()),
            });
        }
        for spec in &specs {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Malformed {
                format: FORMAT,
                reason: "tensor name is not UTF-8".into(),
            })?;
            let dims = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            if name != spec.name || shape != spec.shape {
                return Err(Error::Malformed {
                    format: FORMAT,
                    reason: format!(
                        "shape table entry {name} {shape} does not match expected {} {}",
                        spec.name, spec.shape
                    ),
                });
            }
        }
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let raw = r.take(4 * spec.shape.len())?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::from_vec(spec.shape, data)?);
        }
        if r.at != body.len() {
            return Err(Error::Malformed {
                format: FORMAT,
                reason: "trailing bytes after weight payload".into(),
            });
        }
        DsnModel::from_parts(config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        DsnModel::from_bytes(&bytes)
    }

    /// Load, refusing checkpoints written for a different configuration.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &DsnConfig) -> Result<Self> {
        let model = DsnModel::load(path)?;
        if model.config_hash() != config_hash(expected) {
            return Err(Error::ConfigMismatch);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DsnModel {
        DsnModel::init(DsnConfig::tiny(2), 42).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let back = DsnModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), m.to_bytes());
    }

    #[test]
    fn header_layout() {
        let b = model().to_bytes();
        assert_eq!(&b[..4], b"DSNC");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let b = model().to_bytes();
        let err = DsnModel::from_bytes(&b[..b.len() - 10]).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
    }

    #[test]
    fn corrupted_payload_is_a_checksum_error() {
        let mut b = model().to_bytes();
        let mid = b.len() / 2;
        b[mid] ^= 0x40;
        assert!(matches!(DsnModel::from_bytes(&b), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_magic() {
        let mut b = model().to_bytes();
        b[0] = b'X';
        assert!(matches!(DsnModel::from_bytes(&b), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut b = model().to_bytes();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        let n = b.len() - 4;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            DsnModel::from_bytes(&b),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn config_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsnc");
        let m = model();
        m.save(&path).unwrap();
        assert_eq!(DsnModel::load_expecting(&path, m.config()).unwrap(), m);
        let other = DsnConfig::tiny(3);
        assert!(matches!(
            DsnModel::load_expecting(&path, &other),
            Err(Error::ConfigMismatch)
        ));
    }
}
