//! Resumable training state: model checkpoint plus optimizer moments.
//!
//! ```text
//! "DSNT", u32 version, u64 next epoch, u64 step, u64 adam t,
//! u32 checkpoint length, checkpoint bytes,
//! u32 tensor count, per tensor: u32 length, f64 m[length], f64 v[length],
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::Adam;
use crate::error::{Error, Result};
use crate::model::DsnModel;

pub const STATE_MAGIC: [u8; 4] = *b"DSNT";
const VERSION: u32 = 1;
const FORMAT: &str = "train state";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DsnModel,
    pub adam: Adam,
    /// First epoch still to run.
    pub next_epoch: usize,
    pub step: usize,
}

fn take<'a>(buf: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *at + n > buf.len() {
        return Err(Error::Truncated {
            format: FORMAT,
            expected: *at + n,
            actual: buf.len(),
        });
    }
    let s = &buf[*at..*at + n];
    *at += n;
    Ok(s)
}

fn u32_at(buf: &[u8], at: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, at, 4)?.try_into().unwrap()))
}

fn u64_at(buf: &[u8], at: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, at, 8)?.try_into().unwrap()))
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = STATE_MAGIC.to_vec();
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.next_epoch as u64).to_le_bytes());
        b.extend_from_slice(&(self.step as u64).to_le_bytes());
        b.extend_from_slice(&self.adam.t.to_le_bytes());
        let ckpt = self.model.to_bytes();
        b.extend_from_slice(&(ckpt.len() as u32).to_le_bytes());
        b.extend_from_slice(&ckpt);
        b.extend_from_slice(&(self.adam.m.len() as u32).to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            b.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for x in m.iter().chain(v) {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    /// Parse a state file; Adam hyper-parameters come from the caller.
    pub fn from_bytes(bytes: &[u8], beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != STATE_MAGIC {
            return Err(Error::BadMagic {
                expected: STATE_MAGIC,
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
        let mut at = 4;
        let version = u32_at(body, &mut at)?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                supported: VERSION,
            });
        }
        let next_epoch = u64_at(body, &mut at)? as usize;
        let step = u64_at(body, &mut at)? as usize;
        let t = u64_at(body, &mut at)?;
        let len = u32_at(body, &mut at)? as usize;
        let model = DsnModel::from_bytes(take(body, &mut at, len)?)?;
        let count = u32_at(body, &mut at)? as usize;
        if count != model.params().len() {
            return Err(Error::Malformed {
                format: FORMAT,
                reason: format!("{count} moment tensors for {} parameters", model.params().len()),
            });
        }
        let mut adam = Adam::new(model.params(), beta1, beta2, eps);
        adam.t = t;
        for i in 0..count {
            let n = u32_at(body, &mut at)? as usize;
            if n != adam.m[i].len() {
                return Err(Error::Malformed {
                    format: FORMAT,
                    reason: format!("moment tensor {i} has {n} entries, expected {}", adam.m[i].len()),
                });
            }
            let raw = take(body, &mut at, 16 * n)?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            adam.m[i].copy_from_slice(&vals[..n]);
            adam.v[i].copy_from_slice(&vals[n..]);
        }
        if at != body.len() {
            return Err(Error::Malformed {
                format: FORMAT,
                reason: "trailing bytes".into(),
            });
        }
        Ok(TrainState {
            model,
            adam,
            next_epoch,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TrainState::from_bytes(&bytes, beta1, beta2, eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DsnConfig;

    #[test]
    fn round_trip() {
        let model = DsnModel::init(DsnConfig::tiny(2), 5).unwrap();
        let mut adam = Adam::new(model.params(), 0.9, 0.999, 1e-8);
        adam.t = 17;
        adam.m[3][0] = 0.125;
        adam.v[4][1] = 3.5e-9;
        let st = TrainState {
            model,
            adam,
            next_epoch: 4,
            step: 99,
        };
        let b = st.to_bytes();
        assert_eq!(TrainState::from_bytes(&b, 0.9, 0.999, 1e-8).unwrap(), st);
        let mut bad = b.clone();
        bad[30] ^= 1;
        assert!(matches!(
            TrainState::from_bytes(&bad, 0.9, 0.999, 1e-8),
            Err(Error::Checksum { .. })
        ));
    }
}
