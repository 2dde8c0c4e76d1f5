//! PGM (binary P5, maxval 255) and PNG file access.

use std::fs;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use super::Image;
use crate::error::{Error, Result};

const PGM: &str = "pgm";
const PNG: &str = "png";

/// Serialize a single-channel image as `P5\n{w} {h}\n255\n` plus raw samples.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::Unsupported {
            format: PGM,
            reason: format!("{} channels; PGM holds one", img.channels()),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.at < self.bytes.len() {
            match self.bytes[self.at] {
                b'#' => {
                    while self.at < self.bytes.len() && self.bytes[self.at] != b'\n' {
                        self.at += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => self.at += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.at;
        while self.at < self.bytes.len() && self.bytes[self.at].is_ascii_digit() {
            self.at += 1;
        }
        if start == self.at {
            return Err(Error::Malformed {
                format: PGM,
                reason: format!("missing {what} in header"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed {
                format: PGM,
                reason: format!("{what} out of range"),
            })
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Malformed {
            format: PGM,
            reason: "missing P5 magic".into(),
        });
    }
    let mut h = Header { bytes, at: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Unsupported {
            format: PGM,
            reason: format!("maxval {maxval}; only 8-bit (255) images are read"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(h.at) {
        Some(c) if c.is_ascii_whitespace() => h.at += 1,
        _ => {
            return Err(Error::Malformed {
                format: PGM,
                reason: "header not terminated by whitespace".into(),
            })
        }
    }
    if width == 0 || height == 0 {
        return Err(Error::Malformed {
            format: PGM,
            reason: format!("empty image {width}x{height}"),
        });
    }
    let need = width.checked_mul(height).ok_or_else(|| Error::Malformed {
        format: PGM,
        reason: "dimensions overflow".into(),
    })?;
    let raster = &bytes[h.at..];
    if raster.len() < need {
        return Err(Error::Truncated {
            format: PGM,
            expected: need,
            actual: raster.len(),
        });
    }
    Image::gray(width, height, raster[..need].to_vec())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

fn from_dynamic(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color() {
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
            Image::gray(w, h, img.into_luma8().into_raw())
        }
        _ => Image::new(w, h, 3, img.into_rgb8().into_raw()),
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Malformed {
        format: PNG,
        reason: e.to_string(),
    })?;
    from_dynamic(img)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_png(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Malformed {
            format: PNG,
            reason: other.to_string(),
        },
    })
}

/// Decode PGM or PNG bytes, chosen by content.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        Err(Error::Unsupported {
            format: "image",
            reason: "neither PGM (P5) nor PNG".into(),
        })
    }
}

/// Read a PGM or PNG file, chosen by content.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Unsupported { format, .. } => Error::Unsupported {
            format,
            reason: format!("{} is neither PGM (P5) nor PNG", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        Image::from_fn_gray(5, 3, |x, y| (x * 40 + y * 7) as u8)
    }

    #[test]
    fn header_is_byte_exact() {
        let b = encode_pgm(&sample()).unwrap();
        assert!(b.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(b.len(), 11 + 15);
        assert_eq!(decode_pgm(&b).unwrap(), sample());
    }

    #[test]
    fn comments_in_header() {
        let mut b = b"P5 # made by hand\n5 3\n# max\n255\n".to_vec();
        b.extend_from_slice(sample().data());
        assert_eq!(decode_pgm(&b).unwrap(), sample());
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Malformed { .. })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(Error::Unsupported { .. })));
        assert!(matches!(decode_pgm(b"P5\n4 4\n255\n\0\0"), Err(Error::Truncated { .. })));
        assert!(matches!(decode_pgm(b"P5\n4\n"), Err(Error::Malformed { .. })));
        let rgb = Image::new(1, 1, 3, vec![1, 2, 3]).unwrap();
        assert!(encode_pgm(&rgb).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &sample()).unwrap();
        assert_eq!(read_png(&p).unwrap(), sample());
        assert_eq!(read_image(&p).unwrap(), sample());
        let rgb = Image::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        write_png(&p, &rgb).unwrap();
        assert_eq!(read_image(&p).unwrap(), rgb);
        let q = dir.path().join("a.pgm");
        write_pgm(&q, &sample()).unwrap();
        assert_eq!(read_image(&q).unwrap(), sample());
    }
}
