use std::fs;
use std::path::{Path, PathBuf};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::imaging::{read_image, Image};
use crate::tensor::{Shape, Tensor};

/// Where a patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub image: usize,
    /// Counter-clockwise quarter turns applied before tiling.
    pub rotation: usize,
    /// Top-left corner in the rotated image.
    pub x: usize,
    pub y: usize,
}

/// HR training patches, `(n, 1, p, p)` on a `[0, 1]` scale.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Tensor<f32>,
    pub provenance: Vec<Provenance>,
    pub sources: Vec<String>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.shape().h
    }

    /// Stack the listed patches into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let p = self.patch_size();
        let mut out = Tensor::zeros(Shape::new(indices.len(), 1, p, p));
        for (dst, &i) in indices.iter().enumerate() {
            out.item_mut(dst).copy_from_slice(self.patches.item(i));
        }
        Ok(out)
    }
}

/// Tile every image (and its rotations) with non-overlapping `patch x patch`
/// windows, dropping partial tiles at the right and bottom.
pub fn patches_from_images(images: &[Image], names: &[String], patch: usize, rotations: bool) -> Result<PatchSet> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let turns = if rotations { 4 } else { 1 };
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for (id, img) in images.iter().enumerate() {
        let y = img.to_luma();
        for r in 0..turns {
            let rot = y.rotate(r);
            for ty in 0..rot.height() / patch {
                for tx in 0..rot.width() / patch {
                    let (x0, y0) = (tx * patch, ty * patch);
                    for row in y0..y0 + patch {
                        let start = row * rot.width() + x0;
                        data.extend(rot.data()[start..start + patch].iter().map(|&v| f32::from(v) / 255.0));
                    }
                    provenance.push(Provenance {
                        image: id,
                        rotation: r,
                        x: x0,
                        y: y0,
                    });
                }
            }
        }
    }
    let n = provenance.len();
    Ok(PatchSet {
        patches: Tensor::from_vec(Shape::new(n, 1, patch, patch), data)?,
        provenance,
        sources: names.to_vec(),
    })
}

/// Readable images of a directory plus a description of every file that
/// was passed over.
#[derive(Debug, Clone)]
pub struct ImageScan {
    pub images: Vec<Image>,
    pub names: Vec<String>,
    pub skipped: Vec<String>,
}

/// Load every PNG/PGM image in `dir` (sorted by file name).
///
/// Unreadable files and images smaller than `min_side` are skipped; the
/// error lists them when nothing usable remains.
pub fn scan_images(dir: &Path, min_side: usize) -> Result<ImageScan> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut names = Vec::new();
    let mut skipped = Vec::new();
    for p in &paths {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match read_image(p) {
            Ok(img) if img.width() >= min_side && img.height() >= min_side => {
                images.push(img);
                names.push(name);
            }
            Ok(img) => skipped.push(format!("{name} ({}x{} < {min_side})", img.width(), img.height())),
            Err(e) => skipped.push(format!("{name} ({e})")),
        }
    }
    if images.is_empty() {
        let reason = if paths.is_empty() {
            "directory is empty".to_string()
        } else {
            format!("skipped {}", skipped.join(", "))
        };
        return Err(Error::EmptyDataset {
            dir: dir.to_path_buf(),
            reason,
        });
    }
    Ok(ImageScan { images, names, skipped })
}

/// [`scan_images`] without the skip list.
pub fn load_images(dir: &Path, min_side: usize) -> Result<(Vec<Image>, Vec<String>)> {
    let scan = scan_images(dir, min_side)?;
    Ok((scan.images, scan.names))
}

pub fn build_patchset(dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<PatchSet> {
    cfg.validate()?;
    let (images, names) = load_images(dir.as_ref(), cfg.patch())?;
    patches_from_images(&images, &names, cfg.patch(), cfg.rotations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::write_pgm;

    fn img(w: usize, h: usize) -> Image {
        Image::from_fn_gray(w, h, |x, y| ((x * 3 + y * 5) % 256) as u8)
    }

    #[test]
    fn tiling_counts() {
        let names = vec!["a".to_string()];
        let p = patches_from_images(&[img(64, 64)], &names, 32, false).unwrap();
        assert_eq!(p.len(), 4);
        let p = patches_from_images(&[img(64, 64)], &names, 32, true).unwrap();
        assert_eq!(p.len(), 16);
        // 70x40: two columns, one row; rotated: one column, two rows.
        let p = patches_from_images(&[img(70, 40)], &names, 32, true).unwrap();
        assert_eq!(p.len(), 8);
    }

    #[test]
    fn patch_contents_follow_provenance() {
        let src = img(50, 40);
        let p = patches_from_images(std::slice::from_ref(&src), &["a".into()], 16, true).unwrap();
        for (i, pr) in p.provenance.iter().enumerate() {
            let rot = src.rotate(pr.rotation);
            let t = &p.patches;
            for (yy, xx) in [(0, 0), (15, 3), (7, 15)] {
                let expect = f32::from(rot.get(pr.x + xx, pr.y + yy, 0)) / 255.0;
                assert_eq!(t.get(i, 0, yy, xx), expect);
            }
        }
    }

    #[test]
    fn directory_errors_list_skipped_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::for_scale(2);
        let err = build_patchset(dir.path(), &cfg).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset { .. }));
        write_pgm(dir.path().join("small.pgm"), &img(20, 20)).unwrap();
        fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        let err = build_patchset(dir.path(), &cfg).unwrap_err().to_string();
        assert!(err.contains("small.pgm") && err.contains("notes.txt"), "{err}");
        write_pgm(dir.path().join("big.pgm"), &img(120, 60)).unwrap();
        let set = build_patchset(dir.path(), &cfg).unwrap();
        assert_eq!(set.sources, vec!["big.pgm".to_string()]);
        assert_eq!(set.len(), 2 * 4);
    }
}
