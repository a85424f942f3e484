//! IDX container (the MNIST distribution format): big-endian header, `u8` payload.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::read_maybe_gz;
use crate::tensor::Tensor;
use crate::train::LabeledDataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Ingestion {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Pixels as `1×rows×cols` tensors scaled to [0, 1] by /255.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    let magic = cur.u32_be()?;
    if magic != IMAGE_MAGIC {
        cur.pos = 0;
        return Err(cur.fail(format!("bad image magic {magic:#010x}")));
    }
    let count = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    if rows == 0 || cols == 0 {
        return Err(cur.fail("zero image dimension"));
    }
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let px = cur.take(rows * cols)?;
        let data = px.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![1, rows, cols], data)?);
    }
    if cur.pos != bytes.len() {
        return Err(cur.fail("trailing bytes after image payload"));
    }
    Ok(images)
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    let magic = cur.u32_be()?;
    if magic != LABEL_MAGIC {
        cur.pos = 0;
        return Err(cur.fail(format!("bad label magic {magic:#010x}")));
    }
    let count = cur.u32_be()? as usize;
    let labels = cur.take(count)?.iter().map(|&b| b as usize).collect();
    if cur.pos != bytes.len() {
        return Err(cur.fail("trailing bytes after label payload"));
    }
    Ok(labels)
}

/// Loads an image/label file pair (plain or `.gz`). Labels must lie in 0..=9.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let images = parse_images(image_path, &read_maybe_gz(image_path)?)?;
    let labels = parse_labels(label_path, &read_maybe_gz(label_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Ingestion {
            path: label_path.to_path_buf(),
            offset: 4,
            reason: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::Ingestion {
            path: label_path.to_path_buf(),
            offset: 8 + pos as u64,
            reason: format!("label {} outside 0..=9", labels[pos]),
        });
    }
    LabeledDataset::new(images, labels, 10)
}

/// `(images, labels)` paths for the `train` or `t10k` split, preferring `.gz`.
pub fn mnist_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    let pick = |stem: String| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    (
        pick(format!("{split}-images-idx3-ubyte")),
        pick(format!("{split}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: &str) -> Result<LabeledDataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(&images, &labels)
}

/// Serializes images (values rounded to bytes) in IDX form.
pub fn encode_images(images: &[Tensor]) -> Vec<u8> {
    let (rows, cols) = images
        .first()
        .map(|im| (im.shape()[1], im.shape()[2]))
        .unwrap_or((28, 28));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        out.extend(im.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<u8>, Vec<u8>) {
        let imgs: Vec<Tensor> = (0..3)
            .map(|k| {
                Tensor::new(
                    vec![1, 2, 2],
                    vec![0.0, k as f64 / 255.0, 1.0, 128.0 / 255.0],
                )
                .unwrap()
            })
            .collect();
        (encode_images(&imgs), encode_labels(&[0, 7, 9]))
    }

    #[test]
    fn parses_and_scales() {
        let (im, lb) = sample();
        let p = Path::new("mem");
        let images = parse_images(p, &im).unwrap();
        assert_eq!(images.len(), 3);
        assert_eq!(images[0].shape(), &[1, 2, 2]);
        assert_eq!(images[2].data()[2], 1.0);
        assert_eq!(parse_labels(p, &lb).unwrap(), vec![0, 7, 9]);
    }

    #[test]
    fn every_magic_byte_mutation_is_rejected() {
        let (im, lb) = sample();
        let p = Path::new("mem");
        for byte in 0..4 {
            for bit in 0..8 {
                let mut bad = im.clone();
                bad[byte] ^= 1 << bit;
                assert!(matches!(parse_images(p, &bad), Err(Error::Ingestion { .. })));
                let mut bad = lb.clone();
                bad[byte] ^= 1 << bit;
                assert!(matches!(parse_labels(p, &bad), Err(Error::Ingestion { .. })));
            }
        }
    }

    #[test]
    fn truncation_names_offset() {
        let (im, _) = sample();
        let err = parse_images(Path::new("mem"), &im[..im.len() - 1]).unwrap_err();
        match err {
            Error::Ingestion { offset, .. } => assert_eq!(offset, 16 + 2 * 4),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (im, _) = sample();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, im).unwrap();
        std::fs::write(&lp, encode_labels(&[1, 2])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Ingestion { .. })));
    }
}
