//! CIFAR-10 binary batches: each record is one label byte followed by
//! 3×32×32 pixel bytes (channel-major).

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::read_maybe_gz;
use crate::tensor::Tensor;
use crate::train::LabeledDataset;

const RECORD: usize = 1 + 3 * 32 * 32;

pub fn parse_batch(path: &Path, bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % RECORD) as u64,
            reason: format!("length {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    for (i, rec) in bytes.chunks(RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                offset: (i * RECORD) as u64,
                reason: format!("label {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        let data = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![3, 32, 32], data)?);
    }
    LabeledDataset::new(images, labels, 10)
}

/// Loads and concatenates one or more batch files.
pub fn load_batches(paths: &[&Path]) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let part = parse_batch(path, &read_maybe_gz(path)?)?;
        images.extend_from_slice(part.images());
        labels.extend_from_slice(part.labels());
    }
    LabeledDataset::new(images, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat_n(255u8, RECORD - 1));
        bytes.push(9);
        bytes.extend(std::iter::repeat_n(0u8, RECORD - 1));
        let d = parse_batch(Path::new("mem"), &bytes).unwrap();
        assert_eq!(d.labels(), &[3, 9]);
        assert_eq!(d.images()[0].shape(), &[3, 32, 32]);
        assert_eq!(d.images()[0].data()[5], 1.0);
    }

    #[test]
    fn rejects_partial_record() {
        assert!(parse_batch(Path::new("mem"), &[0u8; RECORD + 3]).is_err());
    }
}
