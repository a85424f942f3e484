//! Deterministic Gaussian-blob datasets for fast tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::LabeledDataset;

/// Per-pixel standard deviation of every cluster.
pub const CLUSTER_STD: f64 = 0.05;

/// `classes × per_class` samples of shape `dims`, clamped to [0, 1].
///
/// The flattened pixels are cut into `classes` contiguous bands (pixel `i` is
/// in band `i · classes / n`). Class `k` is centred at
/// `0.5 + separation · CLUSTER_STD / 2` on band `k` and at 0.5 elsewhere (the
/// shift is capped at 0.5). Bands rather than interleaved pixels keep the
/// classes apart after pooling. Samples are ordered class by class.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dims: &[usize],
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let n: usize = dims.iter().product();
    if classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if !(separation > 0.0) {
        return Err(Error::Config("separation must be positive".into()));
    }
    if classes > n {
        return Err(Error::Config(format!(
            "{classes} classes do not fit in {n} dimensions"
        )));
    }
    let offset = (separation * CLUSTER_STD / 2.0).min(0.5);
    let noise = Normal::new(0.0, CLUSTER_STD).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let center: Vec<f64> = (0..n)
            .map(|i| if i * classes / n == k { 0.5 + offset } else { 0.5 })
            .collect();
        for _ in 0..per_class {
            let data = center
                .iter()
                .map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            images.push(Tensor::new(dims.to_vec(), data)?);
            labels.push(k);
        }
    }
    LabeledDataset::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_blobs(2, 7, &[4], 10.0, 42).unwrap();
        let b = synth_blobs(2, 7, &[4], 10.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels().iter().filter(|&&l| l == 0).count(), 7);
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 7);
        assert_ne!(a, synth_blobs(2, 7, &[4], 10.0, 43).unwrap());
    }

    #[test]
    fn well_separated_blobs_are_linearly_separable() {
        // Nearest-centre rule is a linear classifier.
        let d = synth_blobs(6, 50, &[1, 4, 4], 10.0, 1).unwrap();
        let mut centers = vec![vec![0.0; 16]; 6];
        for (x, &y) in d.images().iter().zip(d.labels()) {
            for (c, v) in centers[y].iter_mut().zip(x.data()) {
                *c += v / 50.0;
            }
        }
        for (x, &y) in d.images().iter().zip(d.labels()) {
            let dist = |c: &Vec<f64>| -> f64 {
                c.iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let best = (0..6)
                .min_by(|&i, &j| dist(&centers[i]).total_cmp(&dist(&centers[j])))
                .unwrap();
            assert_eq!(best, y);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_blobs(1, 3, &[4], 1.0, 0).is_err());
        assert!(synth_blobs(2, 3, &[4], 0.0, 0).is_err());
        assert!(synth_blobs(5, 3, &[4], 1.0, 0).is_err());
    }
}
