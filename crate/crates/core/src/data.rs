//! In-memory labeled datasets, batching and augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Labeled samples stored row-major as `f32` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Shape of one sample, `[C, H, W]` or `[D]`.
    pub item_shape: Vec<usize>,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(item_shape: Vec<usize>, images: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let item: usize = item_shape.iter().product();
        if item == 0 || images.len() != item * labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                expected: vec![labels.len(), item],
                got: vec![images.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            item_shape,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            images.extend_from_slice(self.item(i));
        }
        Dataset {
            item_shape: self.item_shape.clone(),
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded random subset of `n` samples (all of them if `n >= len`).
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        self.subset(&idx)
    }

    /// Splits off `round(fraction · len)` samples chosen by a seeded shuffle.
    /// Returns `(rest, held_out)`; both keep the original relative order.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("split fraction {fraction} outside [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = (fraction * self.len() as f64).round() as usize;
        let mut held: Vec<usize> = idx[..k].to_vec();
        let mut rest: Vec<usize> = idx[k..].to_vec();
        held.sort_unstable();
        rest.sort_unstable();
        Ok((self.subset(&rest), self.subset(&held)))
    }

    /// Batch tensor `[n, item_shape..]` and labels for `indices`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.item_shape);
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend(self.item(i).iter().map(|&v| T::lit(v as f64)));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&shape, data).expect("batch shape"), labels)
    }

    /// Like [`batch`](Self::batch) with a random `pad`-pixel shifted crop
    /// (zero padding) and a random horizontal flip per image. Non-image data
    /// is returned unchanged.
    pub fn augmented_batch<T: Real, R: Rng + ?Sized>(&self, indices: &[usize], pad: usize, rng: &mut R) -> (Tensor<T>, Vec<usize>) {
        let (mut x, y) = self.batch::<T>(indices);
        if self.item_shape.len() != 3 {
            return (x, y);
        }
        let (c, h, w) = (self.item_shape[0], self.item_shape[1], self.item_shape[2]);
        let item = c * h * w;
        let mut out = vec![T::zero(); item];
        for sample in x.data_mut().chunks_mut(item) {
            let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let flip = rng.gen_bool(0.5);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let si = i as isize + dy;
                        let mut sj = j as isize + dx;
                        if flip {
                            sj = (w as isize - 1 - j as isize) + dx;
                        }
                        out[(ch * h + i) * w + j] = if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                            sample[(ch * h + si as usize) * w + sj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
            sample.copy_from_slice(&out);
        }
        (x, y)
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parameters of a Gaussian-blob classification set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub item_shape: Vec<usize>,
    /// Standard deviation of each coordinate around its class mean.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, item_shape: &[usize], seed: u64) -> Self {
        Self {
            classes,
            per_class,
            item_shape: item_shape.to_vec(),
            noise: 0.1,
            seed,
        }
    }
}

/// Gaussian class blobs clamped to `[0, 1]`. Class means are drawn
/// uniformly from `[0.2, 0.8]` per coordinate; samples are interleaved by
/// class (sample `i` has label `i mod classes`).
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs classes and samples".into()));
    }
    let d: usize = spec.item_shape.iter().product();
    if d == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs a non-empty item shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let n = spec.classes * spec.per_class;
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        for &m in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            images.push((m + spec.noise * z).clamp(0.0, 1.0) as f32);
        }
        labels.push(c);
    }
    Dataset::new(spec.item_shape.clone(), images, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec::new(3, 7, &[4], 11);
        let a = synthetic_dataset(&spec).unwrap();
        assert_eq!(a.class_counts(), vec![7, 7, 7]);
        assert_eq!(a, synthetic_dataset(&spec).unwrap());
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b = synthetic_dataset(&SyntheticSpec::new(3, 7, &[4], 12)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn split_partitions() {
        let ds = synthetic_dataset(&SyntheticSpec::new(2, 50, &[3], 0)).unwrap();
        let (rest, held) = ds.split(0.1, 5).unwrap();
        assert_eq!(held.len(), 10);
        assert_eq!(rest.len(), 90);
        let (rest2, held2) = ds.split(0.1, 5).unwrap();
        assert_eq!((rest, held), (rest2, held2));
    }

    #[test]
    fn batch_layout() {
        let ds = Dataset::new(vec![1, 1, 2], vec![0.0, 0.5, 1.0, 0.25], vec![1, 0], 2).unwrap();
        let (x, y) = ds.batch::<f64>(&[1, 0]);
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(x.data(), &[1.0, 0.25, 0.0, 0.5]);
        assert_eq!(y, vec![0, 1]);
    }

    #[test]
    fn augmentation_without_shift_is_identity_or_flip() {
        let ds = Dataset::new(vec![1, 2, 3], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], vec![0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let (x, _) = ds.augmented_batch::<f64, _>(&[0], 0, &mut rng);
            let v: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
            assert!(v == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5] || v == [0.2, 0.1, 0.0, 0.5, 0.4, 0.3]);
        }
    }

    #[test]
    fn rejects_bad_labels_and_sizes() {
        assert!(Dataset::new(vec![2], vec![0.0; 4], vec![0, 3], 2).is_err());
        assert!(Dataset::new(vec![2], vec![0.0; 3], vec![0, 1], 2).is_err());
    }
}
