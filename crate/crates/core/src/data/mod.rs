//! Datasets, batching and augmentation.

pub mod cifar;
pub mod synthetic;
pub mod tsr;

pub use cifar::{load_cifar10_binary, load_cifar10_files};
pub use synthetic::{gen_synthetic, SyntheticSpec};
pub use tsr::AnyTensor;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// (C, H, W), values in [0, 1].
    pub image: Tensor<f32>,
    pub label: usize,
    /// (1, H, W) binary foreground indicator.
    pub mask: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    classes: usize,
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// (N, C, H, W)
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// (N, 1, H, W), present only when every sample has a mask.
    pub masks: Option<Tensor<T>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: usize) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        };
        let dims = first.image.dims().to_vec();
        if dims.len() != 3 {
            return Err(Error::InvalidArgument("images must be (C, H, W)".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.image.dims() != dims.as_slice() {
                return Err(Error::InvalidArgument(format!("sample {i} has image shape {}", s.image.shape())));
            }
            if s.label >= classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: label {} >= {classes} classes",
                    s.label
                )));
            }
            if let Some(m) = &s.mask {
                if m.dims() != [1, dims[1], dims[2]] {
                    return Err(Error::InvalidArgument(format!("sample {i}: mask shape {}", m.shape())));
                }
                if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidArgument(format!("sample {i}: mask is not binary")));
                }
            }
        }
        Ok(Dataset { samples, classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// (C, H, W) of every image.
    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.samples[0].image.dims();
        [d[0], d[1], d[2]]
    }

    pub fn has_masks(&self) -> bool {
        self.samples.iter().all(|s| s.mask.is_some())
    }

    /// Seeded shuffle, then the first `round(frac * len)` samples go to the
    /// second set. Returns `(rest, held_out)`.
    pub fn split(&self, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let held = (frac * self.len() as f64).round() as usize;
        if held == 0 || held >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split fraction {frac} leaves an empty side of {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.samples[i].clone()).collect();
        Ok((
            Dataset::new(pick(&order[held..]), self.classes)?,
            Dataset::new(pick(&order[..held]), self.classes)?,
        ))
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let picked: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        stack(&picked)
    }

    /// Entries `images`, `labels` and (when present) `masks`.
    pub fn to_tsr_entries(&self) -> Result<tsr::Entries> {
        let [c, h, w] = self.image_dims();
        let n = self.len();
        let images: Vec<f32> = self.samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
        let labels: Vec<f32> = self.samples.iter().map(|s| s.label as f32).collect();
        let mut entries = vec![
            ("images".to_string(), AnyTensor::F32(Tensor::from_vec(&[n, c, h, w], images)?)),
            ("labels".to_string(), AnyTensor::F32(Tensor::from_vec(&[n], labels)?)),
        ];
        if self.has_masks() {
            let masks = self
                .samples
                .iter()
                .flat_map(|s| s.mask.as_ref().unwrap().data().iter().copied())
                .collect();
            entries.push(("masks".to_string(), AnyTensor::F32(Tensor::from_vec(&[n, 1, h, w], masks)?)));
        }
        Ok(entries)
    }

    /// Inverse of [`Dataset::to_tsr_entries`]. When `classes` is `None` it is
    /// taken as the largest label plus one.
    pub fn from_tsr_entries(entries: &[(String, AnyTensor)], classes: Option<usize>) -> Result<Self> {
        let images = tsr::entry(entries, "images")?.to::<f32>();
        let labels = tsr::entry(entries, "labels")?.to::<f32>();
        let masks = tsr::entry(entries, "masks").ok().map(|m| m.to::<f32>());
        let [n, c, h, w] = images.nchw("dataset")?;
        if labels.numel() != n {
            return Err(Error::Format(format!("{} labels for {n} images", labels.numel())));
        }
        if let Some(m) = &masks {
            if m.dims() != [n, 1, h, w] {
                return Err(Error::Format(format!("masks shape {} does not match images", m.shape())));
            }
        }
        let mut max_label = 0;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let lv = labels.data()[i];
            if lv < 0.0 || lv.fract() != 0.0 {
                return Err(Error::Format(format!("label {lv} is not a class index")));
            }
            let label = lv as usize;
            max_label = max_label.max(label);
            let plane = c * h * w;
            samples.push(Sample {
                image: Tensor::from_vec(&[c, h, w], images.data()[i * plane..(i + 1) * plane].to_vec())?,
                label,
                mask: masks
                    .as_ref()
                    .map(|m| Tensor::from_vec(&[1, h, w], m.data()[i * h * w..(i + 1) * h * w].to_vec()))
                    .transpose()?,
            });
        }
        Dataset::new(samples, classes.unwrap_or(max_label + 1)).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_tsr(&self, path: impl AsRef<Path>) -> Result<()> {
        tsr::write_file(path, &self.to_tsr_entries()?)
    }

    pub fn load_tsr(path: impl AsRef<Path>, classes: Option<usize>) -> Result<Self> {
        Self::from_tsr_entries(&tsr::read_file(path)?, classes)
    }
}

pub fn stack<T: Scalar>(samples: &[&Sample]) -> Result<Batch<T>> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let d = first.image.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let n = samples.len();
    let images = samples
        .iter()
        .flat_map(|s| s.image.data().iter().map(|&v| T::lit(v as f64)))
        .collect();
    let masks = if samples.iter().all(|s| s.mask.is_some()) {
        let m = samples
            .iter()
            .flat_map(|s| s.mask.as_ref().unwrap().data().iter().map(|&v| T::lit(v as f64)))
            .collect();
        Some(Tensor::from_vec(&[n, 1, h, w], m)?)
    } else {
        None
    };
    Ok(Batch {
        images: Tensor::from_vec(&[n, c, h, w], images)?,
        labels: samples.iter().map(|s| s.label).collect(),
        masks,
    })
}

/// Zero padding applied before the random crop.
pub const SHIFT_PAD: usize = 4;

fn shift_plane(src: &[f32], h: usize, w: usize, dy: isize, dx: isize, mirror: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        let si = i as isize + dy;
        if si < 0 || si >= h as isize {
            continue;
        }
        for j in 0..w {
            let mj = if mirror { w - 1 - j } else { j };
            let sj = mj as isize + dx;
            if sj < 0 || sj >= w as isize {
                continue;
            }
            out[i * w + j] = src[si as usize * w + sj as usize];
        }
    }
    out
}

/// Optional horizontal mirror followed by a translation by `(dy, dx)` with
/// zero fill (the pad-then-crop view of a shift). The mask moves with the image.
pub fn shift_and_mirror(sample: &Sample, dy: isize, dx: isize, mirror: bool) -> Sample {
    let d = sample.image.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let mut image = Vec::with_capacity(c * h * w);
    for plane in sample.image.data().chunks_exact(h * w) {
        image.extend(shift_plane(plane, h, w, dy, dx, mirror));
    }
    Sample {
        image: Tensor::from_vec(d, image).expect("same shape"),
        label: sample.label,
        mask: sample.mask.as_ref().map(|m| {
            Tensor::from_vec(m.dims(), shift_plane(m.data(), h, w, dy, dx, mirror)).expect("same shape")
        }),
    }
}

/// Training-time augmentation: mirror with probability 1/2, then pad by
/// [`SHIFT_PAD`] zeros and crop back to the original size at a random offset.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let mirror = rng.gen_bool(0.5);
    let p = SHIFT_PAD as isize;
    let dy = rng.gen_range(-p..=p);
    let dx = rng.gen_range(-p..=p);
    shift_and_mirror(sample, dy, dx, mirror)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        let ds = gen_synthetic(&SyntheticSpec {
            n: 1,
            size: 8,
            classes: 3,
            fg_frac: 0.25,
            clutter: 0.4,
            seed: 1,
        })
        .unwrap();
        ds.samples()[0].clone()
    }

    #[test]
    fn identity_shift() {
        let s = sample();
        assert_eq!(shift_and_mirror(&s, 0, 0, false), s);
    }

    #[test]
    fn mirror_is_an_involution() {
        let s = sample();
        let once = shift_and_mirror(&s, 0, 0, true);
        assert_ne!(once, s);
        assert_eq!(shift_and_mirror(&once, 0, 0, true), s);
    }

    #[test]
    fn shifting_only_loses_mask_pixels() {
        let s = sample();
        let before = s.mask.as_ref().unwrap().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = augment(&s, &mut rng);
            assert!(a.mask.as_ref().unwrap().sum() <= before);
            assert_eq!(a.label, s.label);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_is_seeded_and_disjoint_in_size() {
        let ds = gen_synthetic(&SyntheticSpec {
            n: 50,
            size: 8,
            classes: 3,
            fg_frac: 0.25,
            clutter: 0.4,
            seed: 2,
        })
        .unwrap();
        let (a, b) = ds.split(0.1, 9).unwrap();
        assert_eq!((a.len(), b.len()), (45, 5));
        assert_eq!(ds.split(0.1, 9).unwrap().1, b);
        assert!(ds.split(0.0, 9).is_err());
    }

    #[test]
    fn batch_stacks_masks() {
        let s = sample();
        let b: Batch<f64> = stack(&[&s, &s]).unwrap();
        assert_eq!(b.images.dims(), &[2, 3, 8, 8]);
        assert_eq!(b.masks.unwrap().dims(), &[2, 1, 8, 8]);
        assert_eq!(b.labels, vec![s.label; 2]);
    }
}
