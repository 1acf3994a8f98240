//! Deterministic batching with an optional bounded prefetch thread.

use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment, load_image, resize_bilinear, AugmentationConfig, Image, PreprocessConfig, NUM_CLASSES};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum ImageSource {
    /// Already decoded and scaled to [0, 1]; resized if needed.
    Memory(Arc<Image>),
    /// An 8-bit raster file, run through the preprocessing config.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(u8),
    /// Per-answer vote fractions.
    Fractions(Vec<f32>),
}

impl Target {
    fn width(&self) -> usize {
        match self {
            Target::Class(_) => NUM_CLASSES,
            Target::Fractions(f) => f.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: ImageSource,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub preprocess: PreprocessConfig,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions in the dataset.
    pub indices: Vec<usize>,
    /// `[N, H, W, 3]`.
    pub images: Tensor<f32>,
    /// One-hot classes or fractions, `[N, K]`.
    pub targets: Tensor<f32>,
    /// Class labels when the targets are classes.
    pub labels: Vec<Option<u8>>,
}

impl Dataset {
    pub fn from_images(images: Vec<(Image, u8)>) -> Self {
        let size = images.first().map_or(0, |(img, _)| img.height);
        Dataset {
            samples: images
                .into_iter()
                .enumerate()
                .map(|(i, (img, label))| Sample {
                    id: i.to_string(),
                    image: ImageSource::Memory(Arc::new(img)),
                    target: Target::Class(label),
                })
                .collect(),
            preprocess: PreprocessConfig::plain(size),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            preprocess: self.preprocess.clone(),
        }
    }

    pub fn labels(&self) -> Vec<Option<u8>> {
        self.samples
            .iter()
            .map(|s| match s.target {
                Target::Class(c) => Some(c),
                Target::Fractions(_) => None,
            })
            .collect()
    }

    /// Decodes and preprocesses one sample, then augments it with a stream
    /// derived from `seed` and the sample's position.
    pub fn load(&self, index: usize, aug: Option<&AugmentationConfig>, seed: u64) -> Result<Image> {
        let sample = &self.samples[index];
        let size = self.preprocess.target_size;
        let img = match &sample.image {
            ImageSource::Memory(img) if img.height == size && img.width == size => (**img).clone(),
            ImageSource::Memory(img) => resize_bilinear(img, size, size)?,
            ImageSource::File(path) => self.preprocess.apply(&load_image(path)?)?,
        };
        if img.channels != 3 {
            return Err(invalid!("sample {} has {} channels, expected 3", sample.id, img.channels));
        }
        Ok(match aug {
            Some(cfg) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                augment(&img, cfg, &mut rng)
            }
            None => img,
        })
    }

    fn assemble(&self, indices: &[usize], images: Vec<Image>) -> Result<Batch> {
        let n = indices.len();
        let size = self.preprocess.target_size;
        let k = self.samples[indices[0]].target.width();
        let mut pixels = Vec::with_capacity(n * size * size * 3);
        let mut targets = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for (&i, img) in indices.iter().zip(images) {
            pixels.extend_from_slice(&img.data);
            let t = &self.samples[i].target;
            if t.width() != k {
                return Err(invalid!("batch mixes targets of width {k} and {}", t.width()));
            }
            match t {
                Target::Class(c) => {
                    if *c as usize >= NUM_CLASSES {
                        return Err(invalid!("label {c} out of range"));
                    }
                    targets.extend((0..NUM_CLASSES).map(|j| if j == *c as usize { 1.0 } else { 0.0 }));
                    labels.push(Some(*c));
                }
                Target::Fractions(f) => {
                    targets.extend_from_slice(f);
                    labels.push(None);
                }
            }
        }
        Ok(Batch {
            indices: indices.to_vec(),
            images: Tensor::new(vec![n, size, size, 3], pixels)?,
            targets: Tensor::new(vec![n, k], targets)?,
            labels,
        })
    }

    fn make_batch(&self, indices: &[usize], aug: Option<&AugmentationConfig>, seed: u64, workers: usize) -> Result<Batch> {
        let images: Vec<Image> = if workers <= 1 || indices.len() < 2 {
            indices.iter().map(|&i| self.load(i, aug, seed)).collect::<Result<_>>()?
        } else {
            let chunk = indices.len().div_ceil(workers);
            std::thread::scope(|s| {
                let handles: Vec<_> = indices
                    .chunks(chunk)
                    .map(|part| s.spawn(move || part.iter().map(|&i| self.load(i, aug, seed)).collect::<Result<Vec<_>>>()))
                    .collect();
                let mut all = Vec::with_capacity(indices.len());
                for h in handles {
                    all.extend(h.join().expect("loader worker panicked")?);
                }
                Ok::<_, crate::Error>(all)
            })?
        };
        self.assemble(indices, images)
    }
}

/// Feeds `order` to `f` in batches of `batch_size`. With `prefetch > 0`
/// batches are built on a separate thread, at most `prefetch` ahead; the
/// delivered batches are identical either way and for any `workers`.
pub fn for_each_batch<F>(
    dataset: &Dataset,
    order: &[usize],
    batch_size: usize,
    aug: Option<&AugmentationConfig>,
    seed: u64,
    workers: usize,
    prefetch: usize,
    mut f: F,
) -> Result<()>
where
    F: FnMut(Batch) -> Result<()>,
{
    if batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    if let Some(&bad) = order.iter().find(|&&i| i >= dataset.len()) {
        return Err(invalid!("sample index {bad} out of range"));
    }
    if prefetch == 0 {
        for chunk in order.chunks(batch_size) {
            f(dataset.make_batch(chunk, aug, seed, workers)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(prefetch);
        s.spawn(move || {
            for chunk in order.chunks(batch_size) {
                let batch = dataset.make_batch(chunk, aug, seed, workers);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        for batch in rx {
            f(batch?)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::super::synthetic_set;
    use super::*;

    fn collect(ds: &Dataset, workers: usize, prefetch: usize, aug: Option<&AugmentationConfig>) -> Vec<Batch> {
        let order: Vec<usize> = (0..ds.len()).rev().collect();
        let mut out = Vec::new();
        for_each_batch(ds, &order, 4, aug, 17, workers, prefetch, |b| {
            out.push(b);
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn batches_are_shaped_and_ordered() {
        let ds = Dataset::from_images(synthetic_set(10, 16, 2).unwrap());
        let batches = collect(&ds, 1, 0, None);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].images.shape(), &[4, 16, 16, 3]);
        assert_eq!(batches[2].targets.shape(), &[2, 7]);
        assert_eq!(batches[0].indices, vec![9, 8, 7, 6]);
        assert_eq!(batches[0].labels[0], Some(2));
        assert_eq!(&batches[0].targets.data()[..7], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_for_any_worker_count() {
        let ds = Dataset::from_images(synthetic_set(11, 16, 5).unwrap());
        let aug = AugmentationConfig::default();
        let base = collect(&ds, 1, 0, Some(&aug));
        for (workers, prefetch) in [(3, 0), (1, 2), (4, 1)] {
            let other = collect(&ds, workers, prefetch, Some(&aug));
            for (a, b) in base.iter().zip(&other) {
                assert_eq!(a.images, b.images);
                assert_eq!(a.targets, b.targets);
            }
        }
    }

    #[test]
    fn errors_propagate() {
        let mut ds = Dataset::from_images(synthetic_set(3, 16, 5).unwrap());
        ds.samples[1].image = ImageSource::File("/nonexistent/x.png".into());
        let r = for_each_batch(&ds, &[0, 1, 2], 1, None, 0, 1, 2, |_| Ok(()));
        assert!(matches!(r, Err(crate::Error::Image { .. })));
        let r = for_each_batch(&ds, &[5], 1, None, 0, 1, 0, |_| Ok(()));
        assert!(r.is_err());
    }
}
