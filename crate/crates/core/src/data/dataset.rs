use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images stored as `f32` in `[N, C, H, W]` order with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Normalized images and labels ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<SampleBatch> {
        Ok(SampleBatch {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        })
    }
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, shape: [usize; 3], images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let ds = Dataset { name: name.into(), num_classes, shape, images, labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::InvalidArgument(format!("num_classes {} outside 1..=256", self.num_classes)));
        }
        if self.images.len() != self.len() * self.image_size() {
            return Err(Error::shape(
                "dataset",
                format!("{} image values for {} images of shape {:?}", self.images.len(), self.len(), self.shape),
            ));
        }
        if let Some((index, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l as usize >= self.num_classes) {
            return Err(Error::LabelOutOfRange { index, label, num_classes: self.num_classes });
        }
        if !self.images.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "dataset" });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Values per image, `C * H * W`.
    pub fn image_size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_size();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Indices of each class in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.image_size();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range for {} images", self.len())));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset { name: self.name.clone(), num_classes: self.num_classes, shape: self.shape, images, labels })
    }
}

/// Disjoint train/validation index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified split: each class contributes `max(1, floor(fraction * n_c))`
/// validation examples chosen by a seeded shuffle. Both index lists are
/// sorted.
pub fn split_train_val(ds: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split { train: Vec::new(), val: Vec::new() };
    for (class, mut idx) in ds.class_indices().into_iter().enumerate() {
        if idx.len() < 5 {
            return Err(Error::InvalidArgument(format!("class {class} has {} examples, need at least 5", idx.len())));
        }
        let n_val = ((fraction * idx.len() as f64).floor() as usize).max(1);
        idx.shuffle(&mut rng);
        split.val.extend_from_slice(&idx[..n_val]);
        split.train.extend_from_slice(&idx[n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Per-channel standardization fitted on one dataset and reused verbatim.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument("cannot fit normalizer on an empty dataset".into()));
        }
        let [c, h, w] = ds.shape;
        let plane = h * w;
        let count = (ds.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..ds.len() {
            for (ch, px) in ds.image(i).chunks(plane).enumerate() {
                for &v in px {
                    mean[ch] += v as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..ds.len() {
            for (ch, px) in ds.image(i).chunks(plane).enumerate() {
                for &v in px {
                    sq[ch] += (v as f64 - mean[ch]).powi(2);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Normalizer { mean, std })
    }

    /// The whole dataset as a normalized `[N, C, H, W]` batch.
    pub fn apply(&self, ds: &Dataset) -> Result<SampleBatch> {
        let [c, h, w] = ds.shape;
        if self.mean.len() != c {
            return Err(Error::shape("normalize", format!("{} channel statistics for {c} channels", self.mean.len())));
        }
        let plane = h * w;
        let data = ds
            .images
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                (v as f64 - self.mean[ch]) / self.std[ch]
            })
            .collect();
        Ok(SampleBatch {
            images: Tensor::new(vec![ds.len(), c, h, w], data)?,
            labels: ds.labels.iter().map(|&l| l as usize).collect(),
        })
    }
}
