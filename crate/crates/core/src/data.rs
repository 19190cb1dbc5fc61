//! Image datasets on disk, synthetic blobs, and normalized minibatch streams.
//!
//! On-disk layout of a dataset directory:
//!
//! - `meta.json`: name, version, image shape, class count, split sizes
//! - `images.bin`: raw `u8` pixels, `[N, H, W, C]` row-major
//! - `labels.bin`: `u16` little-endian, one per image
//! - `train.txt`, `val.txt`, `test.txt`: newline-delimited decimal indices

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub version: u32,
    pub name: String,
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub splits: SplitSizes,
}

/// Immutable labelled image set with disjoint train/val/test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    name: String,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    images: Vec<u8>,
    labels: Vec<u16>,
    splits: [Vec<usize>; 3],
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        [height, width, channels]: [usize; 3],
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u16>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            height,
            width,
            channels,
            num_classes,
            images,
            labels,
            splits: [train, val, test],
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Validation("image dimensions must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Validation(format!("num_classes {} out of range", self.num_classes)));
        }
        let n = self.labels.len();
        if self.images.len() != n * self.image_len() {
            return Err(Error::Validation(format!(
                "{} pixel bytes for {n} images of {}",
                self.images.len(),
                self.image_len()
            )));
        }
        if let Some(i) = self.labels.iter().position(|&l| l as usize >= self.num_classes) {
            return Err(Error::Validation(format!(
                "label {} at index {i} exceeds {} classes",
                self.labels[i], self.num_classes
            )));
        }
        let mut seen = vec![false; n];
        for split in Split::ALL {
            for &i in self.split(split) {
                if i >= n {
                    return Err(Error::Validation(format!("{} index {i} out of range", split.name())));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Validation(format!("index {i} appears twice across splits")));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Pixels of image `i` in HWC order.
    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.images[i * len..(i + 1) * len]
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn split(&self, split: Split) -> &[usize] {
        &self.splits[split as usize]
    }

    pub fn meta(&self) -> Meta {
        Meta {
            version: FORMAT_VERSION,
            name: self.name.clone(),
            num_images: self.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            splits: SplitSizes {
                train: self.split(Split::Train).len(),
                val: self.split(Split::Val).len(),
                test: self.split(Split::Test).len(),
            },
        }
    }

    /// Fraction of the most frequent label within `split`.
    pub fn majority_rate(&self, split: Split) -> f64 {
        let idx = self.split(split);
        if idx.is_empty() {
            return 0.0;
        }
        let mut counts = vec![0usize; self.num_classes];
        idx.iter().for_each(|&i| counts[self.labels[i] as usize] += 1);
        *counts.iter().max().unwrap_or(&0) as f64 / idx.len() as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta())?)?;
        fs::write(dir.join("images.bin"), &self.images)?;
        let labels: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        fs::write(dir.join("labels.bin"), labels)?;
        for split in Split::ALL {
            let text: String = self.split(split).iter().map(|i| format!("{i}\n")).collect();
            fs::write(dir.join(format!("{}.txt", split.name())), text)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |file: &str| fs::read(dir.join(file)).map_err(|e| Error::load(file, e.to_string()));
        let meta: Meta = serde_json::from_slice(&read("meta.json")?).map_err(|e| Error::load("meta.json", e.to_string()))?;
        if meta.version != FORMAT_VERSION {
            return Err(Error::load(
                "meta.json:version",
                format!("unsupported version {} (expected {FORMAT_VERSION})", meta.version),
            ));
        }
        let images = read("images.bin")?;
        let expected = meta.num_images * meta.height * meta.width * meta.channels;
        if images.len() != expected {
            return Err(Error::load(
                "images.bin",
                format!("{} bytes, meta requires {expected}", images.len()),
            ));
        }
        let raw = read("labels.bin")?;
        if raw.len() != 2 * meta.num_images {
            return Err(Error::load(
                "labels.bin",
                format!("{} bytes, meta requires {}", raw.len(), 2 * meta.num_images),
            ));
        }
        let labels: Vec<u16> = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        if let Some(i) = labels.iter().position(|&l| l as usize >= meta.num_classes) {
            return Err(Error::load(
                "labels.bin",
                format!("label {} at index {i} exceeds {} classes", labels[i], meta.num_classes),
            ));
        }
        let mut splits: [Vec<usize>; 3] = Default::default();
        let sizes = [meta.splits.train, meta.splits.val, meta.splits.test];
        for (k, split) in Split::ALL.into_iter().enumerate() {
            let file = format!("{}.txt", split.name());
            let text = String::from_utf8(read(&file)?).map_err(|e| Error::load(file.as_str(), e.to_string()))?;
            let idx = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::load(file.as_str(), e.to_string()))?;
            if idx.len() != sizes[k] {
                return Err(Error::load(
                    file.as_str(),
                    format!("{} indices, meta requires {}", idx.len(), sizes[k]),
                ));
            }
            splits[k] = idx;
        }
        let [train, val, test] = splits;
        Dataset::new(
            meta.name,
            [meta.height, meta.width, meta.channels],
            meta.num_classes,
            images,
            labels,
            train,
            val,
            test,
        )
        .map_err(|e| Error::load("splits", e.to_string()))
    }
}

/// Parameters of the synthetic blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthBlobs {
    pub num_images: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Pixel noise standard deviation, in units of full intensity.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthBlobs {
    fn default() -> Self {
        Self {
            num_images: 2000,
            num_classes: 4,
            image_size: 16,
            channels: 1,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthBlobs {
    /// Images of a bright Gaussian blob at a class-specific position on a
    /// ring, with per-image jitter and additive pixel noise.
    /// Labels are balanced within one; splits are 70/15/15.
    pub fn generate(&self) -> Result<Dataset> {
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "synthetic data needs at least 2 classes"));
        }
        if self.image_size < 4 || self.channels == 0 {
            return Err(Error::param("image_size", "must be at least 4 with positive channels"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::param("noise", "must be finite and non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, s, c) = (self.num_images, self.image_size, self.channels);
        let centre = (s as f64 - 1.0) / 2.0;
        let radius = s as f64 / 4.0;
        let sigma = s as f64 / 8.0;
        let mut labels: Vec<u16> = (0..n).map(|i| (i % self.num_classes) as u16).collect();
        labels.shuffle(&mut rng);
        let mut images = Vec::with_capacity(n * s * s * c);
        for &label in &labels {
            let angle = 2.0 * std::f64::consts::PI * label as f64 / self.num_classes as f64;
            let cy = centre + radius * angle.sin() + rng.random_range(-0.5..0.5);
            let cx = centre + radius * angle.cos() + rng.random_range(-0.5..0.5);
            let amp = rng.random_range(0.7..1.0);
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let blob = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    for _ in 0..c {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        let v = 0.1 + blob + self.noise * eps;
                        images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_train = n * 70 / 100;
        let n_val = n * 15 / 100;
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Dataset::new(
            format!("synth_blobs_c{}_s{}_n{n}", self.num_classes, s),
            [s, s, c],
            self.num_classes,
            images,
            labels,
            order,
            val,
            test,
        )
    }
}

/// Shorthand for single-channel blobs at the default noise level.
pub fn synth_blobs(n: usize, classes: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    SynthBlobs {
        num_images: n,
        num_classes: classes,
        image_size,
        seed,
        ..SynthBlobs::default()
    }
    .generate()
}

/// Per-channel affine map from raw `u8` pixels to standardized floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of `pixel / 255` over the train split only.
    pub fn from_train(ds: &Dataset) -> Result<Self> {
        let idx = ds.split(Split::Train);
        if idx.is_empty() {
            return Err(Error::Validation("train split is empty".into()));
        }
        let c = ds.channels();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for &i in idx {
            for (k, &p) in ds.image(i).iter().enumerate() {
                let v = p as f64 / 255.0;
                sum[k % c] += v;
                sq[k % c] += v * v;
            }
        }
        let count = (idx.len() * ds.height() * ds.width()) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }
}

/// A minibatch in NCHW layout.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Minibatches over one split. The final short batch of an epoch is kept,
/// so every index is visited exactly once per epoch.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    indices: Vec<usize>,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    norm: Normalization,
}

impl<'a> BatchStream<'a> {
    pub fn new(dataset: &'a Dataset, split: Split, batch_size: usize, shuffle: bool, seed: u64, norm: Normalization) -> Result<Self> {
        let indices = dataset.split(split).to_vec();
        if indices.is_empty() {
            return Err(Error::Validation(format!("{} split is empty", split.name())));
        }
        if batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if norm.mean.len() != dataset.channels() || norm.std.len() != dataset.channels() {
            return Err(Error::dim(
                "batch_stream",
                "channels",
                format!("normalization has {} channels, dataset {}", norm.mean.len(), dataset.channels()),
            ));
        }
        Ok(Self {
            dataset,
            indices,
            batch_size,
            shuffle,
            seed,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len().div_ceil(self.batch_size)
    }

    /// Index order for `epoch`; a fixed function of the seed and epoch counter.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.indices.clone();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
        let order = self.order(epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |idx| self.batch(&idx))
    }

    /// Assembles the given dataset indices into a normalized batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let ds = self.dataset;
        let (h, w, c) = (ds.height(), ds.width(), ds.channels());
        let plane = h * w;
        let mut data = vec![0.0 as Elem; indices.len() * c * plane];
        for (b, &i) in indices.iter().enumerate() {
            let img = ds.image(i);
            for ch in 0..c {
                let (m, s) = (self.norm.mean[ch], self.norm.std[ch]);
                let out = &mut data[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (p, o) in out.iter_mut().enumerate() {
                    *o = ((img[p * c + ch] as f64 / 255.0 - m) / s) as Elem;
                }
            }
        }
        Batch {
            images: Tensor::from_parts(vec![indices.len(), c, h, w], data),
            labels: indices.iter().map(|&i| ds.labels()[i] as usize).collect(),
            indices: indices.to_vec(),
        }
    }
}

/// Endless batch source that moves to the next epoch's order when exhausted.
#[derive(Clone, Debug)]
pub struct Cycler<'a> {
    stream: BatchStream<'a>,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Cycler<'a> {
    pub fn new(stream: BatchStream<'a>) -> Self {
        let order = stream.order(0);
        Self {
            stream,
            epoch: 0,
            order,
            pos: 0,
        }
    }

    pub fn stream(&self) -> &BatchStream<'a> {
        &self.stream
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.order = self.stream.order(self.epoch);
            self.pos = 0;
        }
        let end = (self.pos + self.stream.batch_size).min(self.order.len());
        let batch = self.stream.batch(&self.order[self.pos..end]);
        self.pos = end;
        batch
    }
}
