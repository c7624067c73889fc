//! Two-stream batches: a fixed number of labeled crops plus unlabeled crops.
//!
//! Each stream is sampled without replacement and reshuffled once exhausted.
//! All draws (order, crop offsets, transforms) come from one owned data rng, so
//! the sequence of batches is a pure function of the seed.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetSplit;
use super::transform::{augment, augment_volume, random_crop, random_crop_volume, Transform};
use super::volume::{BinaryMask, Shape3, Volume};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::Real;
use crate::rng::{chacha, derive};

/// One training batch. Labeled samples come first.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<Volume>,
    pub labels: Vec<BinaryMask>,
    pub transforms: Vec<Transform>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_labeled(&self) -> usize {
        self.labels.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|v| v.id.clone()).collect()
    }

    pub fn crop_shape(&self) -> Shape3 {
        self.images[0].shape()
    }

    /// Network input `B x 1 x D x H x W` for samples `range`.
    pub fn input<T: Real>(&self, range: std::ops::Range<usize>) -> Tensor<T> {
        let [d, h, w] = self.crop_shape().0;
        let mut data = Vec::with_capacity(range.len() * d * h * w);
        for v in &self.images[range.clone()] {
            data.extend(v.data.iter().map(|&x| T::from_f32(x).expect("finite")));
        }
        Tensor::new([range.len(), 1, d, h, w], data).expect("batch crops share one shape")
    }

    /// Labels of the labeled samples, flattened sample-major.
    pub fn label_data(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    /// Keeps only the labeled samples.
    pub fn labeled_only(&self) -> Batch {
        let n = self.n_labeled();
        Batch {
            images: self.images[..n].to_vec(),
            labels: self.labels.clone(),
            transforms: self.transforms[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Cycler {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self {
            n,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// One sampling stream: a case order plus the rng for order, crop offset and transform.
#[derive(Debug, Clone)]
struct Stream {
    rng: ChaCha8Rng,
    cycler: Cycler,
}

impl Stream {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: chacha(seed),
            cycler: Cycler::new(n),
        }
    }

    fn state(&self) -> StreamState {
        StreamState {
            rng_seed: self.rng.get_seed().to_vec(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            cycler: self.cycler.clone(),
        }
    }

    fn restore(&mut self, state: &StreamState) -> Result<()> {
        let seed: [u8; 32] = state
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config("sampler seed must be 32 bytes".into()))?;
        let pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad sampler word position {:?}", state.rng_word_pos)))?;
        if state.cycler.n != self.cycler.n {
            return Err(Error::Config("sampler state was saved for a different split".into()));
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(pos);
        self.rng = rng;
        self.cycler = state.cycler.clone();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StreamState {
    rng_seed: Vec<u8>,
    rng_stream: u64,
    /// Decimal string; JSON numbers cannot carry a u128 portably.
    rng_word_pos: String,
    cycler: Cycler,
}

/// Serializable sampler position, stored in trainer checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    labeled: StreamState,
    unlabeled: StreamState,
}

/// Draws batches of `labeled_per_batch` labeled crops followed by unlabeled crops.
///
/// The labeled and unlabeled streams own independent rngs derived from the
/// seed, so the labeled crops of a batch do not depend on how many unlabeled
/// crops are drawn alongside them.
#[derive(Debug, Clone)]
pub struct TwoStreamSampler {
    batch_size: usize,
    labeled_per_batch: usize,
    crop: Shape3,
    augment: bool,
    labeled: Stream,
    unlabeled: Stream,
}

impl TwoStreamSampler {
    pub fn new(
        split: &DatasetSplit,
        batch_size: usize,
        labeled_per_batch: usize,
        crop: Shape3,
        augment: bool,
        seed: u64,
    ) -> Result<Self> {
        if labeled_per_batch == 0 || labeled_per_batch > batch_size {
            return Err(Error::Config(format!(
                "labeled_per_batch {labeled_per_batch} must lie in [1, {batch_size}]"
            )));
        }
        if split.labeled.is_empty() {
            return Err(Error::Config("labeled stream is empty".into()));
        }
        if labeled_per_batch < batch_size && split.unlabeled.is_empty() {
            return Err(Error::Config(format!(
                "{} unlabeled samples per batch requested but the unlabeled set is empty",
                batch_size - labeled_per_batch
            )));
        }
        let shapes = split
            .labeled
            .iter()
            .map(|c| c.image.shape())
            .chain(split.unlabeled.iter().map(|v| v.shape()));
        for s in shapes {
            if !crop.fits_within(&s) {
                return Err(Error::Shape(format!("crop {crop} does not fit volume {s}")));
            }
        }
        Ok(Self {
            batch_size,
            labeled_per_batch,
            crop,
            augment,
            labeled: Stream::new(split.labeled.len(), derive(seed, &[0])),
            unlabeled: Stream::new(split.unlabeled.len(), derive(seed, &[1])),
        })
    }

    pub fn next_batch(&mut self, split: &DatasetSplit) -> Batch {
        let mut b = Batch {
            images: Vec::with_capacity(self.batch_size),
            labels: Vec::with_capacity(self.labeled_per_batch),
            transforms: Vec::with_capacity(self.batch_size),
        };
        let s = &mut self.labeled;
        for _ in 0..self.labeled_per_batch {
            let i = s.cycler.next(&mut s.rng);
            let (mut case, _) = random_crop(&split.labeled[i], self.crop, &mut s.rng).expect("crop validated");
            let mut t = Transform::IDENTITY;
            if self.augment {
                let (aug, tr, _) = augment(&case, &mut s.rng).expect("shape-preserving transform");
                case = aug;
                t = tr;
            }
            b.images.push(case.image);
            b.labels.push(case.label);
            b.transforms.push(t);
        }
        let s = &mut self.unlabeled;
        for _ in self.labeled_per_batch..self.batch_size {
            let i = s.cycler.next(&mut s.rng);
            let (mut v, _) = random_crop_volume(&split.unlabeled[i], self.crop, &mut s.rng).expect("crop validated");
            let mut t = Transform::IDENTITY;
            if self.augment {
                let (aug, tr) = augment_volume(&v, &mut s.rng).expect("shape-preserving transform");
                v = aug;
                t = tr;
            }
            b.images.push(v);
            b.transforms.push(t);
        }
        b
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            labeled: self.labeled.state(),
            unlabeled: self.unlabeled.state(),
        }
    }

    pub fn restore(&mut self, state: &SamplerState) -> Result<()> {
        let mut labeled = self.labeled.clone();
        labeled.restore(&state.labeled)?;
        self.unlabeled.restore(&state.unlabeled)?;
        self.labeled = labeled;
        Ok(())
    }
}

/// Endless iterator over two-stream batches drawn from `split`.
pub struct TwoStreamBatches<'a> {
    split: &'a DatasetSplit,
    sampler: TwoStreamSampler,
}

impl<'a> TwoStreamBatches<'a> {
    pub fn sampler(&self) -> &TwoStreamSampler {
        &self.sampler
    }
}

impl Iterator for TwoStreamBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.sampler.next_batch(self.split))
    }
}

pub fn two_stream_batches(
    split: &DatasetSplit,
    batch_size: usize,
    labeled_per_batch: usize,
    crop: Shape3,
    augment: bool,
    seed: u64,
) -> Result<TwoStreamBatches<'_>> {
    Ok(TwoStreamBatches {
        split,
        sampler: TwoStreamSampler::new(split, batch_size, labeled_per_batch, crop, augment, seed)?,
    })
}
