use crate::error::{Error, Result};
use crate::real::Real;

/// A dense `B x C x D x H x W` array, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.voxels()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Value at `(b, c, voxel)` with the voxel index flattened.
    pub fn at(&self, b: usize, c: usize, v: usize) -> T {
        self.data[(b * self.shape[1] + c) * self.voxels() + v]
    }

    /// Stacks per-sample buffers of `channels x spatial` each.
    pub fn from_samples(channels: usize, spatial: [usize; 3], samples: Vec<Vec<T>>) -> Result<Self> {
        let shape = [samples.len(), channels, spatial[0], spatial[1], spatial[2]];
        let data = samples.into_iter().flatten().collect();
        Self::new(shape, data)
    }

    /// Samples `range` as a new tensor.
    pub fn select(&self, range: std::ops::Range<usize>) -> Self {
        let n = self.sample_len();
        let mut shape = self.shape;
        shape[0] = range.len();
        Self {
            shape,
            data: self.data[range.start * n..range.end * n].to_vec(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from(v).expect("representable")).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
