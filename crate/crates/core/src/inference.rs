//! Full-volume prediction by averaging softmax outputs over overlapping windows.
//!
//! Window starts step by `stride` along each axis, with one extra window flush
//! to the far edge so every voxel is covered. Volumes smaller than the window
//! are zero-padded symmetrically and the result is cropped back.

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Shape3, Volume};
use crate::error::{Error, Result};
use crate::nn::{softmax, Backbone, ForwardMode, ParamSet, Tensor};
use crate::real::Real;

/// Windows evaluated per network call.
const WINDOW_BATCH: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingWindowConfig {
    /// Window extent; `None` uses the training crop.
    pub window: Option<[usize; 3]>,
    /// Step between windows; `None` uses half the window (at least 1).
    pub stride: Option<[usize; 3]>,
}

impl SlidingWindowConfig {
    /// Concrete window and stride, given the training crop as fallback window.
    pub fn resolve(&self, crop: [usize; 3]) -> Result<([usize; 3], [usize; 3])> {
        let window = self.window.unwrap_or(crop);
        let stride = self.stride.unwrap_or(window.map(|w| (w / 2).max(1)));
        for k in 0..3 {
            if window[k] == 0 || stride[k] == 0 || stride[k] > window[k] {
                return Err(Error::Config(format!(
                    "sliding window {window:?} with stride {stride:?}: need 1 <= stride <= window on every axis"
                )));
            }
        }
        Ok((window, stride))
    }
}

/// Window starts along one axis of length `len >= window`.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(len >= window && stride >= 1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + window < len).collect();
    starts.push(len - window);
    starts.dedup();
    starts
}

/// How many windows cover each voxel of a volume at least as large as the window.
pub fn coverage_counts(shape: Shape3, window: [usize; 3], stride: [usize; 3]) -> Vec<u32> {
    let per_axis: Vec<Vec<u32>> = (0..3)
        .map(|k| {
            let mut c = vec![0u32; shape.0[k]];
            for s in window_starts(shape.0[k], window[k], stride[k]) {
                c[s..s + window[k]].iter_mut().for_each(|v| *v += 1);
            }
            c
        })
        .collect();
    let mut out = Vec::with_capacity(shape.voxels());
    for z in 0..shape.0[0] {
        for y in 0..shape.0[1] {
            for x in 0..shape.0[2] {
                out.push(per_axis[0][z] * per_axis[1][y] * per_axis[2][x]);
            }
        }
    }
    out
}

/// Prediction for one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Class-major probabilities, `classes x voxels`.
    pub probs: Vec<f32>,
    pub classes: usize,
    /// Foreground probability as a volume.
    pub foreground: Volume,
    /// Foreground iff `p_fg > 0.5`.
    pub mask: BinaryMask,
}

fn pad(v: &Volume, padded: Shape3, lo: [usize; 3]) -> Vec<f32> {
    let s = v.shape();
    if s == padded {
        return v.data.clone();
    }
    let mut out = vec![0.0f32; padded.voxels()];
    for z in 0..s.0[0] {
        for y in 0..s.0[1] {
            let src = s.index(z, y, 0);
            let dst = padded.index(z + lo[0], y + lo[1], lo[2]);
            out[dst..dst + s.0[2]].copy_from_slice(&v.data[src..src + s.0[2]]);
        }
    }
    out
}

fn extract<T: Real>(data: &[f32], shape: Shape3, start: [usize; 3], window: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(window.iter().product());
    for z in 0..window[0] {
        for y in 0..window[1] {
            let i = shape.index(start[0] + z, start[1] + y, start[2]);
            out.extend(data[i..i + window[2]].iter().map(|&x| T::lit(x as f64)));
        }
    }
    out
}

/// Averages window probabilities (dropout off, no noise) over the whole volume.
pub fn sliding_window_predict<T: Real>(
    net: &Backbone,
    params: &ParamSet<T>,
    volume: &Volume,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<Prediction> {
    net.config().check_spatial(window)?;
    let shape = volume.shape();
    let padded = Shape3(std::array::from_fn(|k| shape.0[k].max(window[k])));
    let lo: [usize; 3] = std::array::from_fn(|k| (padded.0[k] - shape.0[k]) / 2);
    let data = pad(volume, padded, lo);

    let axes: Vec<Vec<usize>> = (0..3).map(|k| window_starts(padded.0[k], window[k], stride[k])).collect();
    let mut starts = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                starts.push([z, y, x]);
            }
        }
    }

    let classes = net.config().num_classes;
    let n = padded.voxels();
    let mut sums = vec![0.0f64; classes * n];
    let mut counts = vec![0u32; n];
    let mode = ForwardMode::eval();
    for chunk in starts.chunks(WINDOW_BATCH) {
        let samples: Vec<Vec<T>> = chunk.iter().map(|&s| extract(&data, padded, s, window)).collect();
        let input = Tensor::from_samples(1, window, samples)?;
        let probs = softmax(&net.forward(params, &input, &mode)?)?;
        let wn: usize = window.iter().product();
        for (b, &s) in chunk.iter().enumerate() {
            let p = probs.sample(b);
            for z in 0..window[0] {
                for y in 0..window[1] {
                    let row = padded.index(s[0] + z, s[1] + y, s[2]);
                    let src = (z * window[1] + y) * window[2];
                    for x in 0..window[2] {
                        for c in 0..classes {
                            sums[c * n + row + x] += p[c * wn + src + x].as_f64();
                        }
                        counts[row + x] += 1;
                    }
                }
            }
        }
    }

    let out_n = shape.voxels();
    let mut probs = vec![0.0f32; classes * out_n];
    for z in 0..shape.0[0] {
        for y in 0..shape.0[1] {
            for x in 0..shape.0[2] {
                let src = padded.index(z + lo[0], y + lo[1], x + lo[2]);
                let dst = shape.index(z, y, x);
                let cnt = counts[src] as f64;
                debug_assert!(cnt >= 1.0);
                for c in 0..classes {
                    probs[c * out_n + dst] = (sums[c * n + src] / cnt) as f32;
                }
            }
        }
    }
    let fg: Vec<f32> = probs[out_n..2 * out_n].to_vec();
    let mask = BinaryMask::new(fg.iter().map(|&p| u8::from(p > 0.5)).collect(), shape)?;
    let foreground = Volume::new(fg, shape, volume.spacing, volume.id.clone())?;
    Ok(Prediction {
        probs,
        classes,
        foreground,
        mask,
    })
}
