//! Intensity normalization, random cropping and flip/rotation augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledCase;
use super::volume::{BinaryMask, Shape3, Volume};
use crate::error::{Error, Result};

/// Rescales to zero mean and unit (population) variance.
pub fn normalize(v: &Volume) -> Result<Volume> {
    let (mean, std) = v.moments();
    if !std.is_finite() || std <= 0.0 || std < 1e-12 * mean.abs().max(1.0) {
        return Err(Error::Degenerate(format!(
            "volume {:?} has standard deviation {std}",
            v.id
        )));
    }
    let data = v.data.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect();
    Volume::new(data, v.shape(), v.spacing, v.id.clone())
}

fn copy_block<T: Copy>(src: &[T], shape: Shape3, offset: [usize; 3], crop: Shape3) -> Vec<T> {
    let [cd, ch, cw] = crop.0;
    let mut out = Vec::with_capacity(crop.voxels());
    for z in 0..cd {
        for y in 0..ch {
            let start = shape.index(offset[0] + z, offset[1] + y, offset[2]);
            out.extend_from_slice(&src[start..start + cw]);
        }
    }
    out
}

fn check_crop(shape: Shape3, crop: Shape3) -> Result<()> {
    if !crop.fits_within(&shape) || crop.0.contains(&0) {
        return Err(Error::Shape(format!("crop {crop} does not fit volume {shape}")));
    }
    Ok(())
}

/// Uniform random offset over all valid crop positions.
pub fn random_offset<R: Rng>(shape: Shape3, crop: Shape3, rng: &mut R) -> Result<[usize; 3]> {
    check_crop(shape, crop)?;
    Ok(std::array::from_fn(|a| rng.gen_range(0..=shape.0[a] - crop.0[a])))
}

pub fn crop_volume(v: &Volume, offset: [usize; 3], crop: Shape3) -> Result<Volume> {
    check_crop(v.shape(), crop)?;
    Volume::new(copy_block(&v.data, v.shape(), offset, crop), crop, v.spacing, v.id.clone())
}

pub fn crop_mask(m: &BinaryMask, offset: [usize; 3], crop: Shape3) -> Result<BinaryMask> {
    check_crop(m.shape(), crop)?;
    BinaryMask::new(copy_block(m.data(), m.shape(), offset, crop), crop)
}

/// Crops image and label at one shared random offset.
pub fn random_crop<R: Rng>(case: &LabeledCase, crop: Shape3, rng: &mut R) -> Result<(LabeledCase, [usize; 3])> {
    let off = random_offset(case.image.shape(), crop, rng)?;
    let image = crop_volume(&case.image, off, crop)?;
    let label = crop_mask(&case.label, off, crop)?;
    // A crop may miss the foreground entirely; that is a valid training sample.
    Ok((LabeledCase::new_unchecked(image, label), off))
}

pub fn random_crop_volume<R: Rng>(v: &Volume, crop: Shape3, rng: &mut R) -> Result<(Volume, [usize; 3])> {
    let off = random_offset(v.shape(), crop, rng)?;
    Ok((crop_volume(v, off, crop)?, off))
}

/// A flip (optionally) followed by quarter turns in the plane of axes 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Transform {
    pub flip: Option<usize>,
    pub quarter_turns: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: None,
        quarter_turns: 0,
    };

    /// All 16 transforms of the augmentation group.
    pub fn all() -> Vec<Transform> {
        let flips = [None, Some(0), Some(1), Some(2)];
        flips
            .iter()
            .flat_map(|&flip| (0..4).map(move |q| Transform { flip, quarter_turns: q }))
            .collect()
    }

    pub fn random<R: Rng>(rng: &mut R, allow_rotation: bool) -> Transform {
        let flip = match rng.gen_range(0..4u8) {
            0 => None,
            a => Some(a as usize - 1),
        };
        let q = rng.gen_range(0..4u8);
        Transform {
            flip,
            quarter_turns: if allow_rotation { q } else { 0 },
        }
    }

    /// Source index in the input grid for each output voxel.
    pub fn apply<T: Copy>(&self, src: &[T], shape: Shape3) -> Result<Vec<T>> {
        let q = self.quarter_turns % 4;
        if q != 0 && shape.0[0] != shape.0[1] {
            return Err(Error::Shape(format!(
                "rotation needs a square plane over axes 0 and 1, got {shape}"
            )));
        }
        let [d, h, w] = shape.0;
        let mut out = Vec::with_capacity(src.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    // Undo the rotation, then the flip.
                    let (mut a, mut b) = (z, y);
                    for _ in 0..q {
                        // One quarter turn maps (a, b) -> (b, n-1-a); invert it.
                        let (na, nb) = (h - 1 - b, a);
                        a = na;
                        b = nb;
                    }
                    let mut p = [a, b, x];
                    if let Some(ax) = self.flip {
                        p[ax] = shape.0[ax] - 1 - p[ax];
                    }
                    out.push(src[shape.index(p[0], p[1], p[2])]);
                }
            }
        }
        Ok(out)
    }
}

/// Applies one random transform to image and label together.
///
/// Returns the transform used; rotations are disabled (and the returned flag set)
/// when axes 0 and 1 differ in extent.
pub fn augment<R: Rng>(case: &LabeledCase, rng: &mut R) -> Result<(LabeledCase, Transform, bool)> {
    let shape = case.image.shape();
    let square = shape.0[0] == shape.0[1];
    let t = Transform::random(rng, square);
    let image = Volume::new(t.apply(&case.image.data, shape)?, shape, case.image.spacing, case.image.id.clone())?;
    let label = BinaryMask::new(t.apply(case.label.data(), shape)?, shape)?;
    Ok((LabeledCase::new_unchecked(image, label), t, !square))
}

pub fn augment_volume<R: Rng>(v: &Volume, rng: &mut R) -> Result<(Volume, Transform)> {
    let shape = v.shape();
    let t = Transform::random(rng, shape.0[0] == shape.0[1]);
    Ok((Volume::new(t.apply(&v.data, shape)?, shape, v.spacing, v.id.clone())?, t))
}
