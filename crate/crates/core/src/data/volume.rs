//! Volume and mask grids plus the raw-f32-with-JSON-sidecar file format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent `[D, H, W]`; width varies fastest in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3(pub [usize; 3]);

impl Shape3 {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        Shape3([d, h, w])
    }

    pub fn voxels(&self) -> usize {
        self.0.iter().product()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.0[1] + y) * self.0[2] + x
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.0[2];
        let y = (i / self.0[2]) % self.0[1];
        let z = i / (self.0[1] * self.0[2]);
        [z, y, x]
    }

    pub fn fits_within(&self, other: &Shape3) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(a, b)| a <= b)
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// A 3D scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    shape: Shape3,
    pub spacing: [f64; 3],
    pub id: String,
}

impl Volume {
    pub fn new(data: Vec<f32>, shape: Shape3, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        if data.len() != shape.voxels() {
            return Err(Error::Shape(format!(
                "volume shape {shape} needs {} values, got {}",
                shape.voxels(),
                data.len()
            )));
        }
        if shape.0.contains(&0) {
            return Err(Error::Shape(format!("volume shape {shape} has an empty axis")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self {
            data,
            shape,
            spacing,
            id: id.into(),
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(z, y, x)]
    }

    /// Mean and population standard deviation, accumulated in f64.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }
}

/// A binary 3D grid with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    data: Vec<u8>,
    shape: Shape3,
}

impl BinaryMask {
    pub fn new(data: Vec<u8>, shape: Shape3) -> Result<Self> {
        if data.len() != shape.voxels() {
            return Err(Error::Shape(format!(
                "mask shape {shape} needs {} values, got {}",
                shape.voxels(),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!("mask value {v} is not binary")));
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            data: vec![0; shape.voxels()],
            shape,
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [d, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.voxels());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(z, y, x) as u8);
                }
            }
        }
        Self { data, shape }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.shape.index(z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.shape.index(z, y, x);
        self.data[i] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
    Uncertainty,
    Prediction,
    Probability,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    kind: VolumeKind,
    id: String,
}

/// Sidecar path for a payload path: same stem, `.json` extension.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

/// Writes `payload` as little-endian f32 plus a JSON sidecar next to it.
pub fn save_volume(v: &Volume, kind: VolumeKind, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let side = Sidecar {
        shape: v.shape.0,
        spacing: v.spacing,
        dtype: "f32".into(),
        kind,
        id: v.id.clone(),
    };
    let side_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::json(side_path.display().to_string(), e))?;
    fs::write(&side_path, text).map_err(|e| Error::io(format!("writing {}", side_path.display()), e))
}

/// Reads a volume written by [`save_volume`].
pub fn load_volume(path: &Path) -> Result<(Volume, VolumeKind)> {
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(format!("reading {}", side_path.display()), e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(side_path.display().to_string(), e))?;
    if side.dtype != "f32" {
        return Err(Error::Corrupt {
            path: side_path,
            reason: format!("unsupported dtype {:?}", side.dtype),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("payload of {} bytes is truncated mid-value", bytes.len()),
        });
    }
    let shape = Shape3(side.shape);
    let n = bytes.len() / 4;
    if n != shape.voxels() {
        return Err(Error::Shape(format!(
            "{}: sidecar shape {shape} needs {} values, payload holds {n}",
            path.display(),
            shape.voxels()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} holds {} at index {i}", path.display(), data[i])));
    }
    Ok((Volume::new(data, shape, side.spacing, side.id)?, side.kind))
}

pub fn save_mask(m: &BinaryMask, spacing: [f64; 3], id: &str, kind: VolumeKind, path: &Path) -> Result<()> {
    let v = Volume::new(m.data.iter().map(|&b| b as f32).collect(), m.shape, spacing, id)?;
    save_volume(&v, kind, path)
}

pub fn load_mask(path: &Path) -> Result<(BinaryMask, Volume)> {
    let (v, _) = load_volume(path)?;
    let mut data = Vec::with_capacity(v.data.len());
    for &x in &v.data {
        match x {
            0.0 => data.push(0),
            1.0 => data.push(1),
            other => {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("label value {other} is not binary"),
                })
            }
        }
    }
    Ok((BinaryMask::new(data, v.shape)?, v))
}
