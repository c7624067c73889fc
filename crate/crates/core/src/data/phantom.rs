//! Deterministic ellipsoid phantoms with smooth boundary deformation.
//!
//! Each case is a randomly oriented ellipsoid whose radius is modulated by a
//! low-order smooth function of direction, rendered on a voxel grid with
//! optional non-target blobs, a smooth intensity bias field and Gaussian noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::LabeledCase;
use super::volume::{BinaryMask, Shape3, Volume};
use crate::error::{Error, Result};
use crate::rng::{chacha, stream_seed, Stream};

const MIN_EXTENT: usize = 8;
const HARMONICS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Ellipsoid semi-axes as fractions of the extent of each axis.
    pub semi_axis_range: [f64; 2],
    /// Center offset from the grid center, as a fraction of each extent.
    pub center_jitter: f64,
    /// Foreground mean minus background mean.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Relative radial deformation amplitude of the boundary.
    pub deformation: f64,
    /// Number of non-target blobs drawn outside the foreground.
    pub distractors: usize,
    /// Distractor intensity relative to `contrast`.
    pub distractor_contrast: f64,
    /// Amplitude of the smooth additive intensity bias field.
    pub bias_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            semi_axis_range: [0.15, 0.3],
            center_jitter: 0.12,
            contrast: 1.0,
            noise_sigma: 0.6,
            deformation: 0.25,
            distractors: 3,
            distractor_contrast: 1.0,
            bias_amplitude: 0.4,
            seed: 2019,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(ax) = self.shape.iter().position(|&n| n < MIN_EXTENT) {
            return Err(Error::Config(format!(
                "phantom axis {ax} has extent {}, minimum is {MIN_EXTENT}",
                self.shape[ax]
            )));
        }
        let [lo, hi] = self.semi_axis_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(format!(
                "semi-axis range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 0.5"
            )));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..0.5).contains(&self.deformation) {
            return Err(Error::Config("deformation must lie in [0, 0.5)".into()));
        }
        if !(0.0..=0.5).contains(&self.center_jitter) {
            return Err(Error::Config("center_jitter must lie in [0, 0.5]".into()));
        }
        if self.spacing.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        if self.bias_amplitude < 0.0 || self.distractor_contrast < 0.0 {
            return Err(Error::Config("bias and distractor amplitudes must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Harmonic {
    direction: [f64; 3],
    frequency: f64,
    phase: f64,
    weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
}

/// The random draw behind one phantom, exposed so tests can rebuild the mask independently.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub center: [f64; 3],
    /// Semi-axes in voxels, along the rotated frame's axes.
    pub semi_axes: [f64; 3],
    /// Rows are the ellipsoid's principal directions in grid coordinates `(z, y, x)`.
    pub rotation: [[f64; 3]; 3],
    pub deformation: f64,
    harmonics: Vec<Harmonic>,
    pub distractors: Vec<Blob>,
    bias: [[f64; 2]; 3],
}

impl PhantomGeometry {
    /// Coordinates of a point in the ellipsoid's normalized frame.
    pub fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut q = [0.0; 3];
        for (i, row) in self.rotation.iter().enumerate() {
            q[i] = (row[0] * d[0] + row[1] * d[1] + row[2] * d[2]) / self.semi_axes[i];
        }
        q
    }

    /// Smooth boundary modulation in [-1, 1] for a unit direction.
    fn modulation(&self, n: [f64; 3]) -> f64 {
        self.harmonics
            .iter()
            .map(|h| {
                let proj = h.direction[0] * n[0] + h.direction[1] * n[1] + h.direction[2] * n[2];
                h.weight * (h.frequency * proj + h.phase).sin()
            })
            .sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.local(p);
        let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if r == 0.0 {
            return true;
        }
        if self.deformation == 0.0 {
            return r < 1.0;
        }
        let n = [q[0] / r, q[1] / r, q[2] / r];
        r < 1.0 + self.deformation * self.modulation(n)
    }

    fn bias_at(&self, p: [f64; 3], shape: Shape3) -> f64 {
        (0..3)
            .map(|a| {
                let t = p[a] / shape.0[a] as f64;
                self.bias[a][0] * (PI * t + self.bias[a][1]).sin()
            })
            .sum::<f64>()
            / 3.0
    }
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Draws the geometry of phantom `index`; a pure function of `(cfg.seed, index)`.
pub fn phantom_geometry(cfg: &PhantomConfig, index: u64) -> Result<PhantomGeometry> {
    cfg.validate()?;
    let mut rng = chacha(stream_seed(cfg.seed, Stream::Phantom, &[index]));
    let ext = cfg.shape.map(|n| n as f64);
    let [lo, hi] = cfg.semi_axis_range;

    let mut semi_axes = [0.0; 3];
    for (a, s) in semi_axes.iter_mut().enumerate() {
        *s = rng.gen_range(lo..=hi) * ext[a];
    }
    let mut center = [0.0; 3];
    for (a, c) in center.iter_mut().enumerate() {
        let j = if cfg.center_jitter > 0.0 {
            rng.gen_range(-cfg.center_jitter..=cfg.center_jitter)
        } else {
            0.0
        };
        *c = (ext[a] - 1.0) / 2.0 + j * ext[a];
    }

    // Random orthonormal frame (Gram-Schmidt on two random directions).
    let e0 = unit_vector(&mut rng);
    let mut t = unit_vector(&mut rng);
    let dot = e0[0] * t[0] + e0[1] * t[1] + e0[2] * t[2];
    t = [t[0] - dot * e0[0], t[1] - dot * e0[1], t[2] - dot * e0[2]];
    let e1 = normalized(t);
    let e2 = cross(e0, e1);

    let mut harmonics = Vec::with_capacity(HARMONICS);
    let mut total = 0.0;
    for _ in 0..HARMONICS {
        let h = Harmonic {
            direction: unit_vector(&mut rng),
            frequency: rng.gen_range(1.0..3.5),
            phase: rng.gen_range(0.0..2.0 * PI),
            weight: rng.gen_range(0.2..1.0),
        };
        total += h.weight;
        harmonics.push(h);
    }
    for h in &mut harmonics {
        h.weight /= total;
    }

    let mut bias = [[0.0; 2]; 3];
    for b in &mut bias {
        *b = [rng.gen_range(-1.0..=1.0) * cfg.bias_amplitude, rng.gen_range(0.0..2.0 * PI)];
    }

    let mut geom = PhantomGeometry {
        center,
        semi_axes,
        rotation: [e0, e1, e2],
        deformation: cfg.deformation,
        harmonics,
        distractors: Vec::new(),
        bias,
    };

    let min_ext = ext.iter().cloned().fold(f64::INFINITY, f64::min);
    for _ in 0..cfg.distractors {
        let radius = rng.gen_range(0.05..0.12) * min_ext;
        let mut c = [0.0; 3];
        for (a, v) in c.iter_mut().enumerate() {
            *v = rng.gen_range(radius.min(ext[a] / 2.0)..=(ext[a] - 1.0 - radius).max(ext[a] / 2.0));
        }
        geom.distractors.push(Blob { center: c, radius });
    }
    Ok(geom)
}

/// Renders phantom `index`: a deformed ellipsoid image and its exact mask.
pub fn generate_phantom(cfg: &PhantomConfig, index: u64) -> Result<LabeledCase> {
    let geom = phantom_geometry(cfg, index)?;
    let shape = Shape3(cfg.shape);
    let mask = BinaryMask::from_fn(shape, |z, y, x| geom.contains([z as f64, y as f64, x as f64]));

    // Noise comes from its own substream so geometry draws stay fixed when sigma changes.
    let mut noise_rng = chacha(stream_seed(cfg.seed, Stream::Phantom, &[index, 1]));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let [d, h, w] = cfg.shape;
    let mut data = Vec::with_capacity(shape.voxels());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut v = if mask.get(z, y, x) {
                    cfg.contrast
                } else {
                    let blob = geom.distractors.iter().any(|b| {
                        let dd: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
                        dd < b.radius * b.radius
                    });
                    if blob {
                        cfg.contrast * cfg.distractor_contrast
                    } else {
                        0.0
                    }
                };
                if cfg.bias_amplitude > 0.0 {
                    v += geom.bias_at(p, shape);
                }
                if cfg.noise_sigma > 0.0 {
                    v += cfg.noise_sigma * normal.sample(&mut noise_rng);
                }
                data.push(v as f32);
            }
        }
    }
    let image = Volume::new(data, shape, cfg.spacing, format!("phantom_{index:04}"))?;
    LabeledCase::new(image, mask)
}
