//! Supervised and consistency losses, each with its gradient with respect to
//! the student's class probabilities, plus the Gaussian ramp-up schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::Real;
use crate::uncertainty::UncertaintyMap;

pub const PROB_EPS: f64 = 1e-12;
pub const DICE_SMOOTH: f64 = 1e-5;
/// Exponent of the Gaussian ramp `exp(-5 (1 - t/t_max)^2)`.
pub const RAMP_EXPONENT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub lambda_max: f64,
    pub ramp_exponent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce_weight: 0.5,
            dice_weight: 0.5,
            lambda_max: 0.1,
            ramp_exponent: RAMP_EXPONENT,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ce_weight, self.dice_weight, self.lambda_max, self.ramp_exponent];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn check_labels<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<()> {
    let n = probs.batch() * probs.voxels();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} voxels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= probs.channels()) {
        return Err(Error::Config(format!(
            "label {l} out of range for {} classes",
            probs.channels()
        )));
    }
    Ok(())
}

/// Mean over batch and voxels of `-ln p(true class)`, with its gradient.
pub fn ce_loss_grad<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    check_labels(probs, labels)?;
    let n = probs.voxels();
    let c = probs.channels();
    let total = (probs.batch() * n) as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let mut acc = 0.0f64;
    for b in 0..probs.batch() {
        let p = probs.sample(b);
        let g = grad.sample_mut(b);
        for v in 0..n {
            let k = labels[b * n + v] as usize;
            debug_assert!(k < c);
            let pt = p[k * n + v].as_f64();
            if pt > PROB_EPS {
                acc -= pt.ln();
                g[k * n + v] = T::lit(-1.0 / (pt * total));
            } else {
                acc -= PROB_EPS.ln();
            }
        }
    }
    Ok((T::lit(acc / total), grad))
}

pub fn ce_loss<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<T> {
    Ok(ce_loss_grad(probs, labels)?.0)
}

/// Soft Dice loss on the foreground channel over the whole batch, with its gradient.
pub fn dice_loss_grad<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    check_labels(probs, labels)?;
    if probs.channels() != 2 {
        return Err(Error::Shape("dice loss expects two classes".into()));
    }
    let n = probs.voxels();
    let (mut inter, mut psum, mut ysum) = (0.0f64, 0.0f64, 0.0f64);
    for b in 0..probs.batch() {
        let p = &probs.sample(b)[n..];
        for v in 0..n {
            let y = labels[b * n + v] as f64;
            let pf = p[v].as_f64();
            inter += pf * y;
            psum += pf;
            ysum += y;
        }
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = psum + ysum + DICE_SMOOTH;
    let loss = 1.0 - num / den;
    let mut grad = Tensor::zeros(probs.shape());
    for b in 0..probs.batch() {
        let g = &mut grad.sample_mut(b)[n..];
        for v in 0..n {
            let y = labels[b * n + v] as f64;
            g[v] = T::lit(-(2.0 * y * den - num) / (den * den));
        }
    }
    Ok((T::lit(loss), grad))
}

pub fn dice_loss<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<T> {
    Ok(dice_loss_grad(probs, labels)?.0)
}

/// `ce_weight * ce + dice_weight * dice`, with its gradient.
pub fn supervised_loss_grad<T: Real>(probs: &Tensor<T>, labels: &[u8], w: &LossWeights) -> Result<(T, Tensor<T>)> {
    let (ce, gce) = ce_loss_grad(probs, labels)?;
    let (dice, gdice) = dice_loss_grad(probs, labels)?;
    let (a, b) = (T::lit(w.ce_weight), T::lit(w.dice_weight));
    let mut grad = gce;
    for (g, &d) in grad.data_mut().iter_mut().zip(gdice.data()) {
        *g = a * *g + b * d;
    }
    Ok((a * ce + b * dice, grad))
}

pub fn supervised_loss<T: Real>(probs: &Tensor<T>, labels: &[u8], w: &LossWeights) -> Result<T> {
    Ok(supervised_loss_grad(probs, labels, w)?.0)
}

/// Value, gradient and selected-voxel count of the consistency loss.
#[derive(Debug, Clone)]
pub struct Consistency<T> {
    pub value: T,
    pub grad: Tensor<T>,
    pub selected: usize,
    pub total: usize,
}

/// Mean over selected voxels of the squared L2 distance between student and
/// teacher class vectors. `mask` is sample-major; `None` selects every voxel.
/// With nothing selected the loss and its gradient are zero.
pub fn consistency_grad<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>, mask: Option<&[bool]>) -> Result<Consistency<T>> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let n = student.voxels();
    let c = student.channels();
    let total = student.batch() * n;
    if let Some(m) = mask {
        if m.len() != total {
            return Err(Error::Shape(format!("mask of {} for {total} voxels", m.len())));
        }
    }
    let selected = mask.map_or(total, |m| m.iter().filter(|&&b| b).count());
    let mut grad = Tensor::zeros(student.shape());
    if selected == 0 {
        return Ok(Consistency {
            value: T::zero(),
            grad,
            selected,
            total,
        });
    }
    let inv = 1.0 / selected as f64;
    let mut acc = 0.0f64;
    for b in 0..student.batch() {
        let s = student.sample(b);
        let t = teacher.sample(b);
        let g = grad.sample_mut(b);
        for v in 0..n {
            if let Some(m) = mask {
                if !m[b * n + v] {
                    continue;
                }
            }
            for k in 0..c {
                let i = k * n + v;
                let d = (s[i] - t[i]).as_f64();
                acc += d * d;
                g[i] = T::lit(2.0 * d * inv);
            }
        }
    }
    Ok(Consistency {
        value: T::lit(acc * inv),
        grad,
        selected,
        total,
    })
}

/// Consistency restricted to voxels whose teacher uncertainty is below `h`.
pub fn masked_consistency_grad<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    uncertainty: &[UncertaintyMap<T>],
    h: T,
) -> Result<Consistency<T>> {
    if uncertainty.len() != student.batch() {
        return Err(Error::Shape(format!(
            "{} uncertainty maps for a batch of {}",
            uncertainty.len(),
            student.batch()
        )));
    }
    let mask: Vec<bool> = uncertainty
        .iter()
        .flat_map(|m| m.u.iter().map(move |&u| u < h))
        .collect();
    consistency_grad(student, teacher, Some(&mask))
}

pub fn masked_consistency<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>, uncertainty: &[UncertaintyMap<T>], h: T) -> Result<T> {
    Ok(masked_consistency_grad(student, teacher, uncertainty, h)?.value)
}

/// `exp(-exponent (1 - t/t_max)^2)`, with `t/t_max` clamped to [0, 1].
pub fn gaussian_ramp(t: usize, t_max: usize, exponent: f64) -> f64 {
    let x = if t_max == 0 {
        1.0
    } else {
        (t as f64 / t_max as f64).clamp(0.0, 1.0)
    };
    (-exponent * (1.0 - x) * (1.0 - x)).exp()
}

/// Consistency weight `lambda_max * exp(-5 (1 - t/t_max)^2)`.
pub fn lambda_ramp(t: usize, t_max: usize, w: &LossWeights) -> f64 {
    w.lambda_max * gaussian_ramp(t, t_max, w.ramp_exponent)
}

/// Uncertainty threshold ramped from about `3/4 u_max` up to `u_max`.
pub fn threshold_ramp(t: usize, t_max: usize, u_max: f64) -> f64 {
    u_max * (0.75 + 0.25 * gaussian_ramp(t, t_max, RAMP_EXPONENT))
}
