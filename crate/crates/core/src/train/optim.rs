use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::real::Real;

use super::config::TrainConfig;

/// `teacher = alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA decay {alpha} must lie in [0, 1]")));
    }
    teacher.check_compatible(student)?;
    let beta = 1.0 - alpha;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = T::lit(alpha * a.as_f64() + beta * b.as_f64());
        }
    }
    Ok(())
}

/// Steps between learning-rate decays.
pub fn lr_decay_interval(cfg: &TrainConfig) -> usize {
    ((cfg.t_max as f64 * cfg.lr_decay_fraction).round() as usize).max(1)
}

/// Piecewise-constant staircase: `lr0 * factor^(t / interval)`.
pub fn lr_schedule(t: usize, cfg: &TrainConfig) -> f64 {
    let k = t / lr_decay_interval(cfg);
    cfg.lr0 * cfg.lr_decay_factor.powi(k as i32)
}

/// SGD with heavy-ball momentum and L2 weight decay on every parameter.
///
/// `g = grad + wd * theta; buf = momentum * buf + g; theta -= lr * buf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: ParamSet<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        params.check_compatible(&self.buffers)?;
        let (m, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((p, g), buf) in params.iter_mut().zip(grads.iter()).zip(self.buffers.iter_mut()) {
            for ((theta, &grad), b) in p.data.iter_mut().zip(&g.data).zip(buf.data.iter_mut()) {
                let d = grad + wd * *theta;
                *b = m * *b + d;
                *theta -= lr * *b;
            }
        }
        Ok(())
    }
}
