use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Shape3;
use crate::error::{Error, Result};

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Supervised loss on labeled data only.
    #[serde(rename = "SUP_ONLY")]
    SupOnly,
    /// Mean teacher: unmasked consistency on every input.
    #[serde(rename = "MT")]
    Mt,
    /// Uncertainty-masked consistency on unlabeled inputs only.
    #[serde(rename = "UA_MT_UN")]
    UaMtUn,
    /// Uncertainty-masked consistency on every input.
    #[serde(rename = "UA_MT")]
    UaMt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SupOnly, Method::Mt, Method::UaMtUn, Method::UaMt];

    pub fn name(&self) -> &'static str {
        match self {
            Method::SupOnly => "SUP_ONLY",
            Method::Mt => "MT",
            Method::UaMtUn => "UA_MT_UN",
            Method::UaMt => "UA_MT",
        }
    }

    pub fn uses_consistency(&self) -> bool {
        !matches!(self, Method::SupOnly)
    }

    pub fn uses_uncertainty(&self) -> bool {
        matches!(self, Method::UaMt | Method::UaMtUn)
    }

    /// Report ordering: SUP_ONLY, MT, UA_MT_UN, UA_MT.
    pub fn report_rank(&self) -> usize {
        Method::ALL.iter().position(|m| m == self).expect("listed")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.name().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected one of SUP_ONLY, MT, UA_MT_UN, UA_MT")))
    }
}

/// Source of the teacher's consistency target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherTarget {
    /// One extra stochastic teacher pass.
    SinglePass,
    /// Mean of the Monte-Carlo passes.
    McMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub t_max: usize,
    pub lr0: f64,
    /// Learning-rate decay interval as a fraction of `t_max`.
    pub lr_decay_fraction: f64,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    pub mc_passes: usize,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub crop: [usize; 3],
    pub augment: bool,
    pub seed: u64,
    pub teacher_target: TeacherTarget,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::UaMt,
            t_max: 1500,
            lr0: 0.01,
            lr_decay_fraction: 2500.0 / 6000.0,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            ema_alpha: 0.99,
            mc_passes: 8,
            noise_sigma: 0.1,
            noise_clip: 0.2,
            batch_size: 4,
            labeled_per_batch: 2,
            crop: [32, 32, 24],
            augment: true,
            seed: 1337,
            teacher_target: TeacherTarget::SinglePass,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha {} must lie in [0, 1]", self.ema_alpha)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.lr_decay_fraction.is_nan()
            || self.lr_decay_fraction <= 0.0
            || !(0.0..=1.0).contains(&self.lr_decay_factor)
            || self.lr_decay_factor == 0.0
        {
            return Err(Error::Config("learning-rate decay settings out of range".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        if self.method.uses_uncertainty() && self.mc_passes < 2 {
            return Err(Error::Config(format!("mc_passes {} must be at least 2", self.mc_passes)));
        }
        if self.teacher_target == TeacherTarget::McMean && self.mc_passes < 2 {
            return Err(Error::Config("the mc_mean teacher target needs mc_passes >= 2".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.batch_size == 0 || self.labeled_per_batch == 0 || self.labeled_per_batch > self.batch_size {
            return Err(Error::Config(format!(
                "labeled_per_batch {} must lie in [1, batch_size {}]",
                self.labeled_per_batch, self.batch_size
            )));
        }
        if self.crop.contains(&0) {
            return Err(Error::Config("crop extents must be positive".into()));
        }
        Ok(())
    }

    pub fn crop_shape(&self) -> Shape3 {
        Shape3(self.crop)
    }

    /// Batch size actually drawn: supervised-only training skips the unlabeled slots,
    /// so every method sees the same labeled crops per step.
    pub fn effective_batch_size(&self) -> usize {
        match self.method {
            Method::SupOnly => self.labeled_per_batch,
            _ => self.batch_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert_eq!("ua-mt".parse::<Method>().unwrap(), Method::UaMt);
        assert!("UAMT2".parse::<Method>().is_err());
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            ema_alpha: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
