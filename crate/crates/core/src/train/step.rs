use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{
    consistency_grad, lambda_ramp, masked_consistency_grad, supervised_loss_grad, threshold_ramp, Consistency, LossWeights,
};
use crate::nn::{softmax, softmax_backward, Backbone, ForwardMode, NetConfig, ParamSet, Tensor};
use crate::rng::{stream_seed, Stream};
use crate::uncertainty::{mc_forward, predictive_entropy, ProbStack};

use super::config::{Method, TeacherTarget, TrainConfig};
use super::optim::{ema_update, lr_schedule, Sgd};
/// Per-sample Monte-Carlo probability stacks of one batch.
type McStacks = Vec<ProbStack<f32>>;


/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub lambda: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub loss_sup: f64,
    pub loss_cons: f64,
    pub sel_frac: f64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: usize,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub optimizer: Sgd<f32>,
    pub log: Vec<StepRecord>,
}

/// Fixed ingredients of a training run: network, schedule and loss settings.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Backbone,
    pub weights: LossWeights,
    lambda_override: Option<f64>,
}

/// Statistics summarised into the diagnostic dump of a failed step.
#[derive(Debug, Serialize)]
struct StepDiagnostic<'a> {
    step: usize,
    method: &'a str,
    ids: Vec<String>,
    lr: f64,
    lambda: f64,
    h: f64,
    loss_sup: f64,
    loss_cons: f64,
    input_min: f32,
    input_max: f32,
    input_non_finite: usize,
    student_params_finite: bool,
    teacher_params_finite: bool,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, net: NetConfig, weights: LossWeights) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        let net = Backbone::new(net)?;
        net.config().check_spatial(cfg.crop)?;
        Ok(Self {
            cfg,
            net,
            weights,
            lambda_override: None,
        })
    }

    /// Pins the consistency weight to a constant instead of the ramp.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_override = Some(lambda);
        self
    }

    /// Student from the seeded initializer; the teacher starts as an exact copy.
    pub fn init_state(&self) -> TrainerState {
        let student: ParamSet<f32> = self.net.init_params(stream_seed(self.cfg.seed, Stream::Init, &[]));
        let optimizer = Sgd::new(&student, self.cfg.momentum, self.cfg.weight_decay);
        TrainerState {
            step: 0,
            teacher: student.clone(),
            student,
            optimizer,
            log: Vec::new(),
        }
    }

    pub fn lambda_at(&self, t: usize) -> f64 {
        self.lambda_override
            .unwrap_or_else(|| lambda_ramp(t, self.cfg.t_max, &self.weights))
    }

    pub fn threshold_at(&self, t: usize) -> f64 {
        threshold_ramp(t, self.cfg.t_max, (self.net.config().num_classes as f64).ln())
    }

    /// Inputs covered by the consistency term.
    fn consistency_scope(&self, batch: &Batch) -> Range<usize> {
        match self.cfg.method {
            Method::SupOnly => 0..0,
            Method::UaMtUn => batch.n_labeled()..batch.len(),
            Method::Mt | Method::UaMt => 0..batch.len(),
        }
    }

    fn student_mode(&self, t: usize) -> ForwardMode {
        let seed = stream_seed(self.cfg.seed, Stream::StudentPerturbation, &[t as u64]);
        ForwardMode::stochastic(seed, self.cfg.noise_sigma, self.cfg.noise_clip)
    }

    fn mc_stacks(&self, teacher: &ParamSet<f32>, input: &Tensor<f32>, t: usize) -> Result<Vec<ProbStack<f32>>> {
        mc_forward(
            &self.net,
            teacher,
            input,
            self.cfg.mc_passes,
            self.cfg.noise_sigma,
            self.cfg.noise_clip,
            stream_seed(self.cfg.seed, Stream::McPasses, &[t as u64]),
        )
    }

    /// Teacher target probabilities plus, for uncertainty methods, the per-sample MC stacks.
    fn teacher_outputs(
        &self,
        teacher: &ParamSet<f32>,
        input: &Tensor<f32>,
        t: usize,
    ) -> Result<(Tensor<f32>, Option<McStacks>)> {
        let need_stacks = self.cfg.method.uses_uncertainty() || self.cfg.teacher_target == TeacherTarget::McMean;
        let stacks = if need_stacks {
            Some(self.mc_stacks(teacher, input, t)?)
        } else {
            None
        };
        let target = match (self.cfg.teacher_target, &stacks) {
            (TeacherTarget::McMean, Some(s)) => {
                Tensor::from_samples(self.net.config().num_classes, input.spatial(), s.iter().map(|p| p.mean()).collect())?
            }
            _ => {
                let seed = stream_seed(self.cfg.seed, Stream::TeacherPerturbation, &[t as u64]);
                let mode = ForwardMode::stochastic(seed, self.cfg.noise_sigma, self.cfg.noise_clip);
                softmax(&self.net.forward(teacher, input, &mode)?)?
            }
        };
        Ok((target, stacks))
    }

    /// One optimization step: student loss and gradient, SGD on the student, EMA on the teacher.
    pub fn train_step(&self, state: &mut TrainerState, batch: &Batch) -> Result<StepRecord> {
        let t = state.step;
        let lr = lr_schedule(t, &self.cfg);
        let lambda = self.lambda_at(t);
        let h = self.threshold_at(t);
        let n_lab = batch.n_labeled();
        if n_lab == 0 {
            return Err(Error::Config("batch carries no labeled samples".into()));
        }
        let student_range = if self.cfg.method == Method::SupOnly {
            0..n_lab
        } else {
            0..batch.len()
        };
        let x = batch.input::<f32>(student_range.clone());
        let (logits, tape) = self.net.forward_with_tape(&state.student, &x, &self.student_mode(t))?;
        let mut record = StepRecord {
            step: t,
            lr,
            lambda,
            h,
            loss_sup: f64::NAN,
            loss_cons: 0.0,
            sel_frac: 0.0,
        };
        let probs = match softmax(&logits) {
            Ok(p) => p,
            Err(Error::NonFinite(what)) => {
                return Err(self.numerical_failure(state, batch, &record, &format!("student forward: {what}")))
            }
            Err(e) => return Err(e),
        };

        let (loss_sup, g_sup) = supervised_loss_grad(&probs.select(0..n_lab), &batch.label_data(), &self.weights)?;
        let mut dprobs = Tensor::zeros(probs.shape());
        for b in 0..n_lab {
            dprobs.sample_mut(b).copy_from_slice(g_sup.sample(b));
        }

        let scope = self.consistency_scope(batch);
        let mut loss_cons = 0.0f64;
        let mut sel_frac = 0.0f64;
        if !scope.is_empty() {
            let tx = if scope == student_range {
                x.clone()
            } else {
                batch.input::<f32>(scope.clone())
            };
            let (target, stacks) = self.teacher_outputs(&state.teacher, &tx, t)?;
            let student_scope = probs.select(scope.clone());
            let cons: Consistency<f32> = if self.cfg.method.uses_uncertainty() {
                let maps: Vec<_> = stacks
                    .as_deref()
                    .expect("uncertainty methods compute MC stacks")
                    .iter()
                    .map(predictive_entropy)
                    .collect();
                masked_consistency_grad(&student_scope, &target, &maps, h as f32)?
            } else {
                consistency_grad(&student_scope, &target, None)?
            };
            loss_cons = cons.value as f64;
            sel_frac = cons.selected as f64 / cons.total as f64;
            let lam = lambda as f32;
            for (j, b) in scope.clone().enumerate() {
                for (d, &g) in dprobs.sample_mut(b).iter_mut().zip(cons.grad.sample(j)) {
                    *d += lam * g;
                }
            }
        }

        let total = loss_sup as f64 + lambda * loss_cons;
        record.loss_sup = loss_sup as f64;
        record.loss_cons = loss_cons;
        record.sel_frac = sel_frac;
        if !total.is_finite() {
            return Err(self.numerical_failure(state, batch, &record, "loss is not finite"));
        }
        let dlogits = softmax_backward(&probs, &dprobs)?;
        let grads = self.net.backward_from_tape(&state.student, &tape, &dlogits)?;
        if !grads.is_finite() {
            return Err(self.numerical_failure(state, batch, &record, "gradient is not finite"));
        }

        let teacher_before = cfg!(debug_assertions).then(|| state.teacher.clone());
        state.optimizer.step(&mut state.student, &grads, lr)?;
        if let Some(before) = teacher_before {
            debug_assert!(before == state.teacher, "optimizer touched the teacher");
        }
        ema_update(&mut state.teacher, &state.student, self.cfg.ema_alpha)?;
        if !state.student.is_finite() {
            return Err(self.numerical_failure(state, batch, &record, "student parameters became non-finite"));
        }
        state.step += 1;
        state.log.push(record.clone());
        Ok(record)
    }

    fn numerical_failure(&self, state: &TrainerState, batch: &Batch, record: &StepRecord, what: &str) -> Error {
        let values = batch.images.iter().flat_map(|v| v.data.iter().copied());
        let (mut lo, mut hi, mut bad) = (f32::INFINITY, f32::NEG_INFINITY, 0usize);
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            } else {
                bad += 1;
            }
        }
        let diag = StepDiagnostic {
            step: record.step,
            method: self.cfg.method.name(),
            ids: batch.ids(),
            lr: record.lr,
            lambda: record.lambda,
            h: record.h,
            loss_sup: record.loss_sup,
            loss_cons: record.loss_cons,
            input_min: lo,
            input_max: hi,
            input_non_finite: bad,
            student_params_finite: state.student.is_finite(),
            teacher_params_finite: state.teacher.is_finite(),
        };
        let detail = serde_json::to_string(&diag).unwrap_or_else(|_| format!("{diag:?}"));
        Error::Numerical {
            step: record.step,
            detail: format!("{what}: {detail}"),
        }
    }
}
