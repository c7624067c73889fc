//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uamt::data::{DatasetSplit, PhantomConfig, SplitSizes};
use uamt::losses::{ce_loss, ce_loss_grad, dice_loss, dice_loss_grad, masked_consistency, masked_consistency_grad, supervised_loss, supervised_loss_grad, LossWeights};
use uamt::nn::{softmax, softmax_backward, Backbone, ForwardMode, NetConfig, ParamSet, Tensor};
use uamt::train::{Method, TrainConfig};
use uamt::uncertainty::UncertaintyMap;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small phantoms that keep a full training step well under a second.
pub fn tiny_phantom() -> PhantomConfig {
    PhantomConfig {
        shape: [16, 16, 16],
        semi_axis_range: [0.2, 0.35],
        ..PhantomConfig::default()
    }
}

pub fn tiny_split() -> DatasetSplit {
    DatasetSplit::generate(
        &tiny_phantom(),
        SplitSizes {
            labeled: 2,
            unlabeled: 3,
            test: 2,
        },
    )
    .unwrap()
}

pub fn tiny_net() -> NetConfig {
    NetConfig {
        base_width: 2,
        num_stages: 2,
        ..NetConfig::default()
    }
}

pub fn tiny_train(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        t_max: 20,
        mc_passes: 3,
        crop: [8, 8, 8],
        checkpoint_every: 0,
        seed: 17,
        ..TrainConfig::default()
    }
}

/// Random two-class probability tensor `[b, 2, d, h, w]`, bounded away from 0 and 1.
///
/// The truncation error of a central difference of `-ln p` is about
/// `eps^2 / (3 p^2)` relative, so probabilities stay in [0.1, 0.9] where it is
/// well below the gradient tolerance.
pub fn random_probs(rng: &mut ChaCha8Rng, b: usize, dims: [usize; 3]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(b * 2 * n);
    for _ in 0..b {
        let fg: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
        data.extend(fg.iter().map(|p| 1.0 - p));
        data.extend(fg);
    }
    Tensor::new([b, 2, dims[0], dims[1], dims[2]], data).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect()
}

/// Worst elementwise relative error between an analytic gradient and a
/// central difference of `f` at `x`. Entries where both are below `floor`
/// in magnitude are compared absolutely against `floor * FD_TOL`.
pub fn fd_relative_error(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], eps: f64) -> f64 {
    assert_eq!(x.len(), grad.len());
    let floor = 1e-8;
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let fp = f(&xp);
        xp[i] = x[i] - eps;
        let fm = f(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * eps);
        let scale = fd.abs().max(grad[i].abs()).max(floor);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    worst
}

fn with_data(t: &Tensor<f64>, x: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape(), x.to_vec()).unwrap()
}

pub fn ce_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = random_probs(&mut r, 2, [2, 3, 2]);
    let y = random_labels(&mut r, 2 * 12);
    let (_, g) = ce_loss_grad(&p, &y).unwrap();
    fd_relative_error(|x| ce_loss(&with_data(&p, x), &y).unwrap(), p.data(), g.data(), FD_EPS)
}

pub fn dice_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = random_probs(&mut r, 2, [2, 3, 2]);
    let y = random_labels(&mut r, 2 * 12);
    let (_, g) = dice_loss_grad(&p, &y).unwrap();
    fd_relative_error(|x| dice_loss(&with_data(&p, x), &y).unwrap(), p.data(), g.data(), FD_EPS)
}

pub fn supervised_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = random_probs(&mut r, 2, [2, 2, 3]);
    let y = random_labels(&mut r, 2 * 12);
    let w = LossWeights::default();
    let (_, g) = supervised_loss_grad(&p, &y, &w).unwrap();
    fd_relative_error(|x| supervised_loss(&with_data(&p, x), &y, &w).unwrap(), p.data(), g.data(), FD_EPS)
}

pub fn consistency_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dims = [2, 2, 3];
    let s = random_probs(&mut r, 2, dims);
    let t = random_probs(&mut r, 2, dims);
    let maps: Vec<UncertaintyMap<f64>> = (0..2)
        .map(|_| UncertaintyMap {
            dims,
            u: (0..12).map(|_| r.gen_range(0.0..std::f64::consts::LN_2)).collect(),
            u_max: std::f64::consts::LN_2,
        })
        .collect();
    let h = 0.5;
    let c = masked_consistency_grad(&s, &t, &maps, h).unwrap();
    assert!(c.selected > 0 && c.selected < c.total, "fixture should mask some voxels");
    fd_relative_error(|x| masked_consistency(&with_data(&s, x), &t, &maps, h).unwrap(), s.data(), c.grad.data(), FD_EPS)
}

pub fn set_flat(template: &ParamSet<f64>, x: &[f64]) -> ParamSet<f64> {
    let mut p = template.clone();
    let mut it = x.iter();
    for q in p.iter_mut() {
        for v in q.data.iter_mut() {
            *v = *it.next().unwrap();
        }
    }
    p
}

/// Miniature network, full forward (noise and dropout on with a fixed seed),
/// softmax and supervised loss; analytic gradient vs central differences over
/// every parameter.
pub fn backbone_gradient_error(seed: u64) -> f64 {
    let cfg = NetConfig {
        base_width: 2,
        num_stages: 2,
        dropout_rate: 0.3,
        ..NetConfig::default()
    };
    let net = Backbone::new(cfg).unwrap();
    let mut params = net.init_params::<f64>(seed);
    let mut r = rng(seed ^ 0x55);
    // A central difference is only an oracle where the loss is smooth on
    // [theta - eps, theta + eps]. Biases of magnitude >= 0.5 and shrunken
    // weights keep every ReLU input at least ~0.1 from its kink, while random
    // bias signs leave a mix of active and blocked units.
    for q in params.iter_mut() {
        if q.name.ends_with(".b") {
            q.data.iter_mut().for_each(|b| {
                let m = r.gen_range(0.5..1.0);
                *b = if r.gen_bool(0.5) { m } else { -m };
            });
        } else {
            q.data.iter_mut().for_each(|w| *w *= 0.1);
        }
    }
    let x = Tensor::new([2, 1, 4, 4, 4], (0..128).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = random_labels(&mut r, 128);
    let mode = ForwardMode::stochastic(seed.wrapping_add(1), 0.1, 0.2);
    let w = LossWeights::default();
    let (_, g) = net
        .backward(&params, &x, &mode, |logits| {
            let p = softmax(logits)?;
            let (l, dp) = supervised_loss_grad(&p, &y, &w)?;
            Ok((l, softmax_backward(&p, &dp)?))
        })
        .unwrap();
    let f = |theta: &[f64]| {
        let p = set_flat(&params, theta);
        let probs = softmax(&net.forward(&p, &x, &mode).unwrap()).unwrap();
        supervised_loss(&probs, &y, &w).unwrap()
    };
    fd_relative_error(f, &params.flatten(), &g.flatten(), FD_EPS)
}
