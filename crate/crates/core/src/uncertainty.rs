//! Monte-Carlo dropout passes and voxelwise predictive entropy.

use crate::data::{save_volume, Shape3, Volume, VolumeKind};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{softmax, Backbone, ForwardMode, ParamSet, Tensor};
use crate::real::Real;
use crate::rng::derive;

/// Lower clamp applied to mean probabilities before taking the log.
pub const ENTROPY_EPS: f64 = 1e-12;

/// `T` stochastic softmax outputs for one input, laid out `T x C x voxels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStack<T> {
    passes: usize,
    classes: usize,
    dims: [usize; 3],
    probs: Vec<T>,
}

impl<T: Real> ProbStack<T> {
    pub fn new(passes: usize, classes: usize, dims: [usize; 3], probs: Vec<T>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if probs.len() != passes * classes * n {
            return Err(Error::Shape(format!(
                "prob stack {passes}x{classes}x{dims:?} needs {} values, got {}",
                passes * classes * n,
                probs.len()
            )));
        }
        if passes == 0 || classes < 2 {
            return Err(Error::Shape("prob stack needs at least one pass and two classes".into()));
        }
        Ok(Self {
            passes,
            classes,
            dims,
            probs,
        })
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Probabilities of pass `t`, `C x voxels`.
    pub fn pass(&self, t: usize) -> &[T] {
        let n = self.classes * self.voxels();
        &self.probs[t * n..(t + 1) * n]
    }

    /// Mean class distribution over passes, `C x voxels`.
    pub fn mean(&self) -> Vec<T> {
        let n = self.classes * self.voxels();
        let mut acc = vec![0.0f64; n];
        for t in 0..self.passes {
            for (a, &p) in acc.iter_mut().zip(self.pass(t)) {
                *a += p.as_f64();
            }
        }
        let inv = 1.0 / self.passes as f64;
        acc.into_iter().map(|a| T::lit(a * inv)).collect()
    }
}

/// Voxelwise predictive entropy in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap<T> {
    pub dims: [usize; 3],
    pub u: Vec<T>,
    pub u_max: T,
}

impl<T: Real> UncertaintyMap<T> {
    pub fn to_volume(&self, id: &str) -> Result<Volume> {
        let data = self.u.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        Volume::new(data, Shape3(self.dims), [1.0; 3], id)
    }

    /// Writes the map in the volume file format with kind `uncertainty`.
    pub fn save(&self, id: &str, path: &std::path::Path) -> Result<()> {
        save_volume(&self.to_volume(id)?, VolumeKind::Uncertainty, path)
    }
}

/// Runs `passes` stochastic forward passes of the teacher, each with fresh
/// dropout masks and input noise, and regroups them per input sample.
///
/// Pass `t` draws from the substream `derive(seed, t)`, so passes may run in
/// any order and still produce the same stack.
pub fn mc_forward<T: Real>(
    net: &Backbone,
    teacher: &ParamSet<T>,
    input: &Tensor<T>,
    passes: usize,
    noise_sigma: f64,
    noise_clip: f64,
    seed: u64,
) -> Result<Vec<ProbStack<T>>> {
    if passes < 2 {
        return Err(Error::Config(format!(
            "Monte-Carlo uncertainty needs at least 2 passes, got {passes}"
        )));
    }
    let outs = exec::map_indices(passes, |t| {
        let mode = ForwardMode::stochastic(derive(seed, &[t as u64]), noise_sigma, noise_clip);
        net.forward(teacher, input, &mode).and_then(|l| softmax(&l))
    });
    let outs: Vec<Tensor<T>> = outs.into_iter().collect::<Result<_>>()?;
    let classes = net.config().num_classes;
    let dims = input.spatial();
    (0..input.batch())
        .map(|b| {
            let mut probs = Vec::with_capacity(passes * outs[0].sample_len());
            for o in &outs {
                probs.extend_from_slice(o.sample(b));
            }
            ProbStack::new(passes, classes, dims, probs)
        })
        .collect()
}

/// `u = -sum_c mu_c ln mu_c` with `mu_c` the mean over passes.
pub fn predictive_entropy<T: Real>(stack: &ProbStack<T>) -> UncertaintyMap<T> {
    let n = stack.voxels();
    let c = stack.classes();
    let inv = 1.0 / stack.passes() as f64;
    let mut u = Vec::with_capacity(n);
    for v in 0..n {
        let mut h = 0.0f64;
        for k in 0..c {
            let mut mu = 0.0f64;
            for t in 0..stack.passes() {
                mu += stack.pass(t)[k * n + v].as_f64();
            }
            let mu = (mu * inv).clamp(0.0, 1.0);
            h -= mu * mu.max(ENTROPY_EPS).ln();
        }
        u.push(T::lit(h.max(0.0)));
    }
    UncertaintyMap {
        dims: stack.dims(),
        u,
        u_max: T::lit((c as f64).ln()),
    }
}

/// Selects voxels with `u < h` (strict). Returns the mask and its count.
pub fn certainty_mask<T: Real>(map: &UncertaintyMap<T>, h: T) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = map.u.iter().map(|&u| u < h).collect();
    let count = mask.iter().filter(|&&m| m).count();
    (mask, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use proptest::prelude::*;

    fn stack(passes: &[[f64; 2]]) -> ProbStack<f64> {
        let mut probs = Vec::new();
        for p in passes {
            probs.extend_from_slice(p);
        }
        ProbStack::new(passes.len(), 2, [1, 1, 1], probs).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((predictive_entropy(&stack(&[[0.5, 0.5]; 4])).u[0] - ln2).abs() < 1e-12);
        assert_eq!(predictive_entropy(&stack(&[[1.0, 0.0]; 3])).u[0], 0.0);
        assert!((predictive_entropy(&stack(&[[1.0, 0.0], [0.0, 1.0]])).u[0] - ln2).abs() < 1e-12);
        let u = predictive_entropy(&stack(&[[0.8, 0.2], [0.6, 0.4]])).u[0];
        let want = -0.7 * 0.7f64.ln() - 0.3 * 0.3f64.ln();
        assert!((u - want).abs() < 1e-12);
        assert!((u - 0.61086).abs() < 1e-5);
    }

    #[test]
    fn mask_examples() {
        let map = UncertaintyMap {
            dims: [1, 1, 3],
            u: vec![0.1, 0.69, 0.5],
            u_max: std::f64::consts::LN_2,
        };
        assert_eq!(certainty_mask(&map, 0.52), (vec![true, false, true], 2));
        assert_eq!(certainty_mask(&map, 0.0).1, 0);
        assert_eq!(certainty_mask(&map, map.u_max).1, 3);
        // Ties at exactly H are excluded.
        assert_eq!(certainty_mask(&map, 0.5).1, 1);
    }

    #[test]
    fn mc_forward_rejects_single_pass() {
        let net = Backbone::new(NetConfig {
            base_width: 2,
            num_stages: 2,
            ..NetConfig::default()
        })
        .unwrap();
        let p = net.init_params::<f64>(0);
        let x = Tensor::<f64>::zeros([1, 1, 4, 4, 4]);
        assert!(mc_forward(&net, &p, &x, 1, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn mc_passes_vary_only_with_stochasticity() {
        let cfg = NetConfig {
            base_width: 2,
            num_stages: 2,
            ..NetConfig::default()
        };
        let x = Tensor::new([2, 1, 8, 4, 4], (0..256).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();

        let inert = Backbone::new(NetConfig {
            dropout_rate: 0.0,
            ..cfg.clone()
        })
        .unwrap();
        let p = inert.init_params::<f64>(1);
        let stacks = mc_forward(&inert, &p, &x, 4, 0.0, 0.0, 9).unwrap();
        for s in &stacks {
            for t in 1..4 {
                assert_eq!(s.pass(t), s.pass(0));
            }
        }

        let net = Backbone::new(cfg).unwrap();
        let p = net.init_params::<f64>(1);
        let a = mc_forward(&net, &p, &x, 4, 0.1, 0.2, 9).unwrap();
        assert_eq!(a, mc_forward(&net, &p, &x, 4, 0.1, 0.2, 9).unwrap());
        assert!((1..4).any(|t| a[0].pass(t) != a[0].pass(0)));
    }

    fn arb_stack() -> impl Strategy<Value = ProbStack<f64>> {
        (2usize..6, 2usize..4).prop_flat_map(|(t, c)| {
            proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, c), t).prop_map(move |rows| {
                let mut probs = Vec::new();
                for r in rows {
                    let s: f64 = r.iter().sum::<f64>() + 1e-9;
                    probs.extend(r.iter().map(|v| (v + 1e-9 / c as f64) / s));
                }
                ProbStack::new(t, c, [1, 1, 1], probs).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_permutation_invariant(s in arb_stack(), rot in 0usize..8) {
            let u = predictive_entropy(&s).u[0];
            prop_assert!(u >= 0.0);
            prop_assert!(u <= (s.classes() as f64).ln() + 1e-7);
            let t = s.passes();
            let mut probs = Vec::new();
            for i in 0..t {
                probs.extend_from_slice(s.pass((i + rot) % t));
            }
            let permuted = ProbStack::new(t, s.classes(), [1, 1, 1], probs).unwrap();
            prop_assert!((predictive_entropy(&permuted).u[0] - u).abs() < 1e-12);
        }

        #[test]
        fn mask_count_monotone(us in proptest::collection::vec(0.0f64..0.7, 1..50), h1 in 0.0f64..0.7, h2 in 0.0f64..0.7) {
            let map = UncertaintyMap { dims: [1, 1, us.len()], u: us, u_max: std::f64::consts::LN_2 };
            let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
            prop_assert!(certainty_mask(&map, lo).1 <= certainty_mask(&map, hi).1);
        }
    }

    #[test]
    fn agreement_drives_entropy_to_zero() {
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let eps = 10f64.powi(-k);
            let u = predictive_entropy(&stack(&[[1.0 - eps, eps], [1.0 - eps / 2.0, eps / 2.0]])).u[0];
            assert!(u < last);
            last = u;
        }
        assert!(last < 1e-6);
    }
}
