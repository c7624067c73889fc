//! Encoder-decoder segmentation network.
//!
//! Layout for `S = num_stages` and widths `w_k = base_width * 2^k`:
//!
//! ```text
//! e_0 = relu(conv3(x))                                  level 0
//! d_k = relu(down2(e_{k-1})), e_k = relu(conv3(d_k))    k = 1..=S, e_S is the bottleneck
//! o_S = dropout(e_S)
//! s_k = up2(conv1(o_{k+1})) + e_k, g_k = relu(conv3(s_k)) k = S-1..=0
//! o_{S-1} = dropout(g_{S-1}), o_k = g_k otherwise
//! logits = conv1(o_0)
//! ```
//!
//! Blocks are plain convolutions without intra-block residuals. Dropout sits
//! after the bottleneck and after the first decoder stage, with inverted scaling.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops;
use super::params::{Fingerprint, Param, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec;
use crate::real::Real;
use crate::rng::{chacha, derive, stream_seed, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub num_stages: usize,
    pub dropout_rate: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_width: 8,
            num_stages: 3,
            dropout_rate: 0.5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("in_channels and base_width must be positive".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "only binary segmentation is supported, got num_classes = {}",
                self.num_classes
            )));
        }
        if self.num_stages < 2 || self.num_stages > 8 {
            return Err(Error::Config(format!("num_stages {} must lie in [2, 8]", self.num_stages)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} must lie in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Every spatial axis must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.num_stages
    }

    pub fn check_spatial(&self, dims: [usize; 3]) -> Result<()> {
        const AXES: [&str; 3] = ["depth", "height", "width"];
        for (a, &n) in dims.iter().enumerate() {
            if n == 0 || n % self.divisor() != 0 {
                return Err(Error::Divisibility {
                    axis: AXES[a],
                    extent: n,
                    divisor: self.divisor(),
                });
            }
        }
        Ok(())
    }
}

/// Perturbations applied during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardMode {
    pub dropout_on: bool,
    /// Standard deviation of additive Gaussian input noise.
    pub noise_sigma: f64,
    /// Noise is clipped to `[-noise_clip, noise_clip]`; non-positive disables clipping.
    pub noise_clip: f64,
    pub seed: u64,
}

impl ForwardMode {
    /// Dropout off and no noise: the inference path.
    pub fn eval() -> Self {
        Self {
            dropout_on: false,
            noise_sigma: 0.0,
            noise_clip: 0.0,
            seed: 0,
        }
    }

    pub fn stochastic(seed: u64, noise_sigma: f64, noise_clip: f64) -> Self {
        Self {
            dropout_on: true,
            noise_sigma,
            noise_clip,
            seed,
        }
    }

    fn sample_rng(&self, sample: usize) -> ChaCha8Rng {
        chacha(derive(self.seed, &[sample as u64]))
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    w: usize,
}

impl Slot {
    fn b(&self) -> usize {
        self.w + 1
    }
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<Slot>,
    down: Vec<Option<Slot>>,
    up: Vec<Slot>,
    dec: Vec<Slot>,
    head: Slot,
    shapes: Vec<(String, Vec<usize>)>,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let s = cfg.num_stages;
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: &str, w_shape: Vec<usize>| -> Slot {
            let slot = Slot { w: shapes.len() };
            let cout = w_shape[0];
            shapes.push((format!("{name}.w"), w_shape));
            shapes.push((format!("{name}.b"), vec![cout]));
            slot
        };
        let mut enc = Vec::with_capacity(s + 1);
        let mut down = vec![None];
        enc.push(push("enc0", vec![cfg.width(0), cfg.in_channels, 3, 3, 3]));
        for k in 1..=s {
            down.push(Some(push(&format!("down{k}"), vec![cfg.width(k), cfg.width(k - 1), 2, 2, 2])));
            enc.push(push(&format!("enc{k}"), vec![cfg.width(k), cfg.width(k), 3, 3, 3]));
        }
        let mut up = vec![Slot { w: usize::MAX }; s];
        let mut dec = vec![Slot { w: usize::MAX }; s];
        for k in (0..s).rev() {
            up[k] = push(&format!("up{k}"), vec![cfg.width(k), cfg.width(k + 1), 1, 1, 1]);
            dec[k] = push(&format!("dec{k}"), vec![cfg.width(k), cfg.width(k), 3, 3, 3]);
        }
        let head = push("head", vec![cfg.num_classes, cfg.width(0), 1, 1, 1]);
        Self {
            enc,
            down,
            up,
            dec,
            head,
            shapes,
        }
    }
}

/// Activations of one sample, kept for the backward pass.
#[derive(Debug, Clone)]
struct SampleTape<T> {
    x0: Vec<T>,
    /// Post-ReLU encoder outputs by level; `e[S]` is before dropout.
    e: Vec<Vec<T>>,
    /// Post-ReLU downsampled features by level (`d[0]` unused).
    d: Vec<Vec<T>>,
    /// Decoder conv inputs by level.
    s: Vec<Vec<T>>,
    /// Post-ReLU decoder outputs by level, before dropout.
    g: Vec<Vec<T>>,
    /// Activations handed upward: `o[S]` from the bottleneck, `o[k]` from decoder level k.
    o: Vec<Vec<T>>,
    bottleneck_mask: Option<Vec<T>>,
    decoder_mask: Option<Vec<T>>,
}

/// Recorded forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    dims: [usize; 3],
    samples: Vec<SampleTape<T>>,
}

/// The network definition; parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: NetConfig,
    layout: Layout,
}

fn level_dims(dims: [usize; 3], level: usize) -> [usize; 3] {
    dims.map(|n| n >> level)
}

fn n_vox(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn dropout_mask<T: Real>(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    let cut = rate * 4_294_967_296.0;
    (0..n)
        .map(|_| if (rng.next_u32() as f64) < cut { T::zero() } else { keep })
        .collect()
}

/// Splits a (weight, bias) pair out of a gradient set.
fn pair_mut<T: Real>(g: &mut ParamSet<T>, slot: Slot) -> (&mut [T], &mut [T]) {
    let (w, b) = (slot.w, slot.b());
    debug_assert_eq!(b, w + 1);
    let mut it = g.iter_mut().skip(w);
    let pw = it.next().expect("weight slot");
    let pb = it.next().expect("bias slot");
    (&mut pw.data, &mut pb.data)
}

impl Backbone {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        Ok(Self { cfg, layout })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(self.layout.shapes.clone())
    }

    /// Fan-in scaled normal weights, zero biases; a pure function of `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let params = self
            .layout
            .shapes
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".b") {
                    vec![T::zero(); n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                    let std = (gain / fan_in as f64).sqrt();
                    let mut rng = chacha(stream_seed(seed, Stream::Init, &[i as u64]));
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::lit(std * z)
                        })
                        .collect()
                };
                Param {
                    name: name.clone(),
                    shape: shape.clone(),
                    data,
                }
            })
            .collect();
        ParamSet::new(params).expect("layout names are unique")
    }

    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        let fp = params.fingerprint();
        if fp != self.fingerprint() {
            return Err(Error::Fingerprint(format!(
                "parameters do not match network layout ({} arrays vs {} expected)",
                fp.0.len(),
                self.layout.shapes.len()
            )));
        }
        Ok(())
    }

    fn check_input<T: Real>(&self, params: &ParamSet<T>, input: &Tensor<T>) -> Result<()> {
        self.check_params(params)?;
        if input.channels() != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, network expects {}",
                input.channels(),
                self.cfg.in_channels
            )));
        }
        self.cfg.check_spatial(input.spatial())
    }

    fn sample_forward<T: Real>(
        &self,
        p: &ParamSet<T>,
        x: &[T],
        dims: [usize; 3],
        mode: &ForwardMode,
        sample: usize,
    ) -> (Vec<T>, SampleTape<T>) {
        let cfg = &self.cfg;
        let l = &self.layout;
        let s = cfg.num_stages;
        let w = |slot: Slot| p.by_index(slot.w).data.as_slice();
        let b = |slot: Slot| p.by_index(slot.b()).data.as_slice();
        let mut rng = mode.sample_rng(sample);

        let mut x0 = x.to_vec();
        if mode.noise_sigma > 0.0 {
            for v in &mut x0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                let mut e = mode.noise_sigma * z;
                if mode.noise_clip > 0.0 {
                    e = e.clamp(-mode.noise_clip, mode.noise_clip);
                }
                *v += T::lit(e);
            }
        }
        let dropout = mode.dropout_on && cfg.dropout_rate > 0.0;

        let mut e = Vec::with_capacity(s + 1);
        let mut d = vec![Vec::new()];
        let dims0 = dims;
        let mut e0 = vec![T::zero(); cfg.width(0) * n_vox(dims0)];
        ops::conv3(&x0, cfg.in_channels, dims0, w(l.enc[0]), b(l.enc[0]), cfg.width(0), &mut e0);
        ops::relu_inplace(&mut e0);
        e.push(e0);
        for k in 1..=s {
            let dk = level_dims(dims, k);
            let slot = l.down[k].expect("down slot");
            let mut dd = vec![T::zero(); cfg.width(k) * n_vox(dk)];
            ops::conv_down(&e[k - 1], cfg.width(k - 1), level_dims(dims, k - 1), w(slot), b(slot), cfg.width(k), &mut dd);
            ops::relu_inplace(&mut dd);
            let mut ek = vec![T::zero(); cfg.width(k) * n_vox(dk)];
            ops::conv3(&dd, cfg.width(k), dk, w(l.enc[k]), b(l.enc[k]), cfg.width(k), &mut ek);
            ops::relu_inplace(&mut ek);
            d.push(dd);
            e.push(ek);
        }

        let mut o: Vec<Vec<T>> = vec![Vec::new(); s + 1];
        let mut bottleneck_mask = None;
        o[s] = e[s].clone();
        if dropout {
            let m = dropout_mask::<T>(o[s].len(), cfg.dropout_rate, &mut rng);
            ops::mul_inplace(&mut o[s], &m);
            bottleneck_mask = Some(m);
        }

        let mut sv: Vec<Vec<T>> = vec![Vec::new(); s];
        let mut g: Vec<Vec<T>> = vec![Vec::new(); s];
        let mut decoder_mask = None;
        for k in (0..s).rev() {
            let dk = level_dims(dims, k);
            let coarse = level_dims(dims, k + 1);
            let mut u = vec![T::zero(); cfg.width(k) * n_vox(coarse)];
            ops::conv1(&o[k + 1], cfg.width(k + 1), n_vox(coarse), w(l.up[k]), b(l.up[k]), cfg.width(k), &mut u);
            let mut sk = vec![T::zero(); cfg.width(k) * n_vox(dk)];
            ops::upsample2(&u, cfg.width(k), coarse, &mut sk);
            sk.iter_mut().zip(&e[k]).for_each(|(a, &b)| *a += b);
            let mut gk = vec![T::zero(); cfg.width(k) * n_vox(dk)];
            ops::conv3(&sk, cfg.width(k), dk, w(l.dec[k]), b(l.dec[k]), cfg.width(k), &mut gk);
            ops::relu_inplace(&mut gk);
            let mut ok = gk.clone();
            if dropout && k == s - 1 {
                let m = dropout_mask::<T>(ok.len(), cfg.dropout_rate, &mut rng);
                ops::mul_inplace(&mut ok, &m);
                decoder_mask = Some(m);
            }
            sv[k] = sk;
            g[k] = gk;
            o[k] = ok;
        }

        let mut logits = vec![T::zero(); cfg.num_classes * n_vox(dims)];
        ops::conv1(&o[0], cfg.width(0), n_vox(dims), w(l.head), b(l.head), cfg.num_classes, &mut logits);
        let tape = SampleTape {
            x0,
            e,
            d,
            s: sv,
            g,
            o,
            bottleneck_mask,
            decoder_mask,
        };
        (logits, tape)
    }

    fn sample_backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        t: &SampleTape<T>,
        dims: [usize; 3],
        dlogits: &[T],
    ) -> ParamSet<T> {
        let cfg = &self.cfg;
        let l = &self.layout;
        let s = cfg.num_stages;
        let w = |slot: Slot| p.by_index(slot.w).data.as_slice();
        let mut grads = p.zeros_like();

        let n0 = n_vox(dims);
        let mut d_o = vec![T::zero(); cfg.width(0) * n0];
        {
            let (dw, db) = pair_mut(&mut grads, l.head);
            ops::conv1_backward(&t.o[0], cfg.width(0), n0, w(l.head), cfg.num_classes, dlogits, dw, db, Some(&mut d_o));
        }

        let mut skip_grads: Vec<Vec<T>> = Vec::with_capacity(s);
        for k in 0..s {
            let dk = level_dims(dims, k);
            let coarse = level_dims(dims, k + 1);
            let mut dg = d_o;
            if k == s - 1 {
                if let Some(m) = &t.decoder_mask {
                    ops::mul_inplace(&mut dg, m);
                }
            }
            ops::relu_backward_inplace(&t.g[k], &mut dg);
            let mut ds = vec![T::zero(); cfg.width(k) * n_vox(dk)];
            {
                let (dw, db) = pair_mut(&mut grads, l.dec[k]);
                ops::conv3_backward(&t.s[k], cfg.width(k), dk, w(l.dec[k]), cfg.width(k), &dg, dw, db, Some(&mut ds));
            }
            let mut du = vec![T::zero(); cfg.width(k) * n_vox(coarse)];
            ops::upsample2_backward(&ds, cfg.width(k), coarse, &mut du);
            skip_grads.push(ds);
            let mut d_up = vec![T::zero(); cfg.width(k + 1) * n_vox(coarse)];
            {
                let (dw, db) = pair_mut(&mut grads, l.up[k]);
                ops::conv1_backward(&t.o[k + 1], cfg.width(k + 1), n_vox(coarse), w(l.up[k]), cfg.width(k), &du, dw, db, Some(&mut d_up));
            }
            d_o = d_up;
        }

        let mut de = d_o;
        if let Some(m) = &t.bottleneck_mask {
            ops::mul_inplace(&mut de, m);
        }
        for k in (1..=s).rev() {
            let dk = level_dims(dims, k);
            let fine = level_dims(dims, k - 1);
            ops::relu_backward_inplace(&t.e[k], &mut de);
            let mut dd = vec![T::zero(); cfg.width(k) * n_vox(dk)];
            {
                let (dw, db) = pair_mut(&mut grads, l.enc[k]);
                ops::conv3_backward(&t.d[k], cfg.width(k), dk, w(l.enc[k]), cfg.width(k), &de, dw, db, Some(&mut dd));
            }
            ops::relu_backward_inplace(&t.d[k], &mut dd);
            let mut de_prev = std::mem::take(&mut skip_grads[k - 1]);
            let slot = l.down[k].expect("down slot");
            {
                let (dw, db) = pair_mut(&mut grads, slot);
                ops::conv_down_backward(&t.e[k - 1], cfg.width(k - 1), fine, w(slot), cfg.width(k), &dd, dw, db, &mut de_prev);
            }
            de = de_prev;
        }
        ops::relu_backward_inplace(&t.e[0], &mut de);
        let (dw, db) = pair_mut(&mut grads, l.enc[0]);
        ops::conv3_backward(&t.x0, cfg.in_channels, dims, w(l.enc[0]), cfg.width(0), &de, dw, db, None);
        grads
    }

    /// Logits `B x C x D x H x W` for an input `B x in_channels x D x H x W`.
    pub fn forward<T: Real>(&self, params: &ParamSet<T>, input: &Tensor<T>, mode: &ForwardMode) -> Result<Tensor<T>> {
        self.check_input(params, input)?;
        let dims = input.spatial();
        let outs = exec::map_indices(input.batch(), |i| self.sample_forward(params, input.sample(i), dims, mode, i).0);
        Tensor::from_samples(self.cfg.num_classes, dims, outs)
    }

    /// Forward pass that also records what the backward pass needs.
    pub fn forward_with_tape<T: Real>(
        &self,
        params: &ParamSet<T>,
        input: &Tensor<T>,
        mode: &ForwardMode,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(params, input)?;
        let dims = input.spatial();
        let outs = exec::map_indices(input.batch(), |i| self.sample_forward(params, input.sample(i), dims, mode, i));
        let (logits, samples): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
        Ok((Tensor::from_samples(self.cfg.num_classes, dims, logits)?, Tape { dims, samples }))
    }

    /// Parameter gradients given `dL/dlogits`, summed over the batch in sample order.
    pub fn backward_from_tape<T: Real>(&self, params: &ParamSet<T>, tape: &Tape<T>, dlogits: &Tensor<T>) -> Result<ParamSet<T>> {
        self.check_params(params)?;
        let expect = [tape.samples.len(), self.cfg.num_classes, tape.dims[0], tape.dims[1], tape.dims[2]];
        if dlogits.shape() != expect {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match logits {expect:?}",
                dlogits.shape()
            )));
        }
        let per_sample = exec::map_indices(tape.samples.len(), |i| {
            self.sample_backward(params, &tape.samples[i], tape.dims, dlogits.sample(i))
        });
        let mut total = params.zeros_like();
        for g in &per_sample {
            total.add_assign(g)?;
        }
        Ok(total)
    }

    /// Loss value and parameter gradient for `loss(logits) -> (value, dvalue/dlogits)`.
    pub fn backward<T, F>(&self, params: &ParamSet<T>, input: &Tensor<T>, mode: &ForwardMode, loss: F) -> Result<(T, ParamSet<T>)>
    where
        T: Real,
        F: FnOnce(&Tensor<T>) -> Result<(T, Tensor<T>)>,
    {
        let (logits, tape) = self.forward_with_tape(params, input, mode)?;
        let (value, dlogits) = loss(&logits)?;
        let grads = self.backward_from_tape(params, &tape, &dlogits)?;
        Ok((value, grads))
    }
}

/// Channel-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax input contains non-finite logits".into()));
    }
    let c = logits.channels();
    let n = logits.voxels();
    let mut out = logits.clone();
    for b in 0..logits.batch() {
        let src = logits.sample(b);
        let dst = out.sample_mut(b);
        for v in 0..n {
            let mut m = src[v];
            for k in 1..c {
                m = m.max(src[k * n + v]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (src[k * n + v] - m).exp();
                dst[k * n + v] = e;
                z += e;
            }
            for k in 0..c {
                dst[k * n + v] /= z;
            }
        }
    }
    Ok(out)
}

/// Maps `dL/dprobs` to `dL/dlogits` through the softmax Jacobian.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != dprobs.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", probs.shape(), dprobs.shape())));
    }
    let c = probs.channels();
    let n = probs.voxels();
    let mut out = Tensor::zeros(probs.shape());
    for b in 0..probs.batch() {
        let p = probs.sample(b);
        let g = dprobs.sample(b);
        let dst = out.sample_mut(b);
        for v in 0..n {
            let mut dot = T::zero();
            for k in 0..c {
                dot += p[k * n + v] * g[k * n + v];
            }
            for k in 0..c {
                dst[k * n + v] = p[k * n + v] * (g[k * n + v] - dot);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            base_width: 2,
            num_stages: 2,
            ..NetConfig::default()
        }
    }

    fn input<T: Real>(b: usize, dims: [usize; 3], seed: f64) -> Tensor<T> {
        let n = b * dims.iter().product::<usize>();
        let data = (0..n).map(|i| T::lit(((i as f64 + seed) * 0.618).sin())).collect();
        Tensor::new([b, 1, dims[0], dims[1], dims[2]], data).unwrap()
    }

    #[test]
    fn default_shape_contract() {
        let net = Backbone::new(NetConfig::default()).unwrap();
        let p = net.init_params::<f32>(1);
        let x = input::<f32>(2, [32, 32, 24], 0.0);
        let y = net.forward(&p, &x, &ForwardMode::eval()).unwrap();
        assert_eq!(y.shape(), [2, 2, 32, 32, 24]);
    }

    #[test]
    fn divisibility_error_names_axis() {
        let net = Backbone::new(NetConfig::default()).unwrap();
        let p = net.init_params::<f32>(1);
        let x = input::<f32>(1, [32, 20, 24], 0.0);
        match net.forward(&p, &x, &ForwardMode::eval()) {
            Err(Error::Divisibility { axis, .. }) => assert_eq!(axis, "height"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let net = Backbone::new(NetConfig::default()).unwrap();
        let a = net.init_params::<f32>(3);
        assert_eq!(a, net.init_params::<f32>(3));
        assert_ne!(a, net.init_params::<f32>(4));
        assert!(a.iter().all(|p| p.data.iter().all(|v| v.is_finite() && v.abs() <= 10.0)));
        assert!(a.iter().filter(|p| p.name.ends_with(".b")).all(|p| p.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn eval_is_deterministic_and_dropout_varies() {
        let net = Backbone::new(small()).unwrap();
        let p = net.init_params::<f64>(5);
        let x = input::<f64>(2, [8, 8, 8], 0.5);
        let a = net.forward(&p, &x, &ForwardMode::eval()).unwrap();
        let b = net.forward(&p, &x, &ForwardMode::eval()).unwrap();
        assert_eq!(a, b);
        let s1 = net.forward(&p, &x, &ForwardMode::stochastic(1, 0.0, 0.0)).unwrap();
        let s2 = net.forward(&p, &x, &ForwardMode::stochastic(2, 0.0, 0.0)).unwrap();
        assert_ne!(s1, s2);
        let s1b = net.forward(&p, &x, &ForwardMode::stochastic(1, 0.0, 0.0)).unwrap();
        assert_eq!(s1, s1b);
    }

    #[test]
    fn zero_rate_dropout_is_inert() {
        let cfg = NetConfig {
            dropout_rate: 0.0,
            ..small()
        };
        let net = Backbone::new(cfg).unwrap();
        let p = net.init_params::<f64>(6);
        let x = input::<f64>(1, [8, 8, 8], 0.0);
        let on = net.forward(&p, &x, &ForwardMode::stochastic(9, 0.0, 0.0)).unwrap();
        let off = net.forward(&p, &x, &ForwardMode::eval()).unwrap();
        assert_eq!(on, off);
    }

    #[test]
    fn softmax_values() {
        let t = Tensor::new([1, 2, 1, 1, 3], vec![0.0f64, 1000.0, 1.0, 0.0, 0.0, -1.0]).unwrap();
        let p = softmax(&t).unwrap();
        assert!((p.at(0, 0, 0) - 0.5).abs() < 1e-12);
        assert!((p.at(0, 0, 1) - 1.0).abs() < 1e-6);
        assert!(p.at(0, 1, 1).abs() < 1e-6);
        let e2 = (2.0f64).exp();
        assert!((p.at(0, 0, 2) - e2 / (1.0 + e2)).abs() < 1e-12);
        assert!((p.at(0, 0, 2) - 0.8808).abs() < 1e-4);
        let bad = Tensor::new([1, 2, 1, 1, 1], vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax(&bad).is_err());
    }

    #[test]
    fn head_bias_gradient_counts_voxels() {
        let net = Backbone::new(small()).unwrap();
        let p = net.init_params::<f64>(2);
        let x = input::<f64>(2, [8, 4, 4], 0.0);
        let (_, g) = net
            .backward(&p, &x, &ForwardMode::eval(), |logits| {
                let v = logits.data().iter().copied().sum::<f64>();
                Ok((v, Tensor::new(logits.shape(), vec![1.0; logits.data().len()])?))
            })
            .unwrap();
        let hb = g.get("head.b").unwrap();
        for &v in &hb.data {
            assert_eq!(v, (2 * 8 * 4 * 4) as f64);
        }
    }

    #[test]
    fn constant_objective_gives_zero_gradient() {
        let net = Backbone::new(small()).unwrap();
        let p = net.init_params::<f64>(2);
        let x = input::<f64>(1, [4, 4, 4], 0.0);
        let (_, g) = net
            .backward(&p, &x, &ForwardMode::stochastic(3, 0.1, 0.2), |logits| Ok((7.0, Tensor::zeros(logits.shape()))))
            .unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert_eq!(g.fingerprint(), p.fingerprint());
    }
}
