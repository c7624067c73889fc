//! Hot kernels under the rayon pool and the sequential fallback.
//!
//! With the default `parallel` feature each benchmark runs twice: on the global
//! rayon pool and inside a one-thread pool. `cargo bench --no-default-features`
//! builds the plain-iterator fallback and reports it as `sequential`.

use std::time::Duration;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use uamt::data::{generate_phantom, DatasetSplit, PhantomConfig, SplitSizes};
use uamt::inference::sliding_window_predict;
use uamt::losses::LossWeights;
use uamt::metrics::evaluate_case;
use uamt::nn::ops::conv3;
use uamt::nn::{Backbone, ForwardMode, NetConfig, Tensor};
use uamt::rng::chacha;
use uamt::train::{Method, TrainConfig, TrainSession, Trainer};
use uamt::uncertainty::mc_forward;

use rand::Rng;

/// An execution back-end available in this build.
enum Backend {
    #[cfg(feature = "parallel")]
    GlobalPool,
    #[cfg(feature = "parallel")]
    SingleThread(rayon::ThreadPool),
    #[cfg(not(feature = "parallel"))]
    Sequential,
}

impl Backend {
    fn all() -> Vec<Backend> {
        #[cfg(feature = "parallel")]
        {
            let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
            vec![Backend::GlobalPool, Backend::SingleThread(single)]
        }
        #[cfg(not(feature = "parallel"))]
        {
            vec![Backend::Sequential]
        }
    }

    fn name(&self) -> &'static str {
        match self {
            #[cfg(feature = "parallel")]
            Backend::GlobalPool => "global_pool",
            #[cfg(feature = "parallel")]
            Backend::SingleThread(_) => "single_thread",
            #[cfg(not(feature = "parallel"))]
            Backend::Sequential => "sequential",
        }
    }

    fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match self {
            #[cfg(feature = "parallel")]
            Backend::SingleThread(pool) => pool.install(f),
            _ => f(),
        }
    }
}

fn random_input(shape: [usize; 5], seed: u64) -> Tensor<f32> {
    let mut rng = chacha(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("shape")
}

fn conv(c: &mut Criterion) {
    let dims = [32, 32, 24];
    let (cin, cout) = (8, 8);
    let n: usize = dims.iter().product();
    let mut rng = chacha(1);
    let x: Vec<f32> = (0..cin * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f32> = (0..cout * cin * 27).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let b = vec![0.0f32; cout];
    let mut out = vec![0.0f32; cout * n];
    c.bench_function("conv3x3x3_8to8_32x32x24", |bench| {
        bench.iter(|| conv3(black_box(&x), cin, dims, &w, &b, cout, &mut out))
    });
}

fn network(c: &mut Criterion) {
    let net = Backbone::new(NetConfig::default()).expect("net");
    let params = net.init_params::<f32>(5);
    let x = random_input([4, 1, 32, 32, 24], 2);
    let mode = ForwardMode::stochastic(3, 0.1, 0.2);
    let mut group = c.benchmark_group("network");
    for backend in Backend::all() {
        let name = backend.name();
        group.bench_function(BenchmarkId::new("forward_backward_batch4", name), |bench| {
            bench.iter(|| {
                backend.run(|| {
                    let (logits, tape) = net.forward_with_tape(&params, &x, &mode).expect("forward");
                    black_box(net.backward_from_tape(&params, &tape, &logits).expect("backward"))
                })
            })
        });
        group.bench_function(BenchmarkId::new("mc_dropout_8_passes_batch4", name), |bench| {
            bench.iter(|| backend.run(|| black_box(mc_forward(&net, &params, &x, 8, 0.1, 0.2, 4).expect("mc"))))
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let phantom = PhantomConfig::default();
    let split = DatasetSplit::generate(
        &phantom,
        SplitSizes {
            labeled: 2,
            unlabeled: 2,
            test: 0,
        },
    )
    .expect("split");
    let trainer = Trainer::new(
        TrainConfig {
            method: Method::UaMt,
            ..TrainConfig::default()
        },
        NetConfig::default(),
        LossWeights::default(),
    )
    .expect("trainer");
    let mut group = c.benchmark_group("training");
    for backend in Backend::all() {
        let name = backend.name();
        let mut session = TrainSession::new(trainer.clone(), &split).expect("session");
        group.bench_function(BenchmarkId::new("ua_mt_step", name), |bench| {
            bench.iter(|| backend.run(|| black_box(session.step(&split).expect("step"))))
        });
    }
    group.finish();
}

fn inference_and_metrics(c: &mut Criterion) {
    let case = generate_phantom(&PhantomConfig::default(), 0).expect("phantom");
    let net = Backbone::new(NetConfig::default()).expect("net");
    let params = net.init_params::<f32>(5);
    let mut group = c.benchmark_group("evaluation");
    for backend in Backend::all() {
        let name = backend.name();
        group.bench_function(BenchmarkId::new("sliding_window_64cubed", name), |bench| {
            bench.iter(|| {
                backend.run(|| {
                    black_box(sliding_window_predict(&net, &params, &case.image, [32, 32, 24], [16, 16, 12]).expect("predict"))
                })
            })
        });
        group.bench_function(BenchmarkId::new("case_metrics_64cubed", name), |bench| {
            bench.iter(|| backend.run(|| black_box(evaluate_case("bench", &case.label, &case.label).expect("metrics"))))
        });
    }
    group.finish();
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5)).warm_up_time(Duration::from_secs(1));
    targets = conv, network, training, inference_and_metrics
}
criterion_main!(kernels);
