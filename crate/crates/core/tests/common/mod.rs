#![allow(dead_code)]

pub mod games;

use backdoor_prune::datafree::{bn_loss, bn_loss_grad, prior_terms, recovery_loss, RecoveryConfig};
use backdoor_prune::nn::model::{conv, dense};
use backdoor_prune::nn::{cross_entropy, BatchNorm, Conv2d, Layer, Mode, Model, NeuronId};
use backdoor_prune::reverse::trigger_objective;
use backdoor_prune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;

/// Elementwise relative error, floored so entries that are zero on both
/// sides do not divide by zero.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let hi = f(x);
            x[i] = orig - FD_STEP;
            let lo = f(x);
            x[i] = orig;
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn batchnorm(channels: usize, rng: &mut ChaCha8Rng) -> Layer<f64> {
    let mut bn = BatchNorm::<f64>::new(channels);
    bn.gamma = uniform(&[channels], 0.5, 1.5, rng);
    bn.beta = uniform(&[channels], -0.3, 0.3, rng);
    bn.running_mean = uniform(&[channels], -0.2, 0.2, rng);
    bn.running_var = uniform(&[channels], 0.5, 1.5, rng);
    Layer::BatchNorm(bn)
}

fn strided_conv(rng: &mut ChaCha8Rng) -> Layer<f64> {
    match conv::<f64>(2, 3, 2, rng) {
        Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
            stride: 2,
            padding: 0,
            ..c
        }),
        _ => unreachable!(),
    }
}

fn with_random_bias(mut layer: Layer<f64>, rng: &mut ChaCha8Rng) -> Layer<f64> {
    match &mut layer {
        Layer::Dense(d) => d.bias = uniform(d.bias.shape(), -0.2, 0.2, rng),
        Layer::Conv2d(c) => c.bias = uniform(c.bias.shape(), -0.2, 0.2, rng),
        _ => {}
    }
    layer
}

pub type LayerCase = (&'static str, Model<f64>, Tensor<f64>, Vec<usize>, Mode);

/// Tiny seeded models, one per layer kind, each with inputs and labels.
pub fn layer_cases() -> Vec<LayerCase> {
    let mut r = rng(7);
    let mut cases = Vec::new();

    let layers = vec![
        with_random_bias(dense(6, 5, &mut r), &mut r),
        Layer::Relu,
        with_random_bias(dense(5, 3, &mut r), &mut r),
    ];
    let m = Model::new(vec![6], layers, 3).unwrap();
    cases.push(("dense+relu", m, uniform(&[4, 6], -1.0, 1.0, &mut r), vec![0, 1, 2, 1], Mode::Train));

    let layers = vec![
        with_random_bias(conv(2, 3, 3, &mut r), &mut r),
        Layer::Relu,
        Layer::Flatten,
        dense(48, 3, &mut r),
    ];
    let m = Model::new(vec![2, 4, 4], layers, 3).unwrap();
    cases.push(("conv2d", m, uniform(&[3, 2, 4, 4], 0.0, 1.0, &mut r), vec![2, 0, 1], Mode::Train));

    let layers = vec![
        with_random_bias(strided_conv(&mut r), &mut r),
        Layer::Flatten,
        dense(12, 3, &mut r),
    ];
    let m = Model::new(vec![2, 4, 4], layers, 3).unwrap();
    cases.push(("conv2d-stride2", m, uniform(&[3, 2, 4, 4], 0.0, 1.0, &mut r), vec![1, 1, 0], Mode::Train));

    for (name, mode) in [("batchnorm-train", Mode::Train), ("batchnorm-eval", Mode::Eval)] {
        let layers = vec![
            conv(2, 3, 3, &mut r),
            batchnorm(3, &mut r),
            Layer::Relu,
            Layer::Flatten,
            dense(48, 3, &mut r),
        ];
        let m = Model::new(vec![2, 4, 4], layers, 3).unwrap();
        cases.push((name, m, uniform(&[4, 2, 4, 4], 0.0, 1.0, &mut r), vec![0, 1, 2, 0], mode));
    }

    let layers = vec![
        with_random_bias(conv(2, 2, 3, &mut r), &mut r),
        Layer::MaxPool { size: 2 },
        Layer::Flatten,
        dense(8, 3, &mut r),
    ];
    let m = Model::new(vec![2, 4, 4], layers, 3).unwrap();
    cases.push(("maxpool", m, uniform(&[3, 2, 4, 4], 0.0, 1.0, &mut r), vec![0, 2, 1], Mode::Train));

    let m = Model::reference([3, 8, 8], 4, 3).unwrap().cast::<f64>();
    let m = m
        .apply_prune_mask(&[NeuronId::new(0, 1), NeuronId::new(4, 5), NeuronId::new(9, 7)])
        .unwrap();
    cases.push(("reference-pruned", m, uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut r), vec![0, 1, 2, 3], Mode::Train));
    cases
}

/// Worst relative error over every parameter and every input element.
pub fn check_model(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], mode: Mode) -> (f64, f64) {
    let grads = model.backward(x, labels, mode).unwrap();
    let mut work = model.clone();
    let mut worst_param = 0.0f64;
    for (p, analytic) in grads.params.iter().enumerate() {
        let mut values = work.parameters()[p].data().to_vec();
        let numeric = numeric_grad(&mut values, |v| {
            work.parameters_mut()[p].data_mut().copy_from_slice(v);
            work.loss(x, labels, mode).unwrap()
        });
        work.parameters_mut()[p].data_mut().copy_from_slice(&values);
        worst_param = worst_param.max(max_rel_err(analytic.data(), &numeric));
    }
    let mut input = x.data().to_vec();
    let numeric = numeric_grad(&mut input, |v| {
        let xi = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        model.loss(&xi, labels, mode).unwrap()
    });
    (worst_param, max_rel_err(grads.input.data(), &numeric))
}

fn bn_net(seed: u64) -> Model<f64> {
    let mut r = rng(seed);
    let layers = vec![
        conv(2, 3, 3, &mut r),
        batchnorm(3, &mut r),
        Layer::Relu,
        conv(3, 2, 3, &mut r),
        batchnorm(2, &mut r),
        Layer::Relu,
        Layer::Flatten,
        dense(32, 3, &mut r),
    ];
    Model::new(vec![2, 4, 4], layers, 3).unwrap()
}

fn tensor_fn(shape: &[usize], f: impl Fn(&Tensor<f64>) -> f64) -> impl Fn(&[f64]) -> f64 {
    let shape = shape.to_vec();
    move |v: &[f64]| f(&Tensor::new(shape.clone(), v.to_vec()).unwrap())
}

/// Worst relative error of every loss the crate differentiates.
pub fn loss_cases() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let mut out = Vec::new();

    let logits = uniform(&[3, 5], -2.0, 2.0, &mut r);
    let labels = [4, 0, 2];
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    let numeric = numeric_grad(
        &mut logits.data().to_vec(),
        tensor_fn(logits.shape(), |t| cross_entropy(t, &labels).unwrap().0),
    );
    out.push(("cross-entropy", max_rel_err(g.data(), &numeric)));

    let model = bn_net(12);
    let images = uniform(&[3, 2, 4, 4], 0.0, 1.0, &mut r);
    let raw_mask: Vec<f64> = uniform(&[16], -2.0, 1.0, &mut r).into_data();
    let raw_pattern: Vec<f64> = uniform(&[32], -1.0, 1.0, &mut r).into_data();
    let lambda = 0.05;
    let (_, gm, gp) = trigger_objective(&model, &images, 1, lambda, &raw_mask, &raw_pattern).unwrap();
    let nm = numeric_grad(&mut raw_mask.clone(), |m| {
        trigger_objective(&model, &images, 1, lambda, m, &raw_pattern).unwrap().0
    });
    let np = numeric_grad(&mut raw_pattern.clone(), |p| {
        trigger_objective(&model, &images, 1, lambda, &raw_mask, p).unwrap().0
    });
    out.push(("trigger mask (CE + L1)", max_rel_err(&gm, &nm)));
    out.push(("trigger pattern", max_rel_err(&gp, &np)));

    let x = uniform(&[3, 2, 4, 4], 0.0, 1.0, &mut r);
    let (_, g) = bn_loss_grad(&model, &x).unwrap();
    let numeric = numeric_grad(&mut x.data().to_vec(), tensor_fn(x.shape(), |t| bn_loss(&model, t).unwrap()));
    out.push(("batch-norm statistics", max_rel_err(g.data(), &numeric)));

    let (_, _, g) = prior_terms(&x, 1.0, 0.0).unwrap();
    let numeric = numeric_grad(&mut x.data().to_vec(), tensor_fn(x.shape(), |t| prior_terms(t, 1.0, 0.0).unwrap().0));
    out.push(("total variation", max_rel_err(g.data(), &numeric)));

    let (_, _, g) = prior_terms(&x, 0.0, 1.0).unwrap();
    let numeric = numeric_grad(&mut x.data().to_vec(), tensor_fn(x.shape(), |t| prior_terms(t, 0.0, 1.0).unwrap().1));
    out.push(("squared norm", max_rel_err(g.data(), &numeric)));

    let cfg = RecoveryConfig {
        alpha: 1.0,
        beta: 10.0,
        gamma: 1.0,
        alpha1: 0.1,
        alpha2: 0.01,
        ..RecoveryConfig::default()
    };
    let labels = [0, 1, 2];
    let (_, g) = recovery_loss(&model, &x, &labels, &cfg).unwrap();
    let numeric = numeric_grad(
        &mut x.data().to_vec(),
        tensor_fn(x.shape(), |t| recovery_loss(&model, t, &labels, &cfg).unwrap().0.total),
    );
    out.push(("recovery total", max_rel_err(g.data(), &numeric)));
    out
}

/// A pipeline config small enough to run every stage in a few seconds.
pub fn small_config(out: &std::path::Path, budget: backdoor_prune::pipeline::Budget) -> backdoor_prune::pipeline::PipelineConfig {
    use backdoor_prune::pipeline::{DataSource, PipelineConfig};
    let mut cfg = PipelineConfig {
        output_dir: out.to_path_buf(),
        budget,
        data: DataSource::Synthetic {
            classes: 4,
            size: 8,
            train_per_class: 40,
            test_per_class: 10,
            train_seed: 1,
            test_seed: 2,
            defender_seed: 3,
        },
        ..PipelineConfig::default()
    };
    cfg.attack.injection_ratio = 0.05;
    cfg.attack.train.epochs = 3;
    cfg.reverse.iterations = 20;
    cfg.shapley.iterations = 6;
    cfg.fine_tune.epochs = 2;
    cfg.datafree_fine_tune.epochs = 2;
    cfg.recovery.iterations = 10;
    cfg.recovery.per_class = 2;
    cfg
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// `report.json` with its timing fields removed.
pub fn canonical_report(bytes: &[u8]) -> String {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v.as_object_mut().unwrap().remove("timings");
    v.to_string()
}
