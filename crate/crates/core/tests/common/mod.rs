//! Finite-difference gradient checking shared by the test targets.
#![allow(dead_code)]

use adi_core::model::{EcapaConfig, Model, ModelConfig, ResNetConfig};
use adi_core::nn::*;
use adi_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest relative error seen for one operation across all its shapes.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: &'static str,
    pub tolerance: f64,
    pub shapes: usize,
    pub checked: usize,
    /// Coordinates skipped because the two step sizes disagree (a kink nearby).
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tolerance && self.skipped * 20 <= self.checked
    }
}

/// Treats the AAM head with fixed labels as a layer.
pub struct AamWithLabels {
    pub head: AamHead,
    pub labels: Vec<usize>,
}

impl Layer for AamWithLabels {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(x, Some(&self.labels))
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.head.infer(x)
    }
    fn backward(&mut self, g: &Tensor) -> Tensor {
        self.head.backward(g)
    }
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.head.visit_params(f)
    }
}

/// Mean softmax cross-entropy as a layer with a one-element output.
pub struct SoftmaxCe {
    pub labels: Vec<usize>,
    grad: Option<Tensor>,
}

impl SoftmaxCe {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels, grad: None }
    }
}

impl Layer for SoftmaxCe {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (loss, grad) = softmax_cross_entropy(x, &self.labels)?;
        self.grad = Some(grad);
        Tensor::from_vec(&[1], vec![loss])
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Tensor::from_vec(&[1], vec![softmax_cross_entropy(x, &self.labels)?.0])
    }
    fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut out = self.grad.clone().unwrap();
        out.data_mut().iter_mut().for_each(|v| *v *= g.data()[0]);
        out
    }
}

/// A whole model (trunk and margin head) in training mode.
pub struct ModelWithLabels {
    pub model: Model,
    pub labels: Vec<usize>,
}

impl Layer for ModelWithLabels {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.model.forward_train(x, &self.labels)
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.model.embed_batch(x)
    }
    fn backward(&mut self, g: &Tensor) -> Tensor {
        self.model.backward(g)
    }
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.model.visit_params(f)
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Moves every parameter away from its initialization so that zero-initialized
/// attention outputs and unit batch-norm scales are exercised too.
pub fn jitter_params(layer: &mut dyn Layer, rng: &mut ChaCha8Rng, amount: f64) {
    layer.visit_params(&mut |_, p| p.value.data_mut().iter_mut().for_each(|v| *v += amount * rng.gen_range(-1.0..1.0)));
}

fn weighted_loss(layer: &mut dyn Layer, x: &Tensor, r: &Tensor) -> f64 {
    let y = layer.forward(x).expect("forward");
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn param_count(layer: &mut dyn Layer) -> usize {
    let mut n = 0;
    layer.visit_params(&mut |_, _| n += 1);
    n
}

fn with_param<T>(layer: &mut dyn Layer, index: usize, f: impl FnOnce(&mut Parameter) -> T) -> T {
    let (mut i, mut f, mut out) = (0, Some(f), None);
    layer.visit_params(&mut |_, p| {
        if i == index {
            out = Some((f.take().unwrap())(p));
        }
        i += 1;
    });
    out.unwrap()
}

fn sample_indices(n: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        (0..limit).map(|_| rng.gen_range(0..n)).collect()
    }
}

struct Tally {
    checked: usize,
    skipped: usize,
    max_rel: f64,
    worst: String,
}

impl Tally {
    /// Compares one analytic derivative against central differences at steps
    /// `h` and `h/2`; disagreement between the two marks a kink and is skipped.
    fn compare(&mut self, analytic: f64, mut eval: impl FnMut(f64) -> f64, h: f64, what: impl Fn() -> String) {
        let d1 = (eval(h) - eval(-h)) / (2.0 * h);
        let d2 = (eval(h / 2.0) - eval(-h / 2.0)) / h;
        self.checked += 1;
        let scale = d1.abs().max(d2.abs()).max(1.0);
        if (d1 - d2).abs() > 1e-6 * scale {
            self.skipped += 1;
            return;
        }
        let numeric = d2 + (d2 - d1) / 3.0;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{} analytic {analytic:e} numeric {numeric:e}", what());
        }
    }
}

/// Checks input and parameter gradients of `layer` at `x` for the loss
/// `sum(r * forward(x))` with random `r`.
fn check_layer(layer: &mut dyn Layer, x: &Tensor, rng: &mut ChaCha8Rng, tally: &mut Tally, h: f64, per_tensor: usize) {
    let y = layer.forward(x).expect("forward");
    let r = random_tensor(y.shape(), rng);
    layer.visit_params(&mut |_, p| p.zero_grad());
    layer.forward(x).unwrap();
    let dx = layer.backward(&r);
    assert_eq!(dx.shape(), x.shape(), "input gradient shape");

    for i in sample_indices(x.len(), per_tensor, rng) {
        let mut xp = x.clone();
        tally.compare(
            dx.data()[i],
            |d| {
                xp.data_mut()[i] = x.data()[i] + d;
                weighted_loss(layer, &xp, &r)
            },
            h,
            || format!("input[{i}]"),
        );
    }
    for pi in 0..param_count(layer) {
        let (grad, orig) = with_param(layer, pi, |p| (p.grad.data().to_vec(), p.value.data().to_vec()));
        for j in sample_indices(orig.len(), per_tensor, rng) {
            tally.compare(
                grad[j],
                |d| {
                    with_param(layer, pi, |p| p.value.data_mut()[j] = orig[j] + d);
                    let l = weighted_loss(layer, x, &r);
                    with_param(layer, pi, |p| p.value.data_mut()[j] = orig[j]);
                    l
                },
                h,
                || format!("param {pi}[{j}]"),
            );
        }
    }
}

type Case = (Box<dyn Layer>, Tensor);

fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let r = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    match op {
        "linear" => {
            let (b, i, o) = (r(rng, 1, 4), r(rng, 1, 6), r(rng, 1, 5));
            let mut l = Linear::new(i, o, rng);
            jitter_params(&mut l, rng, 0.3);
            (Box::new(l), random_tensor(&[b, i], rng))
        }
        "conv1d" => {
            let (b, ci, co) = (r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4));
            let (k, s, p, d) = ([1, 3, 5][r(rng, 0, 2)], r(rng, 1, 2), r(rng, 0, 2), r(rng, 1, 3));
            let t = (d * (k - 1) + 1).saturating_sub(2 * p).max(1) + r(rng, 0, 6);
            let mut l = Conv1d::new(ci, co, k, s, p, d, rng);
            jitter_params(&mut l, rng, 0.3);
            (Box::new(l), random_tensor(&[b, ci, t], rng))
        }
        "conv2d" => {
            let (b, ci, co) = (r(rng, 1, 2), r(rng, 1, 3), r(rng, 1, 3));
            let (k, s, p) = ([1, 3][r(rng, 0, 1)], r(rng, 1, 2), r(rng, 0, 1));
            let (h, w) = (r(rng, 3, 7), r(rng, 3, 7));
            let bias = rng.gen_bool(0.5);
            let mut l = Conv2d::new(ci, co, k, s, p, bias, rng);
            jitter_params(&mut l, rng, 0.3);
            (Box::new(l), random_tensor(&[b, ci, h, w], rng))
        }
        "batch_norm" => {
            let (b, c) = (r(rng, 2, 4), r(rng, 1, 4));
            let shape = match r(rng, 0, 2) {
                0 => vec![b, c],
                1 => vec![b, c, r(rng, 1, 6)],
                _ => vec![b, c, r(rng, 1, 4), r(rng, 1, 4)],
            };
            let mut l = BatchNorm::new(c);
            jitter_params(&mut l, rng, 0.5);
            (Box::new(l), random_tensor(&shape, rng))
        }
        "relu" | "tanh" | "sigmoid" => {
            let shape: Vec<usize> = (0..r(rng, 1, 3)).map(|_| r(rng, 1, 5)).collect();
            let mut x = random_tensor(&shape, rng);
            x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            let l: Box<dyn Layer> = match op {
                "relu" => Box::new(Relu::new()),
                "tanh" => Box::new(Tanh::new()),
                _ => Box::new(Sigmoid::new()),
            };
            (l, x)
        }
        "stats_pool" => {
            let shape = [r(rng, 1, 3), r(rng, 1, 4), r(rng, 2, 8)];
            (Box::new(StatsPool::new(rng.gen_bool(0.5))), random_tensor(&shape, rng))
        }
        "attentive_pool" => {
            let (c, a) = (r(rng, 1, 4), r(rng, 1, 4));
            let mut l = AttentiveStatsPool::new(c, a, rng.gen_bool(0.5), rng);
            jitter_params(&mut l, rng, 0.5);
            (Box::new(l), random_tensor(&[r(rng, 1, 3), c, r(rng, 2, 7)], rng))
        }
        "se_block" => {
            let c = r(rng, 2, 6);
            let mut l = SeBlock::new(c, r(rng, 1, 3), rng);
            jitter_params(&mut l, rng, 0.3);
            (Box::new(l), random_tensor(&[r(rng, 1, 3), c, r(rng, 1, 6)], rng))
        }
        "res2_block" => {
            let (scale, width) = (r(rng, 2, 4), r(rng, 1, 2));
            let mut l = Res2Block::new(scale * width, scale, 3, r(rng, 1, 2), rng).unwrap();
            jitter_params(&mut l, rng, 0.3);
            (Box::new(l), random_tensor(&[r(rng, 2, 3), scale * width, r(rng, 3, 7)], rng))
        }
        "aam" => {
            let (b, d, k) = (r(rng, 1, 4), r(rng, 2, 6), r(rng, 2, 5));
            let mut cfg = AamConfig::new(k, d);
            cfg.margin = rng.gen_range(0.0..0.5);
            let head = AamHead::new(cfg, rng).unwrap();
            let labels = (0..b).map(|_| rng.gen_range(0..k)).collect();
            (Box::new(AamWithLabels { head, labels }), random_tensor(&[b, d], rng))
        }
        "softmax_ce" => {
            let (b, k) = (r(rng, 1, 4), r(rng, 2, 6));
            let labels = (0..b).map(|_| rng.gen_range(0..k)).collect();
            let mut x = random_tensor(&[b, k], rng);
            x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
            (Box::new(SoftmaxCe::new(labels)), x)
        }
        "resnet" => {
            let cfg = ModelConfig::ResNet34(ResNetConfig {
                input_dim: r(rng, 12, 16),
                stage_channels: vec![1, 2, 2, 2],
                embed_dim: 3,
                n_classes: 3,
                pool_use_variance: rng.gen_bool(0.5),
                ..Default::default()
            });
            let d = match &cfg {
                ModelConfig::ResNet34(c) => c.input_dim,
                _ => unreachable!(),
            };
            let mut model = Model::build(cfg, rng.gen()).unwrap();
            let b = r(rng, 2, 3);
            let labels = (0..b).map(|_| rng.gen_range(0..3)).collect();
            let mut m = ModelWithLabels { model: model.clone(), labels };
            jitter_params(&mut m, rng, 0.1);
            model = m.model;
            let x = random_tensor(&[b, 1, d, r(rng, 12, 16)], rng);
            (Box::new(ModelWithLabels { model, labels: m.labels }), x)
        }
        "ecapa" => {
            let d = r(rng, 2, 5);
            let cfg = ModelConfig::Ecapa(EcapaConfig {
                input_dim: d,
                channels: 4,
                se_dim: 2,
                attn_dim: 2,
                res2_scale: 2,
                embed_dim: 3,
                n_classes: 3,
                pool_use_variance: rng.gen_bool(0.5),
                ..Default::default()
            });
            let model = Model::build(cfg, rng.gen()).unwrap();
            let b = r(rng, 2, 3);
            let labels = (0..b).map(|_| rng.gen_range(0..3)).collect();
            let mut m = ModelWithLabels { model, labels };
            jitter_params(&mut m, rng, 0.1);
            let x = random_tensor(&[b, d, r(rng, 3, 7)], rng);
            (Box::new(m), x)
        }
        other => panic!("unknown op {other}"),
    }
}

/// Operations with a hand-written backward pass.
pub const OPS: [&str; 13] = [
    "linear",
    "conv1d",
    "conv2d",
    "batch_norm",
    "relu",
    "tanh",
    "sigmoid",
    "stats_pool",
    "attentive_pool",
    "se_block",
    "res2_block",
    "aam",
    "softmax_ce",
];

pub fn tolerance(op: &str) -> f64 {
    match op {
        "linear" | "conv1d" | "conv2d" | "batch_norm" | "softmax_ce" => 1e-6,
        _ => 1e-5,
    }
}

/// Gradient check of one operation over `shapes` random configurations.
pub fn check_op(op: &'static str, shapes: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally { checked: 0, skipped: 0, max_rel: 0.0, worst: String::new() };
    let per_tensor = if matches!(op, "resnet" | "ecapa") { 4 } else { 24 };
    for shape in 0..shapes {
        let (mut layer, x) = op_case(op, &mut rng);
        let before = tally.max_rel;
        let h = if matches!(op, "resnet" | "ecapa") { 1e-5 } else { 1e-4 };
        check_layer(layer.as_mut(), &x, &mut rng, &mut tally, h, per_tensor);
        if tally.max_rel > before {
            tally.worst = format!("shape #{shape} {:?}: {}", x.shape(), tally.worst);
        }
    }
    GradReport {
        op,
        tolerance: tolerance(op),
        shapes,
        checked: tally.checked,
        skipped: tally.skipped,
        max_rel: tally.max_rel,
        worst: tally.worst,
    }
}
