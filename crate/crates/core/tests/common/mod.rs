//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wearseg::dataio::{LabelMask, NUM_CLASSES};
use wearseg::numerics::kernels::{self, ConvSpec};
use wearseg::numerics::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const SHAPES_PER_OP: usize = 6;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Worst relative error of the conv2d gradients w.r.t. input, weight and bias.
pub fn check_conv2d(rng: &mut ChaCha8Rng) -> (String, f64) {
    let n = rng.random_range(1..=2);
    let ci = rng.random_range(1..=3);
    let co = rng.random_range(1..=3);
    let h = rng.random_range(3..=6);
    let w = rng.random_range(3..=6);
    let spec = match rng.random_range(0..3) {
        0 => ConvSpec::same(ci, co, 1),
        1 => ConvSpec::same(ci, co, 3),
        _ => ConvSpec {
            padding: (0, 0),
            ..ConvSpec::same(ci, co, 3)
        },
    };
    let x = randn(rng, vec![n, ci, h, w]);
    let wt = randn(rng, spec.weight_shape().to_vec());
    let b = randn(rng, vec![co]);
    let y = kernels::conv2d(&x, &spec, &wt, &b).unwrap();
    let r = randn(rng, y.shape().to_vec());
    let (gx, gw, gb) = kernels::conv2d_backward(&x, &spec, &wt, &b, &r).unwrap();
    let e1 = rel_err(gx.data(), &numeric_grad(&x, |x| dot(&kernels::conv2d(x, &spec, &wt, &b).unwrap(), &r)));
    let e2 = rel_err(gw.data(), &numeric_grad(&wt, |wt| dot(&kernels::conv2d(&x, &spec, wt, &b).unwrap(), &r)));
    let e3 = rel_err(gb.data(), &numeric_grad(&b, |b| dot(&kernels::conv2d(&x, &spec, &wt, b).unwrap(), &r)));
    (format!("{:?} k={:?} p={:?}", x.shape(), spec.kernel, spec.padding), e1.max(e2).max(e3))
}

pub fn check_transposed_conv2d(rng: &mut ChaCha8Rng) -> (String, f64) {
    let n = rng.random_range(1..=2);
    let ci = rng.random_range(1..=3);
    let co = rng.random_range(1..=3);
    let h = rng.random_range(1..=4);
    let w = rng.random_range(1..=4);
    let x = randn(rng, vec![n, ci, h, w]);
    let wt = randn(rng, vec![ci, co, 2, 2]);
    let b = randn(rng, vec![co]);
    let y = kernels::transposed_conv2d(&x, &wt, &b).unwrap();
    let r = randn(rng, y.shape().to_vec());
    let (gx, gw, gb) = kernels::transposed_conv2d_backward(&x, &wt, &b, &r).unwrap();
    let f = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| dot(&kernels::transposed_conv2d(x, wt, b).unwrap(), &r);
    let e1 = rel_err(gx.data(), &numeric_grad(&x, |x| f(x, &wt, &b)));
    let e2 = rel_err(gw.data(), &numeric_grad(&wt, |wt| f(&x, wt, &b)));
    let e3 = rel_err(gb.data(), &numeric_grad(&b, |b| f(&x, &wt, b)));
    (format!("{:?} -> {co}", x.shape()), e1.max(e2).max(e3))
}

/// Inputs are a shuffled ramp so every pooling window has a clear winner.
pub fn check_maxpool2d(rng: &mut ChaCha8Rng) -> (String, f64) {
    let shape = vec![
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
    ];
    let len: usize = shape.iter().product();
    let mut ramp: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    ramp.shuffle(rng);
    let x = Tensor::new(shape.clone(), ramp).unwrap();
    let (y, arg) = kernels::maxpool2d(&x).unwrap();
    let r = randn(rng, y.shape().to_vec());
    let g = kernels::maxpool2d_backward(x.shape(), &arg, &r);
    let e = rel_err(g.data(), &numeric_grad(&x, |x| dot(&kernels::maxpool2d(x).unwrap().0, &r)));
    (format!("{shape:?}"), e)
}

/// Inputs stay at least 0.01 away from the kink.
pub fn check_relu(rng: &mut ChaCha8Rng) -> (String, f64) {
    let shape = vec![
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    ];
    let x = Tensor::from_fn(shape.clone(), |_| {
        let m = rng.random_range(0.01..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
    .unwrap();
    let r = randn(rng, shape.clone());
    let g = kernels::relu_backward(&x, &r);
    let e = rel_err(g.data(), &numeric_grad(&x, |x| dot(&kernels::relu(x), &r)));
    (format!("{shape:?}"), e)
}

pub fn check_softmax_cross_entropy(rng: &mut ChaCha8Rng) -> (String, f64) {
    let n = rng.random_range(1..=2);
    let k = rng.random_range(2..=6);
    let h = rng.random_range(1..=4);
    let w = rng.random_range(1..=4);
    let logits = Tensor::from_fn(vec![n, k, h, w], |_| rng.random_range(-3.0..3.0)).unwrap();
    let target: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..k) as u8).collect();
    let weights: Vec<f64> = (0..n * h * w).map(|_| rng.random_range(0.1..5.0)).collect();
    let (_, probs) = kernels::softmax_cross_entropy(&logits, &target, &weights).unwrap();
    let g = kernels::softmax_cross_entropy_backward(&probs, &target, &weights, 1.0);
    let e = rel_err(
        g.data(),
        &numeric_grad(&logits, |l| kernels::softmax_cross_entropy(l, &target, &weights).unwrap().0),
    );
    (format!("{:?}", logits.shape()), e)
}

pub type GradCheck = fn(&mut ChaCha8Rng) -> (String, f64);

pub const GRAD_CHECKS: [(&str, GradCheck); 5] = [
    ("conv2d", check_conv2d),
    ("transposed_conv2d", check_transposed_conv2d),
    ("maxpool2d", check_maxpool2d),
    ("relu", check_relu),
    ("softmax+cross-entropy", check_softmax_cross_entropy),
];

/// Runs every gradient check on `SHAPES_PER_OP` random shapes; returns the
/// op name, number of shapes and worst relative error.
pub fn gradcheck_suite(seed: u64) -> Vec<(&'static str, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GRAD_CHECKS
        .iter()
        .map(|(name, check)| {
            let worst = (0..SHAPES_PER_OP)
                .map(|_| check(&mut rng).1)
                .fold(0.0, f64::max);
            (*name, SHAPES_PER_OP, worst)
        })
        .collect()
}

/// Set-based IoU: `None` for an empty union.
pub fn brute_iou(pred: &LabelMask, truth: &LabelMask, k: u8) -> Option<f64> {
    let a: HashSet<usize> = pred.classes().iter().enumerate().filter(|(_, &c)| c == k).map(|(i, _)| i).collect();
    let b: HashSet<usize> = truth.classes().iter().enumerate().filter(|(_, &c)| c == k).map(|(i, _)| i).collect();
    let union = a.union(&b).count();
    (union > 0).then(|| a.intersection(&b).count() as f64 / union as f64)
}

/// Pair counts keyed by (truth, prediction).
pub fn brute_confusion(pred: &LabelMask, truth: &LabelMask) -> HashMap<(u8, u8), u64> {
    let mut m = HashMap::new();
    for (&p, &t) in pred.classes().iter().zip(truth.classes()) {
        *m.entry((t, p)).or_insert(0) += 1;
    }
    m
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LabelMask {
    // A few classes dominate so that intersections are non-trivial.
    let favoured = rng.random_range(0..NUM_CLASSES as u8);
    let classes = (0..w * h)
        .map(|_| if rng.random_bool(0.4) { favoured } else { rng.random_range(0..NUM_CLASSES as u8) })
        .collect();
    LabelMask::new(w, h, classes).unwrap()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Composite Simpson rule with `intervals` (even) sub-intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut s = f(a) + f(b);
    for i in 1..intervals {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}
