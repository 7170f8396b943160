mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wearseg::numerics::{Mode, Tape, Tensor};
use wearseg::unet::{UNet, UNetConfig};

fn run(check: GradCheck, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SHAPES_PER_OP {
        let (shape, err) = check(&mut rng);
        assert!(err < GRAD_TOL, "{shape}: relative error {err:e}");
    }
}

#[test]
fn conv2d_gradients() {
    run(check_conv2d, 11);
}

#[test]
fn transposed_conv2d_gradients() {
    run(check_transposed_conv2d, 12);
}

#[test]
fn maxpool2d_gradients() {
    run(check_maxpool2d, 13);
}

#[test]
fn relu_gradients() {
    run(check_relu, 14);
}

#[test]
fn fused_softmax_cross_entropy_gradients() {
    run(check_softmax_cross_entropy, 15);
}

fn unet_loss(model: &UNet<f64>, images: &Tensor<f64>, target: &[u8], weights: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone(), false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward_tape(&mut tape, x, Mode::Eval, &mut rng, false).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, target, weights).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn whole_network_gradient_matches_finite_differences() {
    let mut cfg = UNetConfig::with_phi(1.0 / 16.0);
    cfg.depth = 1;
    cfg.base_dropout = vec![0.0, 0.0];
    let model = UNet::<f64>::build(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let images = Tensor::from_fn(vec![2, 1, 4, 4], |_| rng.random_range(0.0..1.0)).unwrap();
    let target: Vec<u8> = (0..32).map(|_| rng.random_range(0..6)).collect();
    let weights: Vec<f64> = target.iter().map(|&t| 1.0 + t as f64).collect();

    let mut tape = Tape::new();
    let x = tape.leaf(images.clone(), false);
    let out = model.forward_tape(&mut tape, x, Mode::Train, &mut rng, true).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &target, &weights).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor<f64>> = out.params.iter().map(|&v| tape.take_grad(v).unwrap()).collect();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (pi, g) in grads.iter().enumerate() {
        for _ in 0..3 {
            let j = rng.random_range(0..g.len());
            let mut probe = model.clone();
            let orig = probe.params()[pi].data()[j];
            probe.params_mut()[pi].data_mut()[j] = orig + FD_STEP;
            let up = unet_loss(&probe, &images, &target, &weights);
            probe.params_mut()[pi].data_mut()[j] = orig - FD_STEP;
            let down = unet_loss(&probe, &images, &target, &weights);
            analytic.push(g.data()[j]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let err = rel_err(&analytic, &numeric);
    assert!(err < GRAD_TOL, "relative error {err:e}");
}
