//! Micro-network fixtures shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use grdnet::losses::{contextual_var, discriminative_var, encoder_var, focal_var, overlap_var, LossCase};
use grdnet::tensor::gradcheck::{check_params, GradCheck};
use grdnet::tensor::{Conv2d, Graph, Linear, Mode, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;

fn mode(track: bool) -> Mode {
    if track {
        Mode::TRAIN
    } else {
        Mode::EVAL
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random())
}

pub fn mask(shape: &[usize], p: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

fn spread(set: &mut ParamSet<f64>, range: f64, rng: &mut ChaCha8Rng) {
    for e in set.entries_mut() {
        e.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-range..range));
    }
}

/// One 3x3 conv with weights large enough that outputs are not all near 0.5.
fn head(out_ch: usize, seed: u64) -> (ParamSet<f64>, Conv2d) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    let conv = Conv2d::same3(&mut set, "head", 1, out_ch, 1, &mut rng);
    spread(&mut set, 0.8, &mut rng);
    (set, conv)
}

fn prob<'g>(conv: &Conv2d, g: &'g Graph<f64>, set: &ParamSet<f64>, x: &Tensor<f64>, track: bool) -> Var<'g, f64> {
    conv.forward(g, set, g.constant(x.clone()), mode(track)).channel_softmax().select_channel(1)
}

pub fn contextual_check() -> GradCheck {
    let (mut set, conv) = head(1, 1);
    let x = random(&[2, 1, 12, 12], 2);
    let target = random(&[2, 1, 12, 12], 3);
    check_params(&mut set, FD_STEP, |g, set, track| {
        let x_hat = conv.forward(g, set, g.constant(x.clone()), mode(track)).sigmoid();
        contextual_var(g.constant(target.clone()), x_hat, 1.0, 1.0).unwrap()
    })
}

pub fn encoder_check() -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut set = ParamSet::new();
    let enc = Linear::new(&mut set, "enc", 16, 4, &mut rng);
    let enc2 = Linear::new(&mut set, "enc2", 4, 4, &mut rng);
    spread(&mut set, 0.5, &mut rng);
    let x = random(&[3, 16], 5);
    check_params(&mut set, FD_STEP, |g, set, track| {
        let z = enc.forward(g, set, g.constant(x.clone()), mode(track));
        let z_hat = enc2.forward(g, set, z.leaky_relu(0.2), mode(track));
        encoder_var(z, z_hat).unwrap()
    })
}

pub fn focal_check(gamma: f64) -> GradCheck {
    let (mut set, conv) = head(2, 6);
    let x = random(&[2, 1, 8, 8], 7);
    let m = mask(&[2, 1, 8, 8], 0.3, 8);
    check_params(&mut set, FD_STEP, |g, set, track| focal_var(prob(&conv, g, set, &x, track), &m, gamma).unwrap())
}

pub fn overlap_check() -> GradCheck {
    let (mut set, conv) = head(2, 9);
    let x = random(&[2, 1, 8, 8], 10);
    let region = mask(&[2, 1, 8, 8], 0.5, 11);
    check_params(&mut set, FD_STEP, |g, set, track| overlap_var(prob(&conv, g, set, &x, track), &region, 0.5).unwrap())
}

pub fn discriminative_check(case: LossCase) -> GradCheck {
    let (mut set, conv) = head(2, 12);
    let x = random(&[1, 1, 8, 8], 13);
    let roi = mask(&[1, 1, 8, 8], 0.6, 14);
    let m = mask(&[1, 1, 8, 8], 0.2, 15);
    check_params(&mut set, FD_STEP, |g, set, track| discriminative_var(case, prob(&conv, g, set, &x, track), &roi, &m, 0.5, 2.0).unwrap())
}
