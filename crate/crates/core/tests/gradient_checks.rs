//! Backprop against central differences through tiny networks.

mod support;

use grdnet::losses::LossCase;
use support::*;

#[test]
fn contextual_loss_gradients() {
    let r = contextual_check();
    assert!(r.max_rel_err < GRAD_TOL, "{r:?}");
}

#[test]
fn encoder_loss_gradients() {
    let r = encoder_check();
    assert!(r.max_rel_err < GRAD_TOL, "{r:?}");
}

#[test]
fn focal_loss_gradients() {
    for gamma in [0.0, 2.0] {
        let r = focal_check(gamma);
        assert!(r.max_rel_err < GRAD_TOL, "gamma {gamma}: {r:?}");
    }
}

#[test]
fn overlap_loss_gradients() {
    let r = overlap_check();
    assert!(r.max_rel_err < GRAD_TOL, "{r:?}");
}

#[test]
fn discriminative_loss_gradients_all_cases() {
    for id in 1..=4 {
        let r = discriminative_check(LossCase::from_id(id).unwrap());
        assert!(r.max_rel_err < GRAD_TOL, "case {id}: {r:?}");
    }
}
