//! Training loop, checkpoint and resume behaviour on tiny fixtures.

use grdnet::anomaly_synth::{make_triplet, SynthParams};
use grdnet::corpus::texture;
use grdnet::losses::{LossCase, LossWeights};
use grdnet::networks::{forward_pipeline, NetworkBundle, NetworkConfig, NETWORK_NAMES};
use grdnet::tensor::Tensor;
use grdnet::trainer::{
    fit, load_checkpoint, read_header, read_history, save_checkpoint, sets_equal, train_step, Optimizers, TrainConfig, TrainData,
    TrainState, CKPT_BEST, CKPT_LAST, HISTORY_CSV,
};
use grdnet::{BinaryMask, Error, Image, RoiMask};

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        resolution: 16,
        base_width: 4,
        width_cap: 8,
        stages: 2,
        blocks_per_stage: 1,
        latent_channels: 4,
        dense_latent: 8,
        unet_base_width: 4,
        unet_levels: 2,
        ..NetworkConfig::default()
    }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        lr0: 1e-3,
        network: tiny_network(),
        synth: SynthParams { cell_exponents: (1, 2), ..SynthParams::default() },
        seed: 3,
        ..TrainConfig::default()
    }
}

fn images(n: usize, seed: u64) -> Vec<(Image<f64>, RoiMask)> {
    (0..n as u64).map(|i| (texture(16, seed + i), BinaryMask::ones(16, 16))).collect()
}

fn data() -> TrainData<f64> {
    TrainData { train: images(4, 10), val: images(2, 50) }
}

#[test]
fn single_triplet_overfits() {
    let cfg = tiny_cfg();
    let mut bundle = NetworkBundle::<f64>::new(&cfg.network, 1).unwrap();
    let mut opts = Optimizers::new(&bundle, cfg.beta1, cfg.beta2);
    let (x, roi) = &images(1, 0)[0];
    let params = SynthParams { p_clean: 0.0, ..cfg.synth.clone() };
    let triplet = [make_triplet(x, roi, &params, 5).unwrap()];
    let first = train_step(&mut bundle, &mut opts, &triplet, &cfg, cfg.lr0, 0).unwrap();
    let mut last = first.clone();
    for step in 1..200 {
        last = train_step(&mut bundle, &mut opts, &triplet, &cfg, cfg.lr0, step).unwrap();
    }
    assert!(first.total >= 10.0 * last.total, "step 1 total {} vs step 200 total {}", first.total, last.total);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ha = fit(&tiny_cfg(), &data(), a.path(), None, None).unwrap().history;
    let hb = fit(&tiny_cfg(), &data(), b.path(), None, None).unwrap().history;
    assert_eq!(ha, hb);
    assert_eq!(read_history(&a.path().join(HISTORY_CSV)).unwrap(), ha);
    let ca = load_checkpoint::<f64>(&a.path().join(CKPT_LAST), None).unwrap();
    let cb = load_checkpoint::<f64>(&b.path().join(CKPT_LAST), None).unwrap();
    for (x, y) in ca.bundle.param_sets().into_iter().zip(cb.bundle.param_sets()) {
        assert!(sets_equal(x, y));
    }
}

#[test]
fn zero_epochs_emit_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&TrainConfig { epochs: 0, ..tiny_cfg() }, &data(), dir.path(), None, None).unwrap();
    assert!(out.history.is_empty());
    assert!(dir.path().join(CKPT_BEST).is_file() && dir.path().join(CKPT_LAST).is_file());
    assert!(read_history(&dir.path().join(HISTORY_CSV)).unwrap().is_empty());
    assert_eq!(read_header(&out.last).unwrap().state.epoch, 0);
}

#[test]
fn resume_continues_the_same_run() {
    let straight = tempfile::tempdir().unwrap();
    let full = fit(&TrainConfig { epochs: 3, ..tiny_cfg() }, &data(), straight.path(), None, None).unwrap();

    let split = tempfile::tempdir().unwrap();
    fit(&TrainConfig { epochs: 1, ..tiny_cfg() }, &data(), split.path(), None, None).unwrap();
    let last = split.path().join(CKPT_LAST);
    let resumed = fit(&TrainConfig { epochs: 3, ..tiny_cfg() }, &data(), split.path(), Some(&last), None).unwrap();

    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    let a = load_checkpoint::<f64>(&full.last, None).unwrap();
    let b = load_checkpoint::<f64>(&resumed.last, None).unwrap();
    assert_eq!(a.header.state, b.header.state);
    for (x, y) in a.bundle.param_sets().into_iter().zip(b.bundle.param_sets()) {
        assert!(sets_equal(x, y));
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    for bottleneck in ["crae", "drae"] {
        let net = NetworkConfig { bottleneck: bottleneck.parse().unwrap(), ..tiny_network() };
        let mut bundle = NetworkBundle::<f32>::new(&net, 9).unwrap();
        let opts = Optimizers::new(&bundle, 0.5, 0.999);
        let cfg = TrainConfig { network: net.clone(), ..tiny_cfg() };
        let mut state = TrainState::new(&cfg);
        state.epoch = 4;
        state.step = 17;
        state.best_val = Some(0.25);
        state.plateau.update(0.3);
        save_checkpoint(&path, &bundle, Some(&opts), &state).unwrap();
        let mut ck = load_checkpoint::<f32>(&path, Some(&net)).unwrap();
        assert_eq!(ck.header.state, state);
        for (name, (a, b)) in NETWORK_NAMES.iter().zip(bundle.param_sets().into_iter().zip(ck.bundle.param_sets())) {
            assert!(sets_equal(a, b), "{name}");
        }
        let restored = ck.optimizers.as_ref().unwrap();
        for (a, b) in opts.all().iter().zip(restored.all()) {
            assert_eq!(a.steps(), b.steps());
        }
        let x = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i % 17) as f32) / 17.0);
        let before = forward_pipeline(&mut bundle, &x).unwrap();
        let after = forward_pipeline(&mut ck.bundle, &x).unwrap();
        assert_eq!(before.heat.data(), after.heat.data());
        assert_eq!(before.x_hat.data(), after.x_hat.data());
    }
}

#[test]
fn checkpoint_refuses_other_architecture_and_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    let bundle = NetworkBundle::<f64>::new(&tiny_network(), 1).unwrap();
    save_checkpoint(&path, &bundle, None, &TrainState::new(&tiny_cfg())).unwrap();
    let altered = NetworkConfig { base_width: 8, ..tiny_network() };
    match load_checkpoint::<f64>(&path, Some(&altered)) {
        Err(Error::Checkpoint { reason, .. }) => assert!(reason.contains("config hash mismatch"), "{reason}"),
        other => panic!("expected a hash mismatch, got {:?}", other.map(|c| c.header)),
    }
    assert!(load_checkpoint::<f32>(&path, None).is_err());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(load_checkpoint::<f64>(&path, None).is_err());
}

#[test]
fn every_loss_case_trains_finitely() {
    for id in 1..=4 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 1, loss_case: LossCase::from_id(id).unwrap(), ..tiny_cfg() };
        let out = fit(&cfg, &data(), dir.path(), None, None).unwrap();
        assert!(out.history.iter().all(|r| r.train.is_finite() && r.val_con.is_finite()), "case {id}");
    }
}

#[test]
fn plain_cross_entropy_path_trains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 1, weights: LossWeights { gamma: 0.0, ..LossWeights::default() }, ..tiny_cfg() };
    assert!(fit(&cfg, &data(), dir.path(), None, None).unwrap().history[0].train.is_finite());
}
