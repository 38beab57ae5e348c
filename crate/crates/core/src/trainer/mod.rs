//! Adversarial reconstruction and segmentation training loop.

mod checkpoint;
mod schedule;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use grdnet_tensor::{Adam, Graph, Mode, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, load_checkpoint, read_header, save_checkpoint, sets_equal, Checkpoint, Header, TensorRecord};
pub use schedule::Plateau;

use crate::anomaly_synth::{make_triplet, SynthParams, TrainingTriplet};
use crate::dataset_io::augment;
use crate::error::{Error, Result};
use crate::losses::{self, LossCase, LossReport, LossWeights};
use crate::networks::{NetworkBundle, NetworkConfig, Reconstruction};
use crate::raster::{BinaryMask, Image, RoiMask};

pub const CKPT_BEST: &str = "ckpt_best";
pub const CKPT_LAST: &str = "ckpt_last";
pub const HISTORY_CSV: &str = "history.csv";
pub const SNAPSHOT: &str = "config.snapshot";
const HISTORY_HEADER: &str = "epoch,lr,adv,con,enc,focal,total,disc,val_con";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub alpha: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub loss_case: LossCase,
    pub network: NetworkConfig,
    pub synth: SynthParams,
    /// Random rotation of training images before corruption.
    pub augment: bool,
    pub plateau_metric: PlateauMetric,
    /// Epochs after which an extra `ckpt_epoch_<n>` copy is kept.
    pub save_epochs: Vec<usize>,
}

/// Signal driving the learning-rate plateau schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauMetric {
    /// Contextual loss on the held-out validation images (train contextual loss when there are none).
    ValCon,
    TrainCon,
}

impl std::str::FromStr for PlateauMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "val_con" => Ok(PlateauMetric::ValCon),
            "train_con" => Ok(PlateauMetric::TrainCon),
            other => Err(format!("expected val_con or train_con, got `{other}`")),
        }
    }
}

impl std::fmt::Display for PlateauMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlateauMetric::ValCon => "val_con",
            PlateauMetric::TrainCon => "train_con",
        })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr0: 1e-4,
            alpha: 0.1,
            patience: 3,
            min_delta: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            weights: LossWeights::default(),
            loss_case: LossCase::RoiFocal,
            network: NetworkConfig::default(),
            synth: SynthParams::default(),
            augment: true,
            plateau_metric: PlateauMetric::ValCon,
            save_epochs: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::InvalidKey { key: key.into(), reason });
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", format!("must be positive, got {}", self.lr0));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be positive, got {}", self.alpha));
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad("min_delta", format!("must be non-negative, got {}", self.min_delta));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(key, format!("must lie in [0, 1), got {b}"));
            }
        }
        self.weights.validate()?;
        self.network.validate()?;
        self.synth.validate(self.network.resolution)
    }
}

/// Resumable loop state stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
    pub plateau: Plateau,
    pub best_val: Option<f64>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            plateau: Plateau::new(cfg.lr0, cfg.alpha, cfg.patience, cfg.min_delta),
            best_val: None,
            seed: cfg.seed,
        }
    }

    pub fn lr(&self) -> f64 {
        self.plateau.lr()
    }
}

/// One Adam instance per parameter set, sharing the learning rate.
#[derive(Clone, Debug)]
pub struct Optimizers<T> {
    pub generator: Adam<T>,
    pub encoder2: Adam<T>,
    pub discriminator: Adam<T>,
    pub segmenter: Adam<T>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn new(bundle: &NetworkBundle<T>, beta1: f64, beta2: f64) -> Self {
        Optimizers {
            generator: Adam::new(&bundle.generator.params, beta1, beta2),
            encoder2: Adam::new(&bundle.encoder2.params, beta1, beta2),
            discriminator: Adam::new(&bundle.discriminator.params, beta1, beta2),
            segmenter: Adam::new(&bundle.segmenter.params, beta1, beta2),
        }
    }

    pub fn all(&self) -> [&Adam<T>; 4] {
        [&self.generator, &self.encoder2, &self.discriminator, &self.segmenter]
    }

    pub fn all_mut(&mut self) -> [&mut Adam<T>; 4] {
        [&mut self.generator, &mut self.encoder2, &mut self.discriminator, &mut self.segmenter]
    }
}

/// Stacked tensors of a triplet batch.
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub x_n: Tensor<T>,
    pub m: Tensor<T>,
    pub roi: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn stack(triplets: &[TrainingTriplet<T>]) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let x: Vec<&Image<T>> = triplets.iter().map(|t| &t.x).collect();
        let x_n: Vec<&Image<T>> = triplets.iter().map(|t| &t.x_n).collect();
        let m: Vec<&BinaryMask> = triplets.iter().map(|t| &t.m).collect();
        let roi: Vec<&BinaryMask> = triplets.iter().map(|t| &t.roi).collect();
        Ok(Batch { x: Image::batch(&x)?, x_n: Image::batch(&x_n)?, m: BinaryMask::batch(&m)?, roi: BinaryMask::batch(&roi)? })
    }
}

fn check(v: f64, stage: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { stage: stage.into(), step: Some(step) })
    }
}

/// Discriminator update on real `x` against the (constant) reconstruction.
pub fn discriminator_step<T: Scalar>(
    bundle: &mut NetworkBundle<T>,
    opt: &mut Adam<T>,
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    lr: f64,
    step: u64,
) -> Result<f64> {
    let g = Graph::new();
    let real = bundle.discriminator.forward(&g, g.constant(x.clone()), Mode::TRAIN);
    let fake = bundle.discriminator.forward(&g, g.constant(x_hat.clone()), Mode::TRAIN);
    let loss = losses::discriminator_var(real.logits, fake.logits);
    let value = check(loss.item().to_f64_lossy(), "discriminator", step)?;
    let grads = loss.backward().for_params(&g, &bundle.discriminator.params);
    opt.step(&mut bundle.discriminator.params, &grads, lr);
    Ok(value)
}

/// Generator and second-encoder update; returns `(adv, con, enc)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<'g, T: Scalar>(
    bundle: &mut NetworkBundle<T>,
    opts: &mut Optimizers<T>,
    g: &'g Graph<T>,
    rec: &Reconstruction<'g, T>,
    x: &Tensor<T>,
    weights: &LossWeights,
    lr: f64,
    step: u64,
) -> Result<(f64, f64, f64)> {
    let xv = g.constant(x.clone());
    let real = bundle.discriminator.forward(g, xv, Mode::FROZEN);
    let fake = bundle.discriminator.forward(g, rec.x_hat, Mode::FROZEN);
    let adv = losses::feature_matching_var(real.features, fake.features)?;
    let con = losses::contextual_var(xv, rec.x_hat, weights.omega_a, weights.omega_b)?;
    let z_hat = bundle.encoder2.forward(g, rec.x_hat, Mode::TRAIN);
    let enc = losses::encoder_var(rec.z, z_hat)?;
    let total = losses::gan_var(adv, con, enc, weights);
    let parts = (adv.item().to_f64_lossy(), con.item().to_f64_lossy(), enc.item().to_f64_lossy());
    check(total.item().to_f64_lossy(), "generator", step)?;
    let grads = total.backward();
    let g_grads = grads.for_params(g, &bundle.generator.params);
    let e_grads = grads.for_params(g, &bundle.encoder2.params);
    opts.generator.step(&mut bundle.generator.params, &g_grads, lr);
    opts.encoder2.step(&mut bundle.encoder2.params, &e_grads, lr);
    Ok(parts)
}

/// Segmenter update on `concat(x_n, x_hat)` against the corruption mask.
#[allow(clippy::too_many_arguments)]
pub fn segmenter_step<T: Scalar>(
    bundle: &mut NetworkBundle<T>,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
    x_hat: &Tensor<T>,
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
) -> Result<f64> {
    let g = Graph::new();
    let heat = bundle.segmenter.heat(&g, g.constant(batch.x_n.clone()), g.constant(x_hat.clone()), Mode::TRAIN);
    let w = &cfg.weights;
    let loss = losses::discriminative_var(cfg.loss_case, heat, &batch.roi, &batch.m, w.overlap_w, w.gamma)?;
    let value = check(loss.item().to_f64_lossy(), "segmenter", step)?;
    let grads = loss.backward().for_params(&g, &bundle.segmenter.params);
    opt.step(&mut bundle.segmenter.params, &grads, lr);
    Ok(value)
}

/// One optimization step over a triplet batch: discriminator, then generator
/// with the second encoder, then segmenter.
pub fn train_step<T: Scalar>(
    bundle: &mut NetworkBundle<T>,
    opts: &mut Optimizers<T>,
    triplets: &[TrainingTriplet<T>],
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
) -> Result<LossReport> {
    let batch = Batch::stack(triplets)?;
    let g = Graph::new();
    let rec = bundle.generator.forward(&g, g.constant(batch.x_n.clone()), Mode::TRAIN);
    if !rec.x_hat.value().all_finite() {
        return Err(Error::NonFinite { stage: "generator".into(), step: Some(step) });
    }
    let x_hat = (*rec.x_hat.value()).clone();
    let disc = discriminator_step(bundle, &mut opts.discriminator, &batch.x, &x_hat, lr, step)?;
    let (adv, con, enc) = generator_step(bundle, opts, &g, &rec, &batch.x, &cfg.weights, lr, step)?;
    drop(g);
    let focal = segmenter_step(bundle, &mut opts.segmenter, &batch, &x_hat, cfg, lr, step)?;
    let report = LossReport::new(adv, con, enc, focal, disc, &cfg.weights);
    if !report.is_finite() {
        return Err(Error::NonFinite { stage: "loss report".into(), step: Some(step) });
    }
    Ok(report)
}

/// Clean images (with ROIs) the loop draws triplets from.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub train: Vec<(Image<T>, RoiMask)>,
    pub val: Vec<(Image<T>, RoiMask)>,
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossReport,
    pub val_con: f64,
}

impl EpochRecord {
    fn csv_row(&self) -> String {
        let t = &self.train;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.lr, t.adv, t.con, t.enc, t.focal, t.total, t.disc, self.val_con
        )
    }

    fn parse(line: &str) -> Option<EpochRecord> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return None;
        }
        let n = |i: usize| f[i].trim().parse::<f64>().ok();
        Some(EpochRecord {
            epoch: f[0].trim().parse().ok()?,
            lr: n(1)?,
            train: LossReport { adv: n(2)?, con: n(3)?, enc: n(4)?, focal: n(5)?, gan_total: n(6)? - n(5)?, total: n(6)?, disc: n(7)? },
            val_con: n(8)?,
        })
    }
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        out.push(EpochRecord::parse(line).ok_or_else(|| Error::Dataset(format!("{}: malformed history row {}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn write_history(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training triplets of one epoch in batch order.
pub fn epoch_triplets<T: Scalar>(cfg: &TrainConfig, data: &[(Image<T>, RoiMask)], epoch: usize) -> Result<Vec<TrainingTriplet<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64 + 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| {
            let (x, roi) = &data[i];
            let s: u64 = rng.random();
            let (x, roi) = if cfg.augment {
                let (h, w) = x.dims();
                let (x, roi, _) = augment(x, roi, &BinaryMask::zeros(h, w), s)?;
                (x, roi)
            } else {
                (x.clone(), roi.clone())
            };
            make_triplet(&x, &roi, &cfg.synth, mix(s, 0x7472_6970))
        })
        .collect()
}

/// Validation triplets: noise fixed for the whole run.
pub fn validation_triplets<T: Scalar>(cfg: &TrainConfig, data: &[(Image<T>, RoiMask)]) -> Result<Vec<TrainingTriplet<T>>> {
    data.iter()
        .enumerate()
        .map(|(i, (x, roi))| make_triplet(x, roi, &cfg.synth, mix(cfg.seed, u64::MAX - i as u64)))
        .collect()
}

/// Mean contextual loss of evaluation-mode reconstructions of the corrupted
/// validation images. Leaves every parameter untouched.
pub fn validation_loss<T: Scalar>(bundle: &mut NetworkBundle<T>, triplets: &[TrainingTriplet<T>], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in triplets.chunks(cfg.batch_size) {
        let batch = Batch::stack(chunk)?;
        let g = Graph::new();
        let x = g.constant(batch.x.clone());
        let rec = bundle.generator.forward(&g, g.constant(batch.x_n), Mode::EVAL);
        let con = losses::contextual_var(x, rec.x_hat, cfg.weights.omega_a, cfg.weights.omega_b)?;
        total += con.item().to_f64_lossy() * chunk.len() as f64;
    }
    Ok(total / triplets.len() as f64)
}

pub fn epoch_checkpoint(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt_epoch_{epoch}"))
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Runs (or resumes) training into `run_dir`, writing `history.csv`,
/// `ckpt_last`, `ckpt_best` and, if given, the config snapshot text.
pub fn fit<T: Scalar>(
    cfg: &TrainConfig,
    data: &TrainData<T>,
    run_dir: &Path,
    resume: Option<&Path>,
    snapshot: Option<&str>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    if let Some(text) = snapshot {
        let p = run_dir.join(SNAPSHOT);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    let best_path = run_dir.join(CKPT_BEST);
    let last_path = run_dir.join(CKPT_LAST);
    let history_path = run_dir.join(HISTORY_CSV);

    let (mut bundle, mut opts, mut state, mut history) = match resume {
        Some(path) => {
            let ck = load_checkpoint::<T>(path, Some(&cfg.network))?;
            let opts = ck.optimizers.unwrap_or_else(|| Optimizers::new(&ck.bundle, cfg.beta1, cfg.beta2));
            let mut history = if history_path.exists() { read_history(&history_path)? } else { Vec::new() };
            history.retain(|r| r.epoch <= ck.header.state.epoch);
            (ck.bundle, opts, ck.header.state, history)
        }
        None => {
            let bundle = NetworkBundle::<T>::new(&cfg.network, mix(cfg.seed, 0x6e6574))?;
            let opts = Optimizers::new(&bundle, cfg.beta1, cfg.beta2);
            (bundle, opts, TrainState::new(cfg), Vec::new())
        }
    };
    write_history(&history_path, &history)?;
    if state.epoch == 0 && resume.is_none() {
        save_checkpoint(&last_path, &bundle, Some(&opts), &state)?;
        save_checkpoint(&best_path, &bundle, Some(&opts), &state)?;
    }

    let val_triplets = validation_triplets(cfg, &data.val)?;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = state.lr();
        let triplets = epoch_triplets(cfg, &data.train, epoch)?;
        let mut sums = LossReport::default();
        let mut batches = 0usize;
        for chunk in triplets.chunks(cfg.batch_size) {
            let r = train_step(&mut bundle, &mut opts, chunk, cfg, lr, state.step)?;
            state.step += 1;
            batches += 1;
            sums.adv += r.adv;
            sums.con += r.con;
            sums.enc += r.enc;
            sums.focal += r.focal;
            sums.disc += r.disc;
        }
        let k = batches as f64;
        let train = LossReport::new(sums.adv / k, sums.con / k, sums.enc / k, sums.focal / k, sums.disc / k, &cfg.weights);
        let val_con = if val_triplets.is_empty() {
            train.con
        } else {
            validation_loss(&mut bundle, &val_triplets, cfg)?
        };
        if !val_con.is_finite() {
            return Err(Error::NonFinite { stage: "validation".into(), step: Some(state.step) });
        }
        state.plateau.update(match cfg.plateau_metric {
            PlateauMetric::ValCon => val_con,
            PlateauMetric::TrainCon => train.con,
        });
        state.epoch += 1;
        let record = EpochRecord { epoch: state.epoch, lr, train, val_con };
        log::info!(
            "epoch {} lr {:.3e} total {:.4} focal {:.4} con {:.4} val_con {:.4}",
            record.epoch,
            lr,
            record.train.total,
            record.train.focal,
            record.train.con,
            val_con
        );
        history.push(record);

        let improved = state.best_val.is_none_or(|b| val_con < b);
        if improved {
            state.best_val = Some(val_con);
        }
        save_checkpoint(&last_path, &bundle, Some(&opts), &state)?;
        if improved {
            save_checkpoint(&best_path, &bundle, Some(&opts), &state)?;
        }
        if cfg.save_epochs.contains(&state.epoch) {
            save_checkpoint(&epoch_checkpoint(run_dir, state.epoch), &bundle, Some(&opts), &state)?;
        }
        let mut f = fs::OpenOptions::new().append(true).open(&history_path).map_err(|e| Error::io(&history_path, e))?;
        writeln!(f, "{}", history.last().expect("just pushed").csv_row()).map_err(|e| Error::io(&history_path, e))?;
    }
    Ok(FitOutcome { best: best_path, last: last_path, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly_synth::SynthParams;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            lr0: 1e-3,
            network: NetworkConfig {
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
            },
            synth: SynthParams { cell_exponents: (1, 3), p_clean: 0.0, ..SynthParams::default() },
            weights: LossWeights { omega_b: 1.0, ..LossWeights::default() },
            ..TrainConfig::default()
        }
    }

    fn images(n: usize, seed: u64) -> Vec<(Image<f64>, RoiMask)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let phase: f64 = rng.random();
                let img = Image::from_fn(3, 16, 16, |c, y, x| 0.5 + 0.3 * ((x + y + c) as f64 * 0.7 + phase * 6.0).sin());
                (img, BinaryMask::ones(16, 16))
            })
            .collect()
    }

    #[test]
    fn phase_isolation() {
        let cfg = tiny_cfg();
        let mut bundle = NetworkBundle::<f64>::new(&cfg.network, 1).unwrap();
        let mut opts = Optimizers::new(&bundle, 0.5, 0.999);
        let triplets = epoch_triplets(&cfg, &images(2, 2), 0).unwrap();
        let batch = Batch::stack(&triplets).unwrap();
        let before = bundle.clone();
        let x_hat = Tensor::full(batch.x.shape(), 0.5);
        discriminator_step(&mut bundle, &mut opts.discriminator, &batch.x, &x_hat, 1e-3, 0).unwrap();
        assert!(sets_equal(&before.generator.params, &bundle.generator.params));
        assert!(sets_equal(&before.encoder2.params, &bundle.encoder2.params));
        assert!(sets_equal(&before.segmenter.params, &bundle.segmenter.params));
        assert!(!sets_equal(&before.discriminator.params, &bundle.discriminator.params));

        let before = bundle.clone();
        segmenter_step(&mut bundle, &mut opts.segmenter, &batch, &x_hat, &cfg, 1e-3, 0).unwrap();
        assert!(sets_equal(&before.generator.params, &bundle.generator.params));
        assert!(sets_equal(&before.discriminator.params, &bundle.discriminator.params));
        assert!(!sets_equal(&before.segmenter.params, &bundle.segmenter.params));

        let before = bundle.clone();
        let g = Graph::new();
        let rec = bundle.generator.forward(&g, g.constant(batch.x_n.clone()), Mode::TRAIN);
        generator_step(&mut bundle, &mut opts, &g, &rec, &batch.x, &cfg.weights, 1e-3, 0).unwrap();
        assert!(sets_equal(&before.discriminator.params, &bundle.discriminator.params));
        assert!(sets_equal(&before.segmenter.params, &bundle.segmenter.params));
        assert!(!sets_equal(&before.encoder2.params, &bundle.encoder2.params));
    }

    #[test]
    fn validation_leaves_parameters() {
        let cfg = tiny_cfg();
        let mut bundle = NetworkBundle::<f64>::new(&cfg.network, 3).unwrap();
        let val = validation_triplets(&cfg, &images(3, 4)).unwrap();
        let before = bundle.clone();
        let a = validation_loss(&mut bundle, &val, &cfg).unwrap();
        let b = validation_loss(&mut bundle, &val, &cfg).unwrap();
        assert_eq!(a, b);
        for (x, y) in before.param_sets().iter().zip(bundle.param_sets()) {
            assert!(sets_equal(x, y));
        }
    }

    #[test]
    fn clean_batch_is_finite() {
        let cfg = tiny_cfg();
        let mut bundle = NetworkBundle::<f32>::new(&cfg.network, 5).unwrap();
        let mut opts = Optimizers::new(&bundle, 0.5, 0.999);
        let triplets: Vec<_> = images(2, 6)
            .into_iter()
            .map(|(x, roi)| TrainingTriplet::clean(Image::from_fn(3, 16, 16, |c, y, xx| x.get(c, y, xx) as f32), roi))
            .collect();
        let r = train_step(&mut bundle, &mut opts, &triplets, &cfg, 1e-3, 0).unwrap();
        assert!(r.is_finite());
        assert!((r.total - r.gan_total - r.focal).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_config() {
        let cfg = TrainConfig { patience: 0, ..tiny_cfg() };
        match cfg.validate() {
            Err(Error::InvalidKey { key, .. }) => assert_eq!(key, "patience"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(TrainConfig { lr0: 0.0, ..tiny_cfg() }.validate().is_err());
    }

    #[test]
    fn history_row_round_trip() {
        let r = EpochRecord {
            epoch: 3,
            lr: 9.048374180359596e-5,
            train: LossReport::new(0.1, 0.2, 0.3, 0.4, 1.3, &LossWeights::default()),
            val_con: 0.123456789,
        };
        let back = EpochRecord::parse(&r.csv_row()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.lr, r.lr);
        assert_eq!(back.val_con, r.val_con);
        assert_eq!(back.train.total, r.train.total);
    }
}
