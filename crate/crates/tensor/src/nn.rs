//! Parameterized layers. Layers store [`ParamId`]s; values live in a [`ParamSet`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a forward pass treats parameters and normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Normalize with batch statistics (otherwise running statistics).
    pub batch_stats: bool,
    /// Fold batch statistics into the running averages.
    pub update_stats: bool,
    /// Bind parameters as tracked leaves so they receive gradients.
    pub track_params: bool,
}

impl Mode {
    /// Optimizing this network.
    pub const TRAIN: Mode = Mode { batch_stats: true, update_stats: true, track_params: true };
    /// Participating in another network's update: batch statistics, no state change.
    pub const FROZEN: Mode = Mode { batch_stats: true, update_stats: false, track_params: false };
    /// Inference with running statistics.
    pub const EVAL: Mode = Mode { batch_stats: false, update_stats: false, track_params: false };
}

/// `N(0, std)` initialized tensor.
pub fn normal_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = set.add(
            format!("{name}.weight"),
            normal_init(&[out_ch, in_ch, kernel, kernel], DEFAULT_INIT_STD, rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| set.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamKind::Trainable));
        Conv2d { weight, bias, in_ch, out_ch, kernel, stride, pad }
    }

    /// 3x3, padding 1.
    pub fn same3<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(set, name, in_ch, out_ch, 3, stride, 1, true, rng)
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, set: &ParamSet<T>, x: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        let w = g.param(set, self.weight, mode.track_params);
        let b = self.bias.map(|b| g.param(set, b, mode.track_params));
        x.conv2d(w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(set: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = set.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable);
        let beta = set.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable);
        let running_mean = set.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer);
        let running_var = set.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer);
        BatchNorm2d { gamma, beta, running_mean, running_var, channels, eps: 1e-5, momentum: 0.1 }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        set: &mut ParamSet<T>,
        x: Var<'g, T>,
        mode: Mode,
    ) -> Var<'g, T> {
        let gamma = g.param(set, self.gamma, mode.track_params);
        let beta = g.param(set, self.beta, mode.track_params);
        let eps = T::of(self.eps);
        if mode.batch_stats {
            let (y, mean, var) = x.batch_norm(gamma, beta, eps);
            if mode.update_stats {
                let (_, _, h, w) = x.value().dims4();
                let count = (x.shape()[0] * h * w) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mom = T::of(self.momentum);
                let keep = T::one() - mom;
                let rm = set.get_mut(self.running_mean);
                for (r, &m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + mom * m;
                }
                let rv = set.get_mut(self.running_var);
                for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + mom * v * T::of(unbias);
                }
            }
            y
        } else {
            let mean = set.get(self.running_mean);
            let var = set.get(self.running_var);
            let inv_std = g.constant(var.map(|v| T::one() / (v + eps).sqrt()));
            let neg_mean = g.constant(mean.map(|m| -m));
            let scale = gamma.mul(inv_std);
            let shift = beta.add(neg_mean.mul(scale));
            x.channel_affine(scale, shift)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = set.add(
            format!("{name}.weight"),
            normal_init(&[out_features, in_features], DEFAULT_INIT_STD, rng),
            ParamKind::Trainable,
        );
        let bias = set.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), ParamKind::Trainable);
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, set: &ParamSet<T>, x: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        let w = g.param(set, self.weight, mode.track_params);
        let b = g.param(set, self.bias, mode.track_params);
        x.linear(w, Some(b))
    }
}
