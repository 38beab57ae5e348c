//! The four sub-networks: residual encoder-decoder generator, second encoder,
//! residual discriminator and the U-Net segmenter.

use grdnet_tensor::{BatchNorm2d, Conv2d, Graph, Linear, Mode, ParamSet, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel index of the anomalous class in the segmenter output.
pub const ANOMALOUS_CHANNEL: usize = 1;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bottleneck {
    /// Convolutional latent map.
    #[serde(rename = "crae")]
    Conv,
    /// Flattened dense latent vector.
    #[serde(rename = "drae")]
    Dense,
}

impl std::str::FromStr for Bottleneck {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "crae" | "conv" => Ok(Bottleneck::Conv),
            "drae" | "dense" => Ok(Bottleneck::Dense),
            _ => Err(format!("expected crae or drae, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Bottleneck::Conv => "crae",
            Bottleneck::Dense => "drae",
        })
    }
}

/// Architecture hyper-parameters shared by all sub-networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub resolution: usize,
    pub channels: usize,
    pub bottleneck: Bottleneck,
    pub base_width: usize,
    pub width_cap: usize,
    /// Downsampling stages of the encoder and discriminator.
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub latent_channels: usize,
    pub dense_latent: usize,
    /// `false` drops the skip connections of every residual block.
    pub residual: bool,
    pub unet_base_width: usize,
    pub unet_levels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            resolution: 256,
            channels: 3,
            bottleneck: Bottleneck::Conv,
            base_width: 32,
            width_cap: 256,
            stages: 5,
            blocks_per_stage: 2,
            latent_channels: 32,
            dense_latent: 2048,
            residual: true,
            unet_base_width: 32,
            unet_levels: 4,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("channels", self.channels),
            ("base_width", self.base_width),
            ("width_cap", self.width_cap),
            ("stages", self.stages),
            ("latent_channels", self.latent_channels),
            ("dense_latent", self.dense_latent),
            ("unet_base_width", self.unet_base_width),
            ("unet_levels", self.unet_levels),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::InvalidKey { key: key.into(), reason: "must be positive".into() });
            }
        }
        if self.stages > 12 || self.unet_levels > 12 {
            return Err(Error::InvalidKey { key: "stages".into(), reason: "depth above 12 is not supported".into() });
        }
        let factor = 1usize << self.stages;
        if !self.resolution.is_multiple_of(factor) {
            return Err(Error::InvalidKey {
                key: "stages".into(),
                reason: format!("resolution {} is not divisible by 2^{} = {factor}", self.resolution, self.stages),
            });
        }
        let unet = 1usize << self.unet_levels;
        if !self.resolution.is_multiple_of(unet) {
            return Err(Error::InvalidKey {
                key: "unet_levels".into(),
                reason: format!("resolution {} is not divisible by 2^{} = {unet}", self.resolution, self.unet_levels),
            });
        }
        Ok(())
    }

    /// Width of encoder stage `i`; index `stages` is the bottom feature map.
    pub fn width(&self, i: usize) -> usize {
        (self.base_width << i).min(self.width_cap.max(self.base_width))
    }

    /// Spatial side of the bottom feature map.
    pub fn bottom(&self) -> usize {
        self.resolution >> self.stages
    }

    /// Per-sample latent shape.
    pub fn latent_shape(&self) -> Vec<usize> {
        match self.bottleneck {
            Bottleneck::Conv => vec![self.latent_channels, self.bottom(), self.bottom()],
            Bottleneck::Dense => vec![self.dense_latent],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Leaky,
    Relu,
}

impl Act {
    fn apply<'g, T: Scalar>(self, x: Var<'g, T>) -> Var<'g, T> {
        match self {
            Act::Leaky => x.leaky_relu(T::of(LEAKY_SLOPE)),
            Act::Relu => x.relu(),
        }
    }
}

/// Pre-activation residual block: `x + conv(act(bn(conv(act(bn(x))))))`.
#[derive(Clone, Debug)]
pub struct PreActBlock {
    pub bn1: BatchNorm2d,
    pub conv1: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv2: Conv2d,
    act: Act,
    residual: bool,
}

impl PreActBlock {
    fn new<T: Scalar>(set: &mut ParamSet<T>, name: &str, width: usize, act: Act, residual: bool, rng: &mut ChaCha8Rng) -> Self {
        PreActBlock {
            bn1: BatchNorm2d::new(set, &format!("{name}.bn1"), width),
            conv1: Conv2d::same3(set, &format!("{name}.conv1"), width, width, 1, rng),
            bn2: BatchNorm2d::new(set, &format!("{name}.bn2"), width),
            conv2: Conv2d::same3(set, &format!("{name}.conv2"), width, width, 1, rng),
            act,
            residual,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, set: &mut ParamSet<T>, x: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        let h = self.act.apply(self.bn1.forward(g, set, x, mode));
        let h = self.conv1.forward(g, set, h, mode);
        let h = self.act.apply(self.bn2.forward(g, set, h, mode));
        let h = self.conv2.forward(g, set, h, mode);
        if self.residual {
            x.add(h)
        } else {
            h
        }
    }
}

/// Residual stages followed by stride-2 downsampling.
#[derive(Clone, Debug)]
struct Trunk {
    stem: Conv2d,
    stages: Vec<(Vec<PreActBlock>, Conv2d)>,
}

impl Trunk {
    fn new<T: Scalar>(set: &mut ParamSet<T>, prefix: &str, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let stem = Conv2d::same3(set, &format!("{prefix}.stem"), cfg.channels, cfg.width(0), 1, rng);
        let stages = (0..cfg.stages)
            .map(|s| {
                let w = cfg.width(s);
                let blocks = (0..cfg.blocks_per_stage)
                    .map(|b| PreActBlock::new(set, &format!("{prefix}.s{s}.b{b}"), w, Act::Leaky, cfg.residual, rng))
                    .collect();
                let down = Conv2d::same3(set, &format!("{prefix}.s{s}.down"), w, cfg.width(s + 1), 2, rng);
                (blocks, down)
            })
            .collect();
        Trunk { stem, stages }
    }

    fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, set: &mut ParamSet<T>, x: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        let mut h = self.stem.forward(g, set, x, mode);
        for (blocks, down) in &self.stages {
            for b in blocks {
                h = b.forward(g, set, h, mode);
            }
            h = down.forward(g, set, h, mode);
        }
        h
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut PreActBlock> {
        self.stages.iter_mut().flat_map(|(b, _)| b.iter_mut())
    }
}

#[derive(Clone, Debug)]
enum LatentHead {
    Conv(Conv2d),
    Dense(Linear),
}

/// Image to latent code.
#[derive(Clone, Debug)]
pub struct EncoderLayers {
    trunk: Trunk,
    head_bn: BatchNorm2d,
    head: LatentHead,
}

impl EncoderLayers {
    fn new<T: Scalar>(set: &mut ParamSet<T>, prefix: &str, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let trunk = Trunk::new(set, prefix, cfg, rng);
        let wb = cfg.width(cfg.stages);
        let head_bn = BatchNorm2d::new(set, &format!("{prefix}.head_bn"), wb);
        let head = match cfg.bottleneck {
            Bottleneck::Conv => {
                LatentHead::Conv(Conv2d::new(set, &format!("{prefix}.head"), wb, cfg.latent_channels, 1, 1, 0, true, rng))
            }
            Bottleneck::Dense => {
                let n = wb * cfg.bottom() * cfg.bottom();
                LatentHead::Dense(Linear::new(set, &format!("{prefix}.head"), n, cfg.dense_latent, rng))
            }
        };
        EncoderLayers { trunk, head_bn, head }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, set: &mut ParamSet<T>, x: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        let h = self.trunk.forward(g, set, x, mode);
        let h = Act::Leaky.apply(self.head_bn.forward(g, set, h, mode));
        match &self.head {
            LatentHead::Conv(c) => c.forward(g, set, h, mode),
            LatentHead::Dense(l) => l.forward(g, set, h.flatten(), mode),
        }
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut PreActBlock> {
        self.trunk.blocks_mut()
    }
}

#[derive(Clone, Debug)]
enum LatentInput {
    Conv(Conv2d),
    Dense(Linear),
}

/// Latent code to image in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct DecoderLayers {
    input: LatentInput,
    bottom: usize,
    bottom_width: usize,
    stages: Vec<(Conv2d, Vec<PreActBlock>)>,
    out_bn: BatchNorm2d,
    out: Conv2d,
}

impl DecoderLayers {
    fn new<T: Scalar>(set: &mut ParamSet<T>, prefix: &str, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let wb = cfg.width(cfg.stages);
        let bottom = cfg.bottom();
        let input = match cfg.bottleneck {
            Bottleneck::Conv => LatentInput::Conv(Conv2d::new(set, &format!("{prefix}.input"), cfg.latent_channels, wb, 1, 1, 0, true, rng)),
            Bottleneck::Dense => LatentInput::Dense(Linear::new(set, &format!("{prefix}.input"), cfg.dense_latent, wb * bottom * bottom, rng)),
        };
        let stages = (0..cfg.stages)
            .rev()
            .map(|s| {
                let w = cfg.width(s);
                let up = Conv2d::same3(set, &format!("{prefix}.s{s}.up"), cfg.width(s + 1), w, 1, rng);
                let blocks = (0..cfg.blocks_per_stage)
                    .map(|b| PreActBlock::new(set, &format!("{prefix}.s{s}.b{b}"), w, Act::Relu, cfg.residual, rng))
                    .collect();
                (up, blocks)
            })
            .collect();
        let out_bn = BatchNorm2d::new(set, &format!("{prefix}.out_bn"), cfg.width(0));
        let out = Conv2d::same3(set, &format!("{prefix}.out"), cfg.width(0), cfg.channels, 1, rng);
        DecoderLayers { input, bottom, bottom_width: wb, stages, out_bn, out }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, set: &mut ParamSet<T>, z: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        let mut h = match &self.input {
            LatentInput::Conv(c) => c.forward(g, set, z, mode),
            LatentInput::Dense(l) => {
                let n = z.shape()[0];
                l.forward(g, set, z, mode).reshape(&[n, self.bottom_width, self.bottom, self.bottom])
            }
        };
        for (up, blocks) in &self.stages {
            h = up.forward(g, set, h.upsample2(), mode);
            for b in blocks {
                h = b.forward(g, set, h, mode);
            }
        }
        let h = Act::Relu.apply(self.out_bn.forward(g, set, h, mode));
        self.out.forward(g, set, h, mode).sigmoid()
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut PreActBlock> {
        self.stages.iter_mut().flat_map(|(_, b)| b.iter_mut())
    }
}

/// Encoder E1 and decoder D1 sharing one parameter set.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub params: ParamSet<T>,
    pub encoder: EncoderLayers,
    pub decoder: DecoderLayers,
}

/// Output of a generator pass.
pub struct Reconstruction<'g, T: Scalar> {
    pub z: Var<'g, T>,
    pub x_hat: Var<'g, T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = EncoderLayers::new(&mut params, "enc", cfg, &mut rng);
        let decoder = DecoderLayers::new(&mut params, "dec", cfg, &mut rng);
        Ok(Generator { params, encoder, decoder })
    }

    pub fn forward<'g>(&mut self, g: &'g Graph<T>, x: Var<'g, T>, mode: Mode) -> Reconstruction<'g, T> {
        let z = self.encoder.forward(g, &mut self.params, x, mode);
        let x_hat = self.decoder.forward(g, &mut self.params, z, mode);
        Reconstruction { z, x_hat }
    }

    pub fn encode<'g>(&mut self, g: &'g Graph<T>, x: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        self.encoder.forward(g, &mut self.params, x, mode)
    }
}

/// Second encoder E2: E1's architecture with its own parameters.
#[derive(Clone, Debug)]
pub struct SecondEncoder<T: Scalar> {
    pub params: ParamSet<T>,
    pub encoder: EncoderLayers,
}

impl<T: Scalar> SecondEncoder<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = EncoderLayers::new(&mut params, "enc", cfg, &mut rng);
        Ok(SecondEncoder { params, encoder })
    }

    pub fn forward<'g>(&mut self, g: &'g Graph<T>, x: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        self.encoder.forward(g, &mut self.params, x, mode)
    }
}

/// Real/fake classifier that also exposes its penultimate feature map.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub params: ParamSet<T>,
    trunk: Trunk,
    head_bn: BatchNorm2d,
    head: Linear,
}

pub struct Judgement<'g, T: Scalar> {
    /// `(n, 1)` pre-sigmoid scores.
    pub logits: Var<'g, T>,
    pub features: Var<'g, T>,
}

impl<T: Scalar> Judgement<'_, T> {
    /// Probability of "real", `(n, 1)`.
    pub fn score(&self) -> Tensor<T> {
        self.logits.value().map(|v| T::one() / (T::one() + (-v).exp()))
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let trunk = Trunk::new(&mut params, "disc", cfg, &mut rng);
        let wb = cfg.width(cfg.stages);
        let head_bn = BatchNorm2d::new(&mut params, "disc.head_bn", wb);
        let head = Linear::new(&mut params, "disc.head", wb * cfg.bottom() * cfg.bottom(), 1, &mut rng);
        Ok(Discriminator { params, trunk, head_bn, head })
    }

    pub fn forward<'g>(&mut self, g: &'g Graph<T>, x: Var<'g, T>, mode: Mode) -> Judgement<'g, T> {
        let features = self.trunk.forward(g, &mut self.params, x, mode);
        let h = Act::Leaky.apply(self.head_bn.forward(g, &mut self.params, features, mode));
        let logits = self.head.forward(g, &self.params, h.flatten(), mode);
        Judgement { logits, features }
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
}

impl DoubleConv {
    fn new<T: Scalar>(set: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        DoubleConv {
            c1: Conv2d::same3(set, &format!("{name}.conv1"), cin, cout, 1, rng),
            b1: BatchNorm2d::new(set, &format!("{name}.bn1"), cout),
            c2: Conv2d::same3(set, &format!("{name}.conv2"), cout, cout, 1, rng),
            b2: BatchNorm2d::new(set, &format!("{name}.bn2"), cout),
        }
    }

    fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, set: &mut ParamSet<T>, x: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        let h = self.c1.forward(g, set, x, mode);
        let h = self.b1.forward(g, set, h, mode).relu();
        let h = self.c2.forward(g, set, h, mode);
        self.b2.forward(g, set, h, mode).relu()
    }
}

/// U-Net over `concat(image, reconstruction)` producing two class scores per pixel.
#[derive(Clone, Debug)]
pub struct Segmenter<T: Scalar> {
    pub params: ParamSet<T>,
    input_channels: usize,
    down: Vec<DoubleConv>,
    up: Vec<(Conv2d, DoubleConv)>,
    out: Conv2d,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let w = |i: usize| (cfg.unet_base_width << i).min(cfg.width_cap.max(cfg.unet_base_width));
        let input_channels = 2 * cfg.channels;
        let down = (0..=cfg.unet_levels)
            .map(|i| {
                let cin = if i == 0 { input_channels } else { w(i - 1) };
                DoubleConv::new(&mut params, &format!("seg.down{i}"), cin, w(i), &mut rng)
            })
            .collect();
        let up = (0..cfg.unet_levels)
            .rev()
            .map(|i| {
                let reduce = Conv2d::same3(&mut params, &format!("seg.up{i}.reduce"), w(i + 1), w(i), 1, &mut rng);
                let fuse = DoubleConv::new(&mut params, &format!("seg.up{i}"), 2 * w(i), w(i), &mut rng);
                (reduce, fuse)
            })
            .collect();
        let out = Conv2d::new(&mut params, "seg.out", w(0), 2, 1, 1, 0, true, &mut rng);
        Ok(Segmenter { params, input_channels, down, up, out })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    /// Raw two-channel scores, `(n, 2, h, w)`.
    pub fn logits<'g>(&mut self, g: &'g Graph<T>, x: Var<'g, T>, x_hat: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        let set = &mut self.params;
        let mut h = x.concat_channels(x_hat);
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2();
            }
            h = block.forward(g, set, h, mode);
            skips.push(h);
        }
        skips.pop();
        for (reduce, fuse) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = reduce.forward(g, set, h.upsample2(), mode);
            h = fuse.forward(g, set, h.concat_channels(skip), mode);
        }
        self.out.forward(g, set, h, mode)
    }

    /// Anomalous-class probability, `(n, 1, h, w)`.
    pub fn heat<'g>(&mut self, g: &'g Graph<T>, x: Var<'g, T>, x_hat: Var<'g, T>, mode: Mode) -> Var<'g, T> {
        self.logits(g, x, x_hat, mode).channel_softmax().select_channel(ANOMALOUS_CHANNEL)
    }
}

/// All four sub-networks.
#[derive(Clone, Debug)]
pub struct NetworkBundle<T: Scalar> {
    pub config: NetworkConfig,
    pub generator: Generator<T>,
    pub encoder2: SecondEncoder<T>,
    pub discriminator: Discriminator<T>,
    pub segmenter: Segmenter<T>,
}

/// Names of the parameter sets, in checkpoint order.
pub const NETWORK_NAMES: [&str; 4] = ["generator", "encoder2", "discriminator", "segmenter"];

impl<T: Scalar> NetworkBundle<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seeds: [u64; 4] = std::array::from_fn(|_| rng.random());
        Ok(NetworkBundle {
            config: config.clone(),
            generator: Generator::new(config, seeds[0])?,
            encoder2: SecondEncoder::new(config, seeds[1])?,
            discriminator: Discriminator::new(config, seeds[2])?,
            segmenter: Segmenter::new(config, seeds[3])?,
        })
    }

    pub fn param_sets(&self) -> [&ParamSet<T>; 4] {
        [&self.generator.params, &self.encoder2.params, &self.discriminator.params, &self.segmenter.params]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet<T>; 4] {
        [&mut self.generator.params, &mut self.encoder2.params, &mut self.discriminator.params, &mut self.segmenter.params]
    }

    pub fn all_finite(&self) -> bool {
        self.param_sets().iter().all(|s| s.all_finite())
    }
}

/// Results of one inference pass over a batch.
#[derive(Clone, Debug)]
pub struct PipelineOutput<T> {
    pub x_hat: Tensor<T>,
    pub z: Tensor<T>,
    pub z_hat: Tensor<T>,
    /// `(n, 1, h, w)` anomalous-class probabilities.
    pub heat: Tensor<T>,
}

fn finite<T: Scalar>(v: &Var<'_, T>, stage: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.into(), step: None })
    }
}

/// Evaluation-mode pass: reconstruction, both latent codes and the heat map.
pub fn forward_pipeline<T: Scalar>(bundle: &mut NetworkBundle<T>, x: &Tensor<T>) -> Result<PipelineOutput<T>> {
    let cfg = &bundle.config;
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.resolution || s[3] != cfg.resolution {
        return Err(Error::shape(format!(
            "expected (n, {}, {r}, {r}) input, got {s:?}",
            cfg.channels,
            r = cfg.resolution
        )));
    }
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let rec = bundle.generator.forward(&g, xv, Mode::EVAL);
    finite(&rec.z, "encoder")?;
    finite(&rec.x_hat, "generator")?;
    let z_hat = bundle.encoder2.forward(&g, rec.x_hat, Mode::EVAL);
    finite(&z_hat, "second encoder")?;
    let heat = bundle.segmenter.heat(&g, xv, rec.x_hat, Mode::EVAL);
    finite(&heat, "segmenter")?;
    Ok(PipelineOutput {
        x_hat: (*rec.x_hat.value()).clone(),
        z: (*rec.z.value()).clone(),
        z_hat: (*z_hat.value()).clone(),
        heat: (*heat.value()).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            resolution: 32,
            base_width: 4,
            width_cap: 16,
            stages: 2,
            latent_channels: 8,
            dense_latent: 16,
            unet_base_width: 4,
            unet_levels: 2,
            ..NetworkConfig::default()
        }
    }

    fn input(n: usize, cfg: &NetworkConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, cfg.channels, cfg.resolution, cfg.resolution], |_| rng.random::<f64>())
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let cfg = NetworkConfig { resolution: 40, stages: 4, ..small() };
        match Generator::<f32>::new(&cfg, 0) {
            Err(Error::InvalidKey { key, .. }) => assert_eq!(key, "stages"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn latent_shapes() {
        assert_eq!(NetworkConfig::default().latent_shape(), vec![32, 8, 8]);
        let dense = NetworkConfig { bottleneck: Bottleneck::Dense, ..NetworkConfig::default() };
        assert_eq!(dense.latent_shape(), vec![2048]);
        for bottleneck in [Bottleneck::Conv, Bottleneck::Dense] {
            let cfg = NetworkConfig { bottleneck, ..small() };
            let mut gen = Generator::<f64>::new(&cfg, 1).unwrap();
            let g = Graph::new();
            let x = g.constant(input(2, &cfg, 2));
            let rec = gen.forward(&g, x, Mode::TRAIN);
            let mut expect = vec![2];
            expect.extend(cfg.latent_shape());
            assert_eq!(rec.z.shape(), expect);
            assert_eq!(rec.x_hat.shape(), x.shape());
            assert!(rec.x_hat.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn second_encoder_mirrors_first() {
        let cfg = small();
        let gen = Generator::<f64>::new(&cfg, 3).unwrap();
        let mut e2 = SecondEncoder::<f64>::new(&cfg, 4).unwrap();
        let e1_layout: Vec<_> = gen.params.layout().into_iter().filter(|(n, _)| n.starts_with("enc.")).collect();
        assert_eq!(e1_layout, e2.params.layout());
        let differs = e2.params.entries().iter().any(|e| gen.params.find(&e.name).is_some_and(|id| gen.params.get(id) != &e.value));
        assert!(differs);

        let mut gen = gen;
        let x = input(2, &cfg, 5);
        for e in e2.params.entries_mut() {
            let id = gen.params.find(&e.name).unwrap();
            e.value = gen.params.get(id).clone();
        }
        let g = Graph::new();
        let xv = g.constant(x);
        let z1 = gen.encode(&g, xv, Mode::EVAL).value();
        let z2 = e2.forward(&g, xv, Mode::EVAL).value();
        assert_eq!(*z1, *z2);
    }

    #[test]
    fn zeroed_branch_is_identity() {
        let cfg = small();
        let mut gen = Generator::<f64>::new(&cfg, 6).unwrap();
        let block = gen.encoder.blocks_mut().next().unwrap().clone();
        for id in block.conv2.params() {
            gen.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let x = g.constant(input(2, &NetworkConfig { channels: 4, ..cfg }, 7));
        let y = block.forward(&g, &mut gen.params, x, Mode::TRAIN);
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn discriminator_contract() {
        let cfg = small();
        let mut d = Discriminator::<f64>::new(&cfg, 8).unwrap();
        let x = input(3, &cfg, 9);
        let g = Graph::new();
        let a = d.forward(&g, g.constant(x.clone()), Mode::EVAL);
        let b = d.forward(&g, g.constant(x), Mode::EVAL);
        assert_eq!(a.logits.shape(), vec![3, 1]);
        assert!(a.features.value().all_finite());
        assert_eq!(*a.logits.value(), *b.logits.value());
        assert_eq!(*a.features.value(), *b.features.value());
        assert!(a.score().data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn segmenter_contract() {
        let cfg = small();
        let mut s = Segmenter::<f64>::new(&cfg, 10).unwrap();
        assert_eq!(s.input_channels(), 6);
        let g = Graph::new();
        let x = g.constant(input(2, &cfg, 11));
        let x_hat = g.constant(input(2, &cfg, 12));
        let logits = s.logits(&g, x, x_hat, Mode::TRAIN);
        assert_eq!(logits.shape(), vec![2, 2, 32, 32]);
        let p = logits.channel_softmax().value();
        let plane = 32 * 32;
        for n in 0..2 {
            for i in 0..plane {
                let sum = p.data()[n * 2 * plane + i] + p.data()[n * 2 * plane + plane + i];
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        let zeros = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(s.heat(&g, zeros, zeros, Mode::EVAL).value().all_finite());
    }

    #[test]
    fn pipeline_shapes_and_determinism() {
        let cfg = small();
        let mut bundle = NetworkBundle::<f32>::new(&cfg, 13).unwrap();
        let x = input(2, &cfg, 14).cast::<f32>();
        let a = forward_pipeline(&mut bundle, &x).unwrap();
        let b = forward_pipeline(&mut bundle, &x).unwrap();
        assert_eq!(a.x_hat.shape(), x.shape());
        assert_eq!(a.z.shape(), a.z_hat.shape());
        assert_eq!(a.heat.shape(), &[2, 1, 32, 32]);
        assert!(a.heat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.heat, b.heat);
        assert_eq!(a.x_hat, b.x_hat);
    }

    #[test]
    fn pipeline_names_failing_stage() {
        let cfg = small();
        let mut bundle = NetworkBundle::<f32>::new(&cfg, 15).unwrap();
        let id = bundle.segmenter.params.find("seg.out.bias").unwrap();
        bundle.segmenter.params.get_mut(id).data_mut()[0] = f32::NAN;
        let x = input(1, &cfg, 16).cast::<f32>();
        match forward_pipeline(&mut bundle, &x) {
            Err(Error::NonFinite { stage, .. }) => assert_eq!(stage, "segmenter"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vanilla_blocks_have_no_skip() {
        let cfg = NetworkConfig { residual: false, ..small() };
        let mut gen = Generator::<f64>::new(&cfg, 17).unwrap();
        let block = gen.encoder.blocks_mut().next().unwrap().clone();
        for id in block.conv2.params() {
            gen.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let x = g.constant(input(1, &NetworkConfig { channels: 4, ..cfg }, 18));
        let y = block.forward(&g, &mut gen.params, x, Mode::TRAIN);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}
