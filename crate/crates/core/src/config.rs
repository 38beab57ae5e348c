//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, `GRD_SEED`, the config file,
//! then command-line overrides. The serialized form lists every key, so a
//! snapshot fully determines a run.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset_io::LoadConfig;
use crate::error::{Error, Result};
use crate::inference::InferOptions;
use crate::losses::LossCase;
use crate::networks::Bottleneck;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "GRD_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("expected f32 or f64, got `{other}`")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub infer: InferOptions,
    /// Dataset root in MVTec layout.
    pub data: Option<PathBuf>,
    /// Directory of per-image ROI masks; absent means the full frame.
    pub roi_dir: Option<PathBuf>,
    pub val_fraction: f64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            infer: InferOptions::default(),
            data: None,
            roi_dir: None,
            val_fraction: LoadConfig::default().val_fraction,
            precision: Precision::F32,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "dataset root (train/, test/, ground_truth/)"),
    ("roi_dir", "directory of ROI mask PNGs named after the images"),
    ("val_fraction", "share of train/good held out for validation"),
    ("precision", "scalar type: f32 or f64"),
    ("seed", "master seed for initialization, noise, shuffling and the validation split"),
    ("epochs", "training epochs"),
    ("batch_size", "triplets per optimizer step"),
    ("lr0", "initial learning rate"),
    ("alpha", "plateau decay exponent: lr <- lr * exp(-alpha)"),
    ("patience", "epochs without improvement before a decay"),
    ("min_delta", "smallest decrease counted as an improvement"),
    ("save_epochs", "comma-separated epochs that keep their own checkpoint"),
    ("plateau_metric", "signal for the plateau schedule: val_con or train_con"),
    ("beta1", "Adam first-moment coefficient"),
    ("beta2", "Adam second-moment coefficient"),
    ("augment", "random rotation of training images"),
    ("loss_case", "segmentation loss variant 1-4"),
    ("omega_a", "L1 weight inside the contextual loss"),
    ("omega_b", "1 - SSIM weight inside the contextual loss"),
    ("omega_adv", "adversarial loss weight"),
    ("omega_con", "contextual loss weight"),
    ("omega_enc", "latent encoder loss weight"),
    ("gamma", "focal loss exponent; 0 gives plain cross-entropy"),
    ("overlap_w", "overlap loss value when a mask is empty"),
    ("resolution", "working image side in pixels"),
    ("channels", "image channels (1 or 3)"),
    ("bottleneck", "generator bottleneck: crae (convolutional) or drae (dense)"),
    ("base_width", "generator channels at full resolution"),
    ("width_cap", "maximum generator channel count"),
    ("stages", "generator downsampling stages"),
    ("blocks_per_stage", "residual blocks per generator stage"),
    ("latent_channels", "latent channels for the crae bottleneck"),
    ("dense_latent", "latent size for the drae bottleneck"),
    ("residual", "identity skips in the residual blocks"),
    ("unet_base_width", "segmenter channels at full resolution"),
    ("unet_levels", "segmenter downsampling levels"),
    ("synth_cells_min", "smallest noise lattice exponent (2^k cells per axis)"),
    ("synth_cells_max", "largest noise lattice exponent"),
    ("synth_octaves", "fractal octaves of the noise (1-4)"),
    ("synth_quantile_min", "lower bound of the noise threshold quantile"),
    ("synth_quantile_max", "upper bound of the noise threshold quantile"),
    ("synth_opacity_min", "lower bound of the texture blend opacity"),
    ("synth_opacity_max", "upper bound of the texture blend opacity"),
    ("synth_p_clean", "probability of an uncorrupted training triplet"),
    ("tau", "localization threshold on the smoothed heat map"),
    ("kernel", "odd side of the heat map mean filter"),
    ("score_within_roi", "take the image score over ROI pixels only"),
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e| Error::InvalidKey { key: key.into(), reason: format!("cannot parse `{value}`: {e}") })
}

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let n = &mut t.network;
        let w = &mut t.weights;
        let s = &mut t.synth;
        match key {
            "data" => self.data = path_value(value),
            "roi_dir" => self.roi_dir = path_value(value),
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "min_delta" => t.min_delta = parse(key, value)?,
            "save_epochs" => {
                t.save_epochs = value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(|v| parse(key, v)).collect::<Result<_>>()?
            }
            "plateau_metric" => t.plateau_metric = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            "loss_case" => t.loss_case = LossCase::from_id(parse(key, value)?)?,
            "omega_a" => w.omega_a = parse(key, value)?,
            "omega_b" => w.omega_b = parse(key, value)?,
            "omega_adv" => w.omega_adv = parse(key, value)?,
            "omega_con" => w.omega_con = parse(key, value)?,
            "omega_enc" => w.omega_enc = parse(key, value)?,
            "gamma" => w.gamma = parse(key, value)?,
            "overlap_w" => w.overlap_w = parse(key, value)?,
            "resolution" => n.resolution = parse(key, value)?,
            "channels" => n.channels = parse(key, value)?,
            "bottleneck" => n.bottleneck = parse::<Bottleneck>(key, value)?,
            "base_width" => n.base_width = parse(key, value)?,
            "width_cap" => n.width_cap = parse(key, value)?,
            "stages" => n.stages = parse(key, value)?,
            "blocks_per_stage" => n.blocks_per_stage = parse(key, value)?,
            "latent_channels" => n.latent_channels = parse(key, value)?,
            "dense_latent" => n.dense_latent = parse(key, value)?,
            "residual" => n.residual = parse(key, value)?,
            "unet_base_width" => n.unet_base_width = parse(key, value)?,
            "unet_levels" => n.unet_levels = parse(key, value)?,
            "synth_cells_min" => s.cell_exponents.0 = parse(key, value)?,
            "synth_cells_max" => s.cell_exponents.1 = parse(key, value)?,
            "synth_octaves" => s.octaves = parse(key, value)?,
            "synth_quantile_min" => s.quantiles.0 = parse(key, value)?,
            "synth_quantile_max" => s.quantiles.1 = parse(key, value)?,
            "synth_opacity_min" => s.opacity.0 = parse(key, value)?,
            "synth_opacity_max" => s.opacity.1 = parse(key, value)?,
            "synth_p_clean" => s.p_clean = parse(key, value)?,
            "tau" => self.infer.tau = parse(key, value)?,
            "kernel" => self.infer.kernel = parse(key, value)?,
            "score_within_roi" => self.infer.score_within_roi = parse(key, value)?,
            other => return Err(Error::InvalidKey { key: other.into(), reason: "unknown key".into() }),
        }
        Ok(())
    }

    /// Current value of `key` in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let n = &t.network;
        let w = &t.weights;
        let s = &t.synth;
        Some(match key {
            "data" => path_text(&self.data),
            "roi_dir" => path_text(&self.roi_dir),
            "val_fraction" => self.val_fraction.to_string(),
            "precision" => self.precision.to_string(),
            "seed" => t.seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr0" => t.lr0.to_string(),
            "alpha" => t.alpha.to_string(),
            "patience" => t.patience.to_string(),
            "min_delta" => t.min_delta.to_string(),
            "save_epochs" => t.save_epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
            "plateau_metric" => t.plateau_metric.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "augment" => t.augment.to_string(),
            "loss_case" => t.loss_case.id().to_string(),
            "omega_a" => w.omega_a.to_string(),
            "omega_b" => w.omega_b.to_string(),
            "omega_adv" => w.omega_adv.to_string(),
            "omega_con" => w.omega_con.to_string(),
            "omega_enc" => w.omega_enc.to_string(),
            "gamma" => w.gamma.to_string(),
            "overlap_w" => w.overlap_w.to_string(),
            "resolution" => n.resolution.to_string(),
            "channels" => n.channels.to_string(),
            "bottleneck" => n.bottleneck.to_string(),
            "base_width" => n.base_width.to_string(),
            "width_cap" => n.width_cap.to_string(),
            "stages" => n.stages.to_string(),
            "blocks_per_stage" => n.blocks_per_stage.to_string(),
            "latent_channels" => n.latent_channels.to_string(),
            "dense_latent" => n.dense_latent.to_string(),
            "residual" => n.residual.to_string(),
            "unet_base_width" => n.unet_base_width.to_string(),
            "unet_levels" => n.unet_levels.to_string(),
            "synth_cells_min" => s.cell_exponents.0.to_string(),
            "synth_cells_max" => s.cell_exponents.1.to_string(),
            "synth_octaves" => s.octaves.to_string(),
            "synth_quantile_min" => s.quantiles.0.to_string(),
            "synth_quantile_max" => s.quantiles.1.to_string(),
            "synth_opacity_min" => s.opacity.0.to_string(),
            "synth_opacity_max" => s.opacity.1.to_string(),
            "synth_p_clean" => s.p_clean.to_string(),
            "tau" => self.infer.tau.to_string(),
            "kernel" => self.infer.kernel.to_string(),
            "score_within_roi" => self.infer.score_within_roi.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::InvalidKey { key: key.into(), reason });
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", format!("must lie in [0, 1), got {}", self.val_fraction));
        }
        if !(self.infer.tau.is_finite() && (0.0..=1.0).contains(&self.infer.tau)) {
            return bad("tau", format!("must lie in [0, 1], got {}", self.infer.tau));
        }
        let k = self.infer.kernel;
        if k.is_multiple_of(2) || k > self.train.network.resolution {
            return bad("kernel", format!("must be odd and at most the resolution, got {k}"));
        }
        if !matches!(self.train.network.channels, 1 | 3) {
            return bad("channels", format!("must be 1 or 3, got {}", self.train.network.channels));
        }
        self.train.validate()
    }

    /// Every key, one `key = value` line each, in table order.
    pub fn serialize(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("every table key has a value"))).collect()
    }

    pub fn load_config(&self) -> LoadConfig {
        LoadConfig {
            resolution: self.train.network.resolution,
            channels: self.train.network.channels,
            val_fraction: self.val_fraction,
            seed: self.train.seed,
        }
    }
}

/// Splits `key=value`; used for both file lines and overrides.
pub fn split_pair(text: &str) -> Result<(&str, &str)> {
    let (k, v) = text.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{text}`")))?;
    Ok((k.trim(), v.trim()))
}

/// Applies config text on top of `cfg`. Blank lines and `#` comments are skipped;
/// a key may appear only once.
pub fn apply_text(cfg: &mut RunConfig, text: &str, origin: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = split_pair(line).map_err(|_| Error::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
        if !seen.insert(k.to_string()) {
            return Err(Error::InvalidKey { key: k.into(), reason: format!("repeated at {origin}:{}", i + 1) });
        }
        cfg.set(k, v)?;
    }
    Ok(())
}

/// Builds and validates a run configuration. `env_seed` is the value of
/// `GRD_SEED`, which only matters when neither the file nor an override sets `seed`.
pub fn build_config(file: Option<(&str, &str)>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = env_seed {
        cfg.train.seed = seed
            .trim()
            .parse()
            .map_err(|_| Error::InvalidKey { key: SEED_ENV.into(), reason: format!("cannot parse `{seed}` as a seed") })?;
    }
    if let Some((origin, text)) = file {
        apply_text(&mut cfg, text, origin)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any) and applies overrides; `GRD_SEED` is read from the environment.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let origin = path.map(|p| p.display().to_string()).unwrap_or_default();
    let env_seed = std::env::var(SEED_ENV).ok();
    build_config(text.as_deref().map(|t| (origin.as_str(), t)), overrides, env_seed.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_paper_defaults() {
        let cfg = build_config(Some(("empty", "")), &[], None).unwrap();
        assert_eq!(cfg.train.weights.omega_con, 50.0);
        assert_eq!(cfg.train.lr0, 1e-4);
        assert_eq!(cfg.train.patience, 3);
        assert_eq!(cfg.train.alpha, 0.1);
        assert_eq!(cfg.train.loss_case, LossCase::RoiFocal);
    }

    #[test]
    fn serialize_parse_fixpoint() {
        let mut cfg = RunConfig::default();
        cfg.set("gamma", "0").unwrap();
        cfg.set("data", "/tmp/corpus").unwrap();
        cfg.set("lr0", "0.0003").unwrap();
        cfg.set("save_epochs", "10, 35,100").unwrap();
        let text = cfg.serialize();
        let back = build_config(Some(("snap", &text)), &[], None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.serialize(), text);
        assert_eq!(back.train.weights.gamma, 0.0);
        for (k, _) in KEYS {
            assert!(cfg.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |r: Result<RunConfig>| match r {
            Err(Error::InvalidKey { key, .. }) => key,
            other => panic!("expected a key error, got {other:?}"),
        };
        let ov = |k: &str, v: &str| vec![(k.to_string(), v.to_string())];
        assert_eq!(key_of(build_config(Some(("f", "colour = red")), &[], None)), "colour");
        assert_eq!(key_of(build_config(None, &ov("epochs", "many"), None)), "epochs");
        assert_eq!(key_of(build_config(None, &ov("patience", "0"), None)), "patience");
        assert_eq!(key_of(build_config(None, &ov("kernel", "20"), None)), "kernel");
        assert_eq!(key_of(build_config(None, &ov("loss_case", "7"), None)), "loss_case");
        assert_eq!(key_of(build_config(Some(("f", "seed = 1\nseed = 2")), &[], None)), "seed");
    }

    #[test]
    fn seed_precedence() {
        let ov = vec![("seed".to_string(), "9".to_string())];
        assert_eq!(build_config(None, &[], Some("5")).unwrap().train.seed, 5);
        assert_eq!(build_config(Some(("f", "seed = 7")), &[], Some("5")).unwrap().train.seed, 7);
        assert_eq!(build_config(Some(("f", "seed = 7")), &ov, Some("5")).unwrap().train.seed, 9);
        assert!(build_config(None, &[], Some("x")).is_err());
    }
}
