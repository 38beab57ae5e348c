//! Procedural texture corpus in MVTec layout, used for desk-scale smoke runs.
//!
//! Good images are a warm wood-like texture (smooth gradient noise plus soft
//! grain). Test defects are drawn shapes, not gradient-noise blends, so the
//! model never sees the defect generator during training.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anomaly_synth::fractal_field;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, MaskMap};

pub const DEFECT_CLASSES: [&str; 2] = ["stain", "scratch"];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub size: usize,
    pub train: usize,
    pub test_good: usize,
    pub test_defect: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { size: 64, train: 150, test_good: 25, test_defect: 25, seed: 2024 }
    }
}

/// One good texture for `seed`.
pub fn texture(size: usize, seed: u64) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [0.62 + rng.random_range(-0.04..0.04), 0.46 + rng.random_range(-0.04..0.04), 0.30 + rng.random_range(-0.03..0.03)];
    let cells = if size.is_multiple_of(8) { 4 } else { 1 };
    let field = fractal_field::<f64>(size, size, cells, cells, if size.is_multiple_of(16) { 2 } else { 1 }, rng.random()).expect("valid lattice");
    let angle: f64 = rng.random_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let freq = rng.random_range(0.35..0.55);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    Image::from_fn(3, size, size, |c, y, x| {
        let t = (x as f64 * ca + y as f64 * sa) * freq + phase + 2.5 * field.get(y, x);
        let grain = 0.06 * t.sin();
        let shade = 1.0 + 0.18 * field.get(y, x);
        (base[c] * shade + grain).clamp(0.0, 1.0)
    })
}

/// Paints a defect of `class` onto `img`; returns the pixel-exact mask.
pub fn paint_defect(img: &mut Image<f64>, class: &str, seed: u64) -> Result<MaskMap> {
    let n = img.height();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = n as f64 * 0.2;
    let cy = rng.random_range(margin..n as f64 - margin);
    let cx = rng.random_range(margin..n as f64 - margin);
    let mask = match class {
        "stain" => {
            let ry = rng.random_range(0.06..0.14) * n as f64;
            let rx = rng.random_range(0.06..0.14) * n as f64;
            let rot: f64 = rng.random_range(0.0..PI);
            let (c, s) = (rot.cos(), rot.sin());
            BinaryMask::from_fn(n, n, |y, x| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            })
        }
        "scratch" => {
            let len = rng.random_range(0.3..0.5) * n as f64;
            let rot: f64 = rng.random_range(0.0..PI);
            let half = rng.random_range(0.8..1.6);
            let (dx, dy) = (rot.cos(), rot.sin());
            BinaryMask::from_fn(n, n, |y, x| {
                let (py, px) = (y as f64 - cy, x as f64 - cx);
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                along.abs() <= len / 2.0 && across.abs() <= half
            })
        }
        other => return Err(Error::InvalidArgument(format!("unknown defect class `{other}`"))),
    };
    let tint: [f64; 3] = if rng.random_bool(0.5) {
        [rng.random_range(0.0..0.25), rng.random_range(0.0..0.25), rng.random_range(0.3..0.9)]
    } else {
        [rng.random_range(0.0..0.15); 3]
    };
    for y in 0..n {
        for x in 0..n {
            if mask.get(y, x) {
                for (c, &t) in tint.iter().enumerate() {
                    let jitter = rng.random_range(-0.08..0.08);
                    img.set(c, y, x, (t + jitter).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug)]
pub struct CorpusSummary {
    pub root: PathBuf,
    pub train: usize,
    pub test_good: usize,
    pub test_defect: usize,
}

fn save_png(img: &Image<f64>, path: &Path) -> Result<()> {
    img.save(path)
}

/// Writes `train/good`, `test/good`, `test/<class>` and `ground_truth/<class>`.
pub fn generate_corpus(root: &Path, spec: &CorpusSpec) -> Result<CorpusSummary> {
    if spec.train == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one training image".into()));
    }
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let train_dir = root.join("train").join("good");
    let good_dir = root.join("test").join("good");
    mkdir(&train_dir)?;
    mkdir(&good_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..spec.train {
        save_png(&texture(spec.size, rng.random()), &train_dir.join(format!("{i:03}.png")))?;
    }
    for i in 0..spec.test_good {
        save_png(&texture(spec.size, rng.random()), &good_dir.join(format!("{i:03}.png")))?;
    }
    for class in DEFECT_CLASSES {
        mkdir(&root.join("test").join(class))?;
        mkdir(&root.join("ground_truth").join(class))?;
    }
    for i in 0..spec.test_defect {
        let class = DEFECT_CLASSES[i % DEFECT_CLASSES.len()];
        let mut img = texture(spec.size, rng.random());
        let mask = paint_defect(&mut img, class, rng.random())?;
        save_png(&img, &root.join("test").join(class).join(format!("{i:03}.png")))?;
        mask.save(&root.join("ground_truth").join(class).join(format!("{i:03}_mask.png")))?;
    }
    Ok(CorpusSummary { root: root.to_path_buf(), train: spec.train, test_good: spec.test_good, test_defect: spec.test_defect })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_vary_and_stay_in_range() {
        let a = texture(64, 1);
        let b = texture(64, 2);
        assert_ne!(a, b);
        assert_eq!(a, texture(64, 1));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn defects_change_only_masked_pixels() {
        for (i, class) in DEFECT_CLASSES.iter().enumerate() {
            let clean = texture(64, 10 + i as u64);
            let mut img = clean.clone();
            let m = paint_defect(&mut img, class, 99).unwrap();
            assert!(m.count() > 10, "{class}: {} pixels", m.count());
            for y in 0..64 {
                for x in 0..64 {
                    if !m.get(y, x) {
                        assert_eq!(img.get(0, y, x), clean.get(0, y, x));
                    }
                }
            }
        }
        assert!(paint_defect(&mut texture(64, 0), "dent", 0).is_err());
    }
}
