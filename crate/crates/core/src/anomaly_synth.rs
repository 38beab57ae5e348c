//! Simulated anomalies: gradient (Perlin) noise, random-quantile thresholding
//! and random-RGB blending onto clean images.

use std::f64::consts::{PI, SQRT_2};

use grdnet_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, MaskMap, RoiMask};

/// Gradient-noise field of shape `H x W` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseField<T> {
    height: usize,
    width: usize,
    /// Base lattice cells along `(y, x)`.
    cells: (usize, usize),
    octaves: usize,
    values: Vec<T>,
}

impl<T: Scalar> NoiseField<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> (usize, usize) {
        self.cells
    }

    pub fn octaves(&self) -> usize {
        self.octaves
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// One octave of classic 2-D gradient noise over a `cells_y x cells_x` lattice.
fn gradient_noise(height: usize, width: usize, cells_y: usize, cells_x: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let grads: Vec<(f64, f64)> = (0..(cells_y + 1) * (cells_x + 1))
        .map(|_| {
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            (a.cos(), a.sin())
        })
        .collect();
    let g = |gy: usize, gx: usize| grads[gy * (cells_x + 1) + gx];
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let v = (y * cells_y) as f64 / height as f64;
        let y0 = v.floor() as usize;
        let fy = v - y0 as f64;
        for x in 0..width {
            let u = (x * cells_x) as f64 / width as f64;
            let x0 = u.floor() as usize;
            let fx = u - x0 as f64;
            let dot = |gy: usize, gx: usize, dy: f64, dx: f64| {
                let (cx, cy) = g(gy, gx);
                cx * dx + cy * dy
            };
            let n00 = dot(y0, x0, fy, fx);
            let n01 = dot(y0, x0 + 1, fy, fx - 1.0);
            let n10 = dot(y0 + 1, x0, fy - 1.0, fx);
            let n11 = dot(y0 + 1, x0 + 1, fy - 1.0, fx - 1.0);
            let (sx, sy) = (fade(fx), fade(fy));
            let value = SQRT_2 * lerp(lerp(n00, n01, sx), lerp(n10, n11, sx), sy);
            out.push(value.clamp(-1.0, 1.0));
        }
    }
    out
}

/// Single-octave gradient noise. `cells_x`/`cells_y` lattice cells must divide
/// `width`/`height` so lattice points land exactly on pixels.
pub fn perlin_field<T: Scalar>(height: usize, width: usize, cells_x: usize, cells_y: usize, seed: u64) -> Result<NoiseField<T>> {
    fractal_field(height, width, cells_x, cells_y, 1, seed)
}

/// Normalized sum of `octaves` noise layers, doubling the lattice each time.
pub fn fractal_field<T: Scalar>(
    height: usize,
    width: usize,
    cells_x: usize,
    cells_y: usize,
    octaves: usize,
    seed: u64,
) -> Result<NoiseField<T>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("noise field size {height}x{width}")));
    }
    if !(1..=4).contains(&octaves) {
        return Err(Error::InvalidArgument(format!("octaves must be in 1..=4, got {octaves}")));
    }
    let top = 1usize << (octaves - 1);
    for (cells, size, axis) in [(cells_x, width, "x"), (cells_y, height, "y")] {
        if cells == 0 || size % (cells * top) != 0 {
            return Err(Error::InvalidArgument(format!(
                "{cells} lattice cells (x{top} octaves) along {axis} do not divide {size} pixels"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; height * width];
    let mut norm = 0.0;
    for o in 0..octaves {
        let amp = 0.5f64.powi(o as i32);
        let layer = gradient_noise(height, width, cells_y << o, cells_x << o, &mut rng);
        for (a, v) in acc.iter_mut().zip(layer) {
            *a += amp * v;
        }
        norm += amp;
    }
    Ok(NoiseField {
        height,
        width,
        cells: (cells_y, cells_x),
        octaves,
        values: acc.into_iter().map(|v| T::of((v / norm).clamp(-1.0, 1.0))).collect(),
    })
}

/// `mask = field > threshold`.
pub fn threshold_field<T: Scalar>(field: &NoiseField<T>, threshold: T) -> MaskMap {
    BinaryMask::from_fn(field.height, field.width, |y, x| field.get(y, x) > threshold)
}

/// Nearest-rank quantile of the field values, `q` in `[0, 1]`.
pub fn field_quantile<T: Scalar>(field: &NoiseField<T>, q: f64) -> T {
    let mut sorted = field.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite noise"));
    let idx = ((sorted.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    sorted[idx]
}

/// Threshold drawn for `seed`: the field quantile at a level uniform in `quantiles`.
pub fn draw_threshold<T: Scalar>(field: &NoiseField<T>, quantiles: (f64, f64), seed: u64) -> T {
    let q = ChaCha8Rng::seed_from_u64(seed).random_range(quantiles.0..=quantiles.1);
    field_quantile(field, q)
}

/// Random-quantile binarization of a noise field.
pub fn binarize<T: Scalar>(field: &NoiseField<T>, quantiles: (f64, f64), seed: u64) -> MaskMap {
    threshold_field(field, draw_threshold(field, quantiles, seed))
}

/// Per-pixel uniform random colours for `seed`.
pub fn random_texture<T: Scalar>(channels: usize, height: usize, width: usize, seed: u64) -> Image<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(channels, height, width, |_, _, _| T::of(rng.random::<f64>()))
}

/// `x_n = (1 - opacity) x + opacity r` inside `m`, `x` elsewhere.
pub fn compose<T: Scalar>(x: &Image<T>, m: &MaskMap, opacity: f64, seed: u64) -> Result<Image<T>> {
    if x.dims() != m.dims() {
        return Err(Error::shape(format!("compose: image {:?} vs mask {:?}", x.dims(), m.dims())));
    }
    if !(opacity > 0.0 && opacity <= 1.0) {
        return Err(Error::InvalidArgument(format!("opacity {opacity} outside (0, 1]")));
    }
    let r = random_texture::<T>(x.channels(), x.height(), x.width(), seed);
    let (beta, keep) = (T::of(opacity), T::of(1.0 - opacity));
    Ok(Image::from_fn(x.channels(), x.height(), x.width(), |c, y, xx| {
        if m.get(y, xx) {
            keep * x.get(c, y, xx) + beta * r.get(c, y, xx)
        } else {
            x.get(c, y, xx)
        }
    }))
}

/// Knobs of the anomaly simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Lattice cells per axis are `2^k` with `k` drawn uniformly from this range.
    pub cell_exponents: (u32, u32),
    /// Fractal octaves; 1 is plain gradient noise.
    pub octaves: usize,
    /// Threshold quantile range.
    pub quantiles: (f64, f64),
    pub opacity: (f64, f64),
    /// Probability of emitting an uncorrupted triplet.
    pub p_clean: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { cell_exponents: (1, 5), octaves: 1, quantiles: (0.60, 0.95), opacity: (0.2, 1.0), p_clean: 0.1 }
    }
}

impl SynthParams {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        let (lo, hi) = self.cell_exponents;
        if lo > hi || lo == 0 || hi > 10 {
            return Err(Error::InvalidKey { key: "synth_cells_min".into(), reason: format!("cell exponent range {lo}..={hi}") });
        }
        if !(1..=4).contains(&self.octaves) {
            return Err(Error::InvalidKey { key: "synth_octaves".into(), reason: format!("must be in 1..=4, got {}", self.octaves) });
        }
        let finest = (1usize << hi) << (self.octaves.max(1) - 1);
        if !resolution.is_multiple_of(finest) {
            return Err(Error::InvalidKey {
                key: "synth_cells_max".into(),
                reason: format!("resolution {resolution} is not divisible by the finest noise lattice ({finest} cells)"),
            });
        }
        let (q0, q1) = self.quantiles;
        if !(0.0..=1.0).contains(&q0) || !(0.0..=1.0).contains(&q1) || q0 > q1 {
            return Err(Error::InvalidKey { key: "synth_quantile_min".into(), reason: format!("quantile range ({q0}, {q1})") });
        }
        let (o0, o1) = self.opacity;
        if !(o0 > 0.0 && o0 <= o1 && o1 <= 1.0) {
            return Err(Error::InvalidKey { key: "synth_opacity_min".into(), reason: format!("opacity range ({o0}, {o1})") });
        }
        if !(0.0..=1.0).contains(&self.p_clean) {
            return Err(Error::InvalidKey { key: "synth_p_clean".into(), reason: format!("must lie in [0, 1], got {}", self.p_clean) });
        }
        Ok(())
    }
}

/// Clean image, corrupted image, ground-truth corruption mask and ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriplet<T> {
    pub x: Image<T>,
    pub x_n: Image<T>,
    pub m: MaskMap,
    pub roi: RoiMask,
}

impl<T: Scalar> TrainingTriplet<T> {
    pub fn clean(x: Image<T>, roi: RoiMask) -> Self {
        let m = BinaryMask::zeros(x.height(), x.width());
        TrainingTriplet { x_n: x.clone(), x, m, roi }
    }

    pub fn is_clean(&self) -> bool {
        self.m.is_empty()
    }
}

/// Noise field, threshold and blend, all derived from `seed`.
pub fn make_triplet<T: Scalar>(x: &Image<T>, roi: &RoiMask, params: &SynthParams, seed: u64) -> Result<TrainingTriplet<T>> {
    if x.dims() != roi.dims() {
        return Err(Error::shape(format!("make_triplet: image {:?} vs roi {:?}", x.dims(), roi.dims())));
    }
    let (h, w) = x.dims();
    if h != w {
        return Err(Error::shape(format!("make_triplet expects square images, got {h}x{w}")));
    }
    params.validate(h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = rng.random::<f64>() < params.p_clean;
    let (lo, hi) = params.cell_exponents;
    let kx = rng.random_range(lo..=hi);
    let ky = rng.random_range(lo..=hi);
    let field_seed = rng.random::<u64>();
    let threshold_seed = rng.random::<u64>();
    let opacity = rng.random_range(params.opacity.0..=params.opacity.1);
    let texture_seed = rng.random::<u64>();
    if clean {
        return Ok(TrainingTriplet::clean(x.clone(), roi.clone()));
    }
    let field = fractal_field::<T>(h, w, 1 << kx, 1 << ky, params.octaves, field_seed)?;
    let m = binarize(&field, params.quantiles, threshold_seed);
    if m.is_empty() {
        return Ok(TrainingTriplet::clean(x.clone(), roi.clone()));
    }
    let x_n = compose(x, &m, opacity, texture_seed)?;
    Ok(TrainingTriplet { x: x.clone(), x_n, m, roi: roi.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn zero_on_lattice_points() {
        for &(cx, cy) in &[(2, 4), (8, 8), (32, 16), (1, 1)] {
            let f = perlin_field::<f64>(64, 64, cx, cy, 5).unwrap();
            for y in (0..64).step_by(64 / cy) {
                for x in (0..64).step_by(64 / cx) {
                    assert_eq!(f.get(y, x), 0.0, "cells ({cx},{cy}) at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = perlin_field::<f32>(32, 48, 4, 8, 11).unwrap();
        let b = perlin_field::<f32>(32, 48, 4, 8, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, perlin_field::<f32>(32, 48, 4, 8, 12).unwrap());
        assert!(a.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn non_divisor_lattice_is_rejected() {
        assert!(perlin_field::<f64>(64, 64, 3, 4, 0).is_err());
        assert!(perlin_field::<f64>(64, 60, 8, 4, 0).is_err());
        assert!(fractal_field::<f64>(64, 64, 32, 32, 3, 0).is_err());
    }

    // Per lattice unit the noise changes at most `LIPSCHITZ`; one pixel step is
    // `cells / size` lattice units. Brute-force scan of 300 seeds x 6 lattice
    // sizes on 64x64 fields peaked at 2.88.
    const LIPSCHITZ: f64 = 3.0;

    #[test]
    fn adjacent_pixel_steps_scale_with_lattice_density() {
        for &cells in &[1usize, 2, 4, 8, 16, 32] {
            let f = perlin_field::<f64>(64, 64, cells, cells, 3).unwrap();
            let mut worst = 0.0f64;
            for y in 0..64 {
                for x in 0..64 {
                    if x + 1 < 64 {
                        worst = worst.max((f.get(y, x + 1) - f.get(y, x)).abs());
                    }
                    if y + 1 < 64 {
                        worst = worst.max((f.get(y + 1, x) - f.get(y, x)).abs());
                    }
                }
            }
            let bound = LIPSCHITZ * cells as f64 / 64.0;
            assert!(worst <= bound, "cells {cells}: step {worst} exceeds {bound}");
        }
    }

    #[test]
    fn fractal_keeps_base_lattice_zeros() {
        let f = fractal_field::<f64>(64, 64, 4, 4, 3, 1).unwrap();
        for y in (0..64).step_by(16) {
            for x in (0..64).step_by(16) {
                assert_eq!(f.get(y, x), 0.0);
            }
        }
    }

    #[test]
    fn threshold_extremes() {
        let f = perlin_field::<f64>(32, 32, 4, 4, 2).unwrap();
        assert!(threshold_field(&f, f.max() + 1e-9).is_empty());
        assert!(threshold_field(&f, f.min() - 1e-9).is_full());
    }

    #[test]
    fn binarized_count_matches_recount() {
        let f = perlin_field::<f64>(64, 64, 8, 4, 21).unwrap();
        let t = draw_threshold(&f, (0.6, 0.95), 77);
        let m = binarize(&f, (0.6, 0.95), 77);
        let recount = f.values().iter().filter(|&&v| v > t).count();
        assert_eq!(m.count(), recount);
        assert!(recount > 0 && recount < 64 * 64 / 2);
    }

    #[test]
    fn compose_identity_and_endpoints() {
        let x = Image::<f64>::from_fn(3, 8, 8, |c, y, x| ((c + y + x) % 5) as f64 / 4.0);
        let empty = BinaryMask::zeros(8, 8);
        assert_eq!(compose(&x, &empty, 0.7, 1).unwrap(), x);

        let full = BinaryMask::ones(8, 8);
        let r = random_texture::<f64>(3, 8, 8, 9);
        let opaque = compose(&x, &full, 1.0, 9).unwrap();
        assert_eq!(opaque, r);

        let black = Image::<f64>::filled(3, 8, 8, 0.0);
        let half = compose(&black, &full, 0.5, 9).unwrap();
        // Hand-recomputed blend of one pixel: 0.5 * 0 + 0.5 * r
        assert_eq!(half.get(1, 3, 4), 0.5 * r.get(1, 3, 4));
    }

    #[test]
    fn all_clean_when_p_clean_is_one() {
        let x = Image::<f32>::filled(3, 32, 32, 0.5);
        let roi = BinaryMask::ones(32, 32);
        let params = SynthParams { p_clean: 1.0, ..SynthParams::default() };
        for seed in 0..20 {
            let t = make_triplet(&x, &roi, &params, seed).unwrap();
            assert!(t.is_clean());
            assert_eq!(t.x_n, t.x);
        }
    }

    #[test]
    fn triplets_are_pixel_consistent() {
        let x = Image::<f32>::from_fn(3, 32, 32, |c, y, x| ((c * 7 + y * 3 + x) % 13) as f32 / 12.0);
        let roi = BinaryMask::ones(32, 32);
        let params = SynthParams { p_clean: 0.0, ..SynthParams::default() };
        for seed in 0..30 {
            let t = make_triplet(&x, &roi, &params, seed).unwrap();
            assert_eq!(t, make_triplet(&x, &roi, &params, seed).unwrap());
            for c in 0..3 {
                for y in 0..32 {
                    for xx in 0..32 {
                        if !t.m.get(y, xx) {
                            assert_eq!(t.x_n.get(c, y, xx), t.x.get(c, y, xx));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn clean_fraction_tracks_p_clean() {
        let x = Image::<f32>::filled(1, 32, 32, 0.3);
        let roi = BinaryMask::ones(32, 32);
        let params = SynthParams { p_clean: 0.5, ..SynthParams::default() };
        let clean = (0..1000).filter(|&s| make_triplet(&x, &roi, &params, s).unwrap().is_clean()).count();
        let frac = clean as f64 / 1000.0;
        assert!((frac - 0.5).abs() <= 0.05, "clean fraction {frac}");
    }

    #[test]
    fn masks_vary_across_seeds() {
        let x = Image::<f32>::filled(3, 64, 64, 0.5);
        let roi = BinaryMask::ones(64, 64);
        let params = SynthParams { p_clean: 0.0, ..SynthParams::default() };
        let counts: HashSet<usize> = (0..100).map(|s| make_triplet(&x, &roi, &params, s).unwrap().m.count()).collect();
        assert!(counts.len() >= 10, "only {} distinct mask areas", counts.len());
    }
}
