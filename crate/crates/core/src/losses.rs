//! Training objectives. Every loss is built on the autodiff graph so the same
//! code drives training and the plain-value helpers used by tests and reports.

use grdnet_tensor::{Axis, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-7;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Weights of the reconstruction and segmentation objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// L1 share of the contextual loss.
    pub omega_a: f64,
    /// `1 - SSIM` share of the contextual loss.
    pub omega_b: f64,
    pub omega_adv: f64,
    pub omega_con: f64,
    pub omega_enc: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// Overlap-distance weight, in `[0, 1]`.
    pub overlap_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { omega_a: 1.0, omega_b: 1.0, omega_adv: 1.0, omega_con: 50.0, omega_enc: 1.0, gamma: 2.0, overlap_w: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("omega_a", self.omega_a),
            ("omega_b", self.omega_b),
            ("omega_adv", self.omega_adv),
            ("omega_con", self.omega_con),
            ("omega_enc", self.omega_enc),
            ("gamma", self.gamma),
            ("overlap_w", self.overlap_w),
        ];
        for (key, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidKey { key: key.into(), reason: format!("must be a finite non-negative number, got {v}") });
            }
        }
        if self.overlap_w > 1.0 {
            return Err(Error::InvalidKey { key: "overlap_w".into(), reason: format!("must lie in [0, 1], got {}", self.overlap_w) });
        }
        Ok(())
    }
}

/// Scalar losses of one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub adv: f64,
    pub con: f64,
    pub enc: f64,
    pub gan_total: f64,
    pub focal: f64,
    pub total: f64,
    /// Discriminator objective; not part of `total`.
    pub disc: f64,
}

impl LossReport {
    pub fn new(adv: f64, con: f64, enc: f64, focal: f64, disc: f64, w: &LossWeights) -> Self {
        let gan_total = gan_loss(adv, con, enc, w);
        LossReport { adv, con, enc, gan_total, focal, total: gan_total + focal, disc }
    }

    pub fn is_finite(&self) -> bool {
        [self.adv, self.con, self.enc, self.gan_total, self.focal, self.total, self.disc].iter().all(|v| v.is_finite())
    }
}

/// Discriminative-loss variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossCase {
    /// Focal on the raw prediction plus overlap with the ROI.
    FocalPlusOverlap = 1,
    /// Focal on the ROI-intersected prediction.
    RoiFocal = 2,
    /// `RoiFocal` plus overlap with the ROI.
    RoiFocalPlusOverlap = 3,
    /// `RoiFocal` plus overlap with the ROI complement.
    RoiFocalPlusComplementOverlap = 4,
}

impl LossCase {
    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            1 => Ok(LossCase::FocalPlusOverlap),
            2 => Ok(LossCase::RoiFocal),
            3 => Ok(LossCase::RoiFocalPlusOverlap),
            4 => Ok(LossCase::RoiFocalPlusComplementOverlap),
            _ => Err(Error::InvalidKey { key: "loss_case".into(), reason: format!("must be 1, 2, 3 or 4, got {id}") }),
        }
    }

    pub fn id(self) -> u32 {
        self as u32
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn blur<'g, T: Scalar>(x: Var<'g, T>, taps: &[T]) -> Var<'g, T> {
    x.filter(taps, Axis::Height).filter(taps, Axis::Width)
}

/// Mean SSIM over batch, channels and valid window positions.
pub fn ssim_var<'g, T: Scalar>(x: Var<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(&x.shape(), &y.shape(), "ssim")?;
    let (_, _, h, w) = x.value().dims4();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let taps: Vec<T> = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::of).collect();
    let mu_x = blur(x, &taps);
    let mu_y = blur(y, &taps);
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(mu_y);
    let s_xx = blur(x.square(), &taps).sub(mu_xx);
    let s_yy = blur(y.square(), &taps).sub(mu_yy);
    let s_xy = blur(x.mul(y), &taps).sub(mu_xy);
    let (c1, c2) = (T::of(SSIM_C1), T::of(SSIM_C2));
    let num = mu_xy.scale(T::of(2.0)).add_scalar(c1).mul(s_xy.scale(T::of(2.0)).add_scalar(c2));
    let den = mu_xx.add(mu_yy).add_scalar(c1).mul(s_xx.add(s_yy).add_scalar(c2));
    Ok(num.div(den).mean())
}

/// `omega_a * mean|x - x_hat| + omega_b * (1 - SSIM(x, x_hat))`
pub fn contextual_var<'g, T: Scalar>(x: Var<'g, T>, x_hat: Var<'g, T>, omega_a: f64, omega_b: f64) -> Result<Var<'g, T>> {
    same_shape(&x.shape(), &x_hat.shape(), "contextual loss")?;
    let l1 = x.sub(x_hat).abs().mean().scale(T::of(omega_a));
    if omega_b == 0.0 {
        return Ok(l1);
    }
    let structural = ssim_var(x, x_hat)?.one_minus().scale(T::of(omega_b));
    Ok(l1.add(structural))
}

/// Discriminator objective from raw logits: binary cross-entropy with real
/// target for `real` and fake target for `fake`, each averaged over the batch
/// and then summed.
pub fn discriminator_var<'g, T: Scalar>(real_logits: Var<'g, T>, fake_logits: Var<'g, T>) -> Var<'g, T> {
    real_logits.neg().softplus().mean().add(fake_logits.softplus().mean())
}

/// Feature matching between discriminator features of real and generated images.
pub fn feature_matching_var<'g, T: Scalar>(real_features: Var<'g, T>, fake_features: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(&real_features.shape(), &fake_features.shape(), "feature matching")?;
    Ok(real_features.sub(fake_features).square().mean())
}

/// Mean squared latent distance.
pub fn encoder_var<'g, T: Scalar>(z: Var<'g, T>, z_hat: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(&z.shape(), &z_hat.shape(), "encoder loss")?;
    Ok(z.sub(z_hat).square().mean())
}

pub fn gan_loss(adv: f64, con: f64, enc: f64, w: &LossWeights) -> f64 {
    w.omega_adv * adv + w.omega_con * con + w.omega_enc * enc
}

pub fn gan_var<'g, T: Scalar>(adv: Var<'g, T>, con: Var<'g, T>, enc: Var<'g, T>, w: &LossWeights) -> Var<'g, T> {
    adv.scale(T::of(w.omega_adv)).add(con.scale(T::of(w.omega_con))).add(enc.scale(T::of(w.omega_enc)))
}

/// Pixel-averaged focal loss of anomaly probabilities `p` against binary `target`.
pub fn focal_var<'g, T: Scalar>(p: Var<'g, T>, target: &Tensor<T>, gamma: f64) -> Result<Var<'g, T>> {
    same_shape(&p.shape(), target.shape(), "focal loss")?;
    let g = p.graph();
    let sign = g.constant(target.map(|m| m + m - T::one()));
    let offset = g.constant(target.map(|m| T::one() - m));
    let eps = T::of(PROB_EPS);
    let p_t = p.mul(sign).add(offset).clamp(eps, T::one() - eps);
    let ce = p_t.ln().neg();
    let per_pixel = if gamma == 0.0 { ce } else { p_t.one_minus().powf(T::of(gamma)).mul(ce) };
    Ok(per_pixel.mean())
}

/// `I = A * ROI`
pub fn intersect_roi_var<'g, T: Scalar>(a: Var<'g, T>, roi: &Tensor<T>) -> Result<Var<'g, T>> {
    same_shape(&a.shape(), roi.shape(), "intersect_roi")?;
    Ok(a.mul(a.graph().constant(roi.clone())))
}

/// Batch mean of `w * (1 - sum(A * R) / min(sum A, sum R))` with soft masses.
/// A sample whose smaller mass is zero scores `w`.
pub fn overlap_var<'g, T: Scalar>(a: Var<'g, T>, region: &Tensor<T>, w: f64) -> Result<Var<'g, T>> {
    same_shape(&a.shape(), region.shape(), "overlap loss")?;
    let g = a.graph();
    let r = g.constant(region.clone());
    let inter = a.mul(r).sum_per_sample();
    let mass = a.sum_per_sample().minimum(r.sum_per_sample());
    // Intersection never exceeds the smaller mass, so a zero mass gives a
    // zero numerator and the ratio collapses to 0.
    let ratio = inter.div(mass.clamp(T::of(1e-12), T::max_value()));
    Ok(ratio.one_minus().scale(T::of(w)).mean())
}

/// Segmentation objective for the selected ablation case.
pub fn discriminative_var<'g, T: Scalar>(
    case: LossCase,
    a: Var<'g, T>,
    roi: &Tensor<T>,
    m: &Tensor<T>,
    w: f64,
    gamma: f64,
) -> Result<Var<'g, T>> {
    match case {
        LossCase::FocalPlusOverlap => Ok(focal_var(a, m, gamma)?.add(overlap_var(a, roi, w)?)),
        LossCase::RoiFocal => focal_var(intersect_roi_var(a, roi)?, m, gamma),
        LossCase::RoiFocalPlusOverlap => Ok(focal_var(intersect_roi_var(a, roi)?, m, gamma)?.add(overlap_var(a, roi, w)?)),
        LossCase::RoiFocalPlusComplementOverlap => {
            let outside = roi.map(|v| T::one() - v);
            Ok(focal_var(intersect_roi_var(a, roi)?, m, gamma)?.add(overlap_var(a, &outside, w)?))
        }
    }
}

fn eval<T: Scalar>(f: impl for<'g> FnOnce(&'g Graph<T>) -> Result<Var<'g, T>>) -> Result<f64> {
    let g = Graph::new();
    Ok(f(&g)?.item().to_f64_lossy())
}

pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    eval(|g| ssim_var(g.constant(x.clone()), g.constant(y.clone())))
}

pub fn contextual_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>, omega_a: f64, omega_b: f64) -> Result<f64> {
    eval(|g| contextual_var(g.constant(x.clone()), g.constant(x_hat.clone()), omega_a, omega_b))
}

pub fn discriminator_loss<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> f64 {
    eval(|g| Ok(discriminator_var(g.constant(real_logits.clone()), g.constant(fake_logits.clone())))).expect("infallible")
}

pub fn feature_matching_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<f64> {
    eval(|g| feature_matching_var(g.constant(real.clone()), g.constant(fake.clone())))
}

pub fn encoder_loss<T: Scalar>(z: &Tensor<T>, z_hat: &Tensor<T>) -> Result<f64> {
    eval(|g| encoder_var(g.constant(z.clone()), g.constant(z_hat.clone())))
}

pub fn focal_loss<T: Scalar>(p: &Tensor<T>, target: &Tensor<T>, gamma: f64) -> Result<f64> {
    eval(|g| focal_var(g.constant(p.clone()), target, gamma))
}

pub fn intersect_roi<T: Scalar>(a: &Tensor<T>, roi: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a.shape(), roi.shape(), "intersect_roi")?;
    Ok(a.zip_map(roi, |p, r| p * r))
}

pub fn overlap_loss<T: Scalar>(a: &Tensor<T>, roi: &Tensor<T>, w: f64) -> Result<f64> {
    eval(|g| overlap_var(g.constant(a.clone()), roi, w))
}

/// `gan + FL(I, m)`
pub fn total_loss<T: Scalar>(gan: f64, intersection: &Tensor<T>, m: &Tensor<T>, gamma: f64) -> Result<f64> {
    Ok(gan + focal_loss(intersection, m, gamma)?)
}

pub fn discriminative_loss<T: Scalar>(case: LossCase, a: &Tensor<T>, roi: &Tensor<T>, m: &Tensor<T>, w: f64, gamma: f64) -> Result<f64> {
    eval(|g| discriminative_var(case, g.constant(a.clone()), roi, m, w, gamma))
}
