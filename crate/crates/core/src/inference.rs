//! Scoring and localization of new images.

use std::fs;
use std::path::{Path, PathBuf};

use grdnet_tensor::Scalar;

use crate::dataset_io::{load_sample, DatasetIndex, LoadConfig};
use crate::error::{Error, Result};
use crate::networks::{forward_pipeline, NetworkBundle};
use crate::raster::{jet, Heatmap, Image, MaskMap, RoiMask};

pub const DEFAULT_KERNEL: usize = 21;
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferOptions {
    /// Localization threshold on the smoothed probability.
    pub tau: f64,
    /// Side of the mean filter; odd.
    pub kernel: usize,
    /// Take the max score over ROI pixels only.
    pub score_within_roi: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { tau: DEFAULT_TAU, kernel: DEFAULT_KERNEL, score_within_roi: false }
    }
}

#[derive(Clone, Debug)]
pub struct AnomalyResult<T> {
    pub x_hat: Image<T>,
    pub heat_raw: Heatmap<T>,
    pub heat_smooth: Heatmap<T>,
    pub score: f64,
    pub localization: MaskMap,
}

/// Reflect-101 index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// `k x k` mean filter with reflected borders, computed from a summed-area table.
pub fn smooth<T: Scalar>(heat: &Heatmap<T>, k: usize) -> Result<Heatmap<T>> {
    let (h, w) = heat.dims();
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("smoothing kernel must be odd, got {k}")));
    }
    if k > h.min(w) {
        return Err(Error::InvalidArgument(format!("smoothing kernel {k} exceeds heat map {h}x{w}")));
    }
    let r = (k / 2) as isize;
    let (ph, pw) = (h + 2 * r as usize, w + 2 * r as usize);
    let mut sat = vec![0.0f64; (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let sy = reflect(y as isize - r, h);
        let mut row = 0.0;
        for x in 0..pw {
            let sx = reflect(x as isize - r, w);
            row += heat.get(sy, sx).to_f64_lossy();
            sat[(y + 1) * (pw + 1) + x + 1] = sat[y * (pw + 1) + x + 1] + row;
        }
    }
    let area = (k * k) as f64;
    Ok(Heatmap::from_fn(h, w, |y, x| {
        let at = |yy: usize, xx: usize| sat[yy * (pw + 1) + xx];
        let s = at(y + k, x + k) - at(y, x + k) - at(y + k, x) + at(y, x);
        T::of(s / area)
    }))
}

/// `(heat > tau)`, gated by the ROI when one is given.
pub fn localize<T: Scalar>(heat: &Heatmap<T>, tau: f64, roi: Option<&RoiMask>) -> MaskMap {
    let above = heat.above(T::of(tau));
    match roi {
        Some(r) => above.and(r),
        None => above,
    }
}

/// Maximum of the smoothed map, optionally restricted to the ROI (0 for an empty ROI).
pub fn score<T: Scalar>(heat: &Heatmap<T>, roi: Option<&RoiMask>, within_roi: bool) -> f64 {
    match roi {
        Some(r) if within_roi => {
            let (h, w) = heat.dims();
            let mut best = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    if r.get(y, x) {
                        best = best.max(heat.get(y, x).to_f64_lossy());
                    }
                }
            }
            best
        }
        _ => heat.max().to_f64_lossy(),
    }
}

/// Post-processing shared by [`infer`] and tests with synthetic heat maps.
pub fn postprocess<T: Scalar>(heat_raw: &Heatmap<T>, roi: Option<&RoiMask>, opts: &InferOptions) -> Result<(Heatmap<T>, f64, MaskMap)> {
    if let Some(r) = roi {
        if r.dims() != heat_raw.dims() {
            return Err(Error::shape(format!("roi {:?} vs heat map {:?}", r.dims(), heat_raw.dims())));
        }
    }
    let heat_smooth = smooth(heat_raw, opts.kernel)?;
    let s = score(&heat_smooth, roi, opts.score_within_roi);
    let loc = localize(&heat_smooth, opts.tau, roi);
    Ok((heat_smooth, s, loc))
}

pub fn infer<T: Scalar>(
    bundle: &mut NetworkBundle<T>,
    x: &Image<T>,
    roi: Option<&RoiMask>,
    opts: &InferOptions,
) -> Result<AnomalyResult<T>> {
    let res = bundle.config.resolution;
    if x.dims() != (res, res) || x.channels() != bundle.config.channels {
        return Err(Error::shape(format!(
            "image is {}x{}x{}, model expects {}x{res}x{res}",
            x.channels(),
            x.height(),
            x.width(),
            bundle.config.channels
        )));
    }
    let out = forward_pipeline(bundle, &Image::batch(&[x])?)?;
    let heat_raw = Heatmap::from_tensor(&out.heat, 0);
    let (heat_smooth, score, localization) = postprocess(&heat_raw, roi, opts)?;
    Ok(AnomalyResult { x_hat: Image::from_tensor(&out.x_hat, 0), heat_raw, heat_smooth, score, localization })
}

/// Scored test image joined with its label and masks.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub id: String,
    pub path: PathBuf,
    pub class: String,
    pub label: bool,
    pub score: f64,
    pub heat_smooth: Heatmap<f64>,
    pub localization: MaskMap,
    pub gt: Option<MaskMap>,
    pub roi: Option<RoiMask>,
}

#[derive(Clone, Debug)]
pub struct FailedItem {
    pub id: String,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub enum InferRow {
    Scored(EvalRecord),
    Failed(FailedItem),
}

impl InferRow {
    pub fn record(&self) -> Option<&EvalRecord> {
        match self {
            InferRow::Scored(r) => Some(r),
            InferRow::Failed(_) => None,
        }
    }
}

/// Scores every entry of `index` in order. Per-item failures become
/// [`InferRow::Failed`] rows instead of aborting the batch.
pub fn batch_infer<T: Scalar>(
    bundle: &mut NetworkBundle<T>,
    index: &DatasetIndex,
    load: &LoadConfig,
    opts: &InferOptions,
) -> Vec<InferRow> {
    index
        .entries
        .iter()
        .map(|entry| {
            let item = load_sample::<T>(entry, load).and_then(|s| {
                let roi = entry.roi.as_ref().map(|_| s.roi.clone());
                let r = infer(bundle, &s.image, roi.as_ref(), opts)?;
                Ok(EvalRecord {
                    id: entry.id(),
                    path: entry.image.clone(),
                    class: entry.label.class().to_string(),
                    label: entry.label.is_defect(),
                    score: r.score,
                    heat_smooth: Heatmap::from_fn(load.resolution, load.resolution, |y, x| r.heat_smooth.get(y, x).to_f64_lossy()),
                    localization: r.localization,
                    gt: s.gt,
                    roi,
                })
            });
            match item {
                Ok(rec) => InferRow::Scored(rec),
                Err(e) => InferRow::Failed(FailedItem { id: entry.id(), path: entry.image.clone(), reason: e.to_string() }),
            }
        })
        .collect()
}

/// Jet-coloured heat map blended over the input, display only.
pub fn overlay<T: Scalar>(x: &Image<T>, heat: &Heatmap<T>) -> Image<f64> {
    let norm = heat.normalized();
    Image::from_fn(3, x.height(), x.width(), |c, y, xx| {
        let col = jet(norm.get(y, xx).to_f64_lossy());
        let src = x.get(c.min(x.channels() - 1), y, xx).to_f64_lossy();
        0.5 * src + 0.5 * col[c] as f64 / 255.0
    })
}

fn safe_name(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

/// Writes heat and localization PNGs per record and `scores.csv`
/// (`path, score, label`, plus failed rows with an empty score).
pub fn write_outputs(out_dir: &Path, rows: &[InferRow]) -> Result<()> {
    let heat_dir = out_dir.join("heatmaps");
    let loc_dir = out_dir.join("localization");
    for d in [&heat_dir, &loc_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let csv_path = out_dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
    w.write_record(["path", "score", "label", "status"]).map_err(|e| Error::csv(&csv_path, e))?;
    for row in rows {
        match row {
            InferRow::Scored(r) => {
                let name = safe_name(&r.id);
                r.heat_smooth.save(&heat_dir.join(format!("{name}.png")))?;
                r.localization.save(&loc_dir.join(format!("{name}.png")))?;
                let label = if r.label { "1" } else { "0" };
                w.write_record([r.path.display().to_string(), format!("{}", r.score), label.to_string(), "ok".to_string()])
                    .map_err(|e| Error::csv(&csv_path, e))?;
            }
            InferRow::Failed(f) => {
                log::warn!("{}: {}", f.path.display(), f.reason);
                w.write_record([f.path.display().to_string(), String::new(), String::new(), format!("failed: {}", f.reason)])
                    .map_err(|e| Error::csv(&csv_path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}
