//! Image- and pixel-level AUROC, best accuracy, and report files.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::inference::EvalRecord;
use crate::trainer::EpochRecord;

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).expect("scores must not be NaN")
}

/// Rank-based AUROC with mid-ranks for ties: the probability that a random
/// positive outranks a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp_f64(&scores[a], &scores[b]));
    // Twice the rank sum of positives keeps mid-ranks integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_pos += mid2 * pos;
        i = j + 1;
    }
    let np = n_pos as u128;
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// AUROC over all pixels of all records pooled; records without a ground
/// truth count as all-background.
pub fn pixel_auroc(records: &[EvalRecord]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        let (h, w) = r.heat_smooth.dims();
        if let Some(gt) = &r.gt {
            if gt.dims() != (h, w) {
                return Err(Error::shape(format!("{}: ground truth {:?} vs heat map {:?}", r.id, gt.dims(), (h, w))));
            }
        } else if r.label {
            return Err(Error::UndefinedMetric(format!("{}: defect image without pixel ground truth", r.id)));
        }
        scores.extend_from_slice(r.heat_smooth.data());
        match &r.gt {
            Some(gt) => labels.extend(gt.bits().iter().map(|&b| b != 0)),
            None => labels.extend(std::iter::repeat_n(false, h * w)),
        }
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::UndefinedMetric("no anomalous pixels in the ground truth".into()));
    }
    auroc(&scores, &labels)
}

/// Fraction of images classified correctly when `score > theta` means defect.
pub fn accuracy(scores: &[f64], labels: &[bool], theta: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("accuracy over {} scores and {} labels", scores.len(), labels.len())));
    }
    if !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold {theta}")));
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| (s > theta) == l).count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Candidate thresholds: below the minimum, midpoints of distinct neighbours, the maximum.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(cmp_f64);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    if let (Some(&lo), Some(&hi)) = (s.first(), s.last()) {
        out.push(lo - 1.0);
        out.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out.push(hi);
    }
    out
}

/// Threshold maximizing accuracy (lowest such threshold on ties), via one sorted sweep.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("threshold search over {} scores and {} labels", scores.len(), labels.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp_f64(&scores[a], &scores[b]));
    let n = scores.len();
    // Everything above the first candidate is called a defect.
    let mut correct = labels.iter().filter(|&&l| l).count();
    let candidates = threshold_candidates(scores);
    let mut best = (candidates[0], correct);
    let mut i = 0;
    for &theta in &candidates[1..] {
        while i < n && scores[order[i]] <= theta {
            if labels[order[i]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        if correct > best.1 {
            best = (theta, correct);
        }
    }
    Ok((best.0, best.1 as f64 / n as f64))
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub split: String,
    pub class: String,
    pub auroc_image: Option<f64>,
    pub auroc_pixel: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_images: usize,
    pub n_defects: usize,
}

pub const METRICS_HEADER: [&str; 7] = ["split", "class", "auroc_image", "auroc_pixel", "accuracy", "n_images", "n_defects"];

fn metric_text(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| "n/a".into())
}

fn parse_metric(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "n/a" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad metric value `{s}`"))
    }
}

pub fn metrics_for(split: &str, class: &str, records: &[&EvalRecord]) -> MetricsRow {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    let owned: Vec<EvalRecord> = records.iter().map(|&r| r.clone()).collect();
    MetricsRow {
        split: split.into(),
        class: class.into(),
        auroc_image: auroc(&scores, &labels).ok(),
        auroc_pixel: pixel_auroc(&owned).ok(),
        accuracy: best_threshold(&scores, &labels).ok().map(|(_, a)| a),
        n_images: records.len(),
        n_defects: labels.iter().filter(|&&l| l).count(),
    }
}

/// Overall row plus one row per defect class (that class against all good images).
pub fn metrics_table(split: &str, records: &[EvalRecord]) -> Vec<MetricsRow> {
    let all: Vec<&EvalRecord> = records.iter().collect();
    let mut rows = vec![metrics_for(split, "all", &all)];
    let mut classes: Vec<&str> = records.iter().filter(|r| r.label).map(|r| r.class.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let subset: Vec<&EvalRecord> = records.iter().filter(|r| !r.label || r.class == class).collect();
        rows.push(metrics_for(split, class, &subset));
    }
    rows
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            r.split.clone(),
            r.class.clone(),
            metric_text(r.auroc_image),
            metric_text(r.auroc_pixel),
            metric_text(r.accuracy),
            r.n_images.to_string(),
            r.n_defects.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Dataset(format!("{}: unexpected metrics header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let bad = |m: String| Error::Dataset(format!("{}: {m}", path.display()));
        rows.push(MetricsRow {
            split: rec[0].to_string(),
            class: rec[1].to_string(),
            auroc_image: parse_metric(&rec[2]).map_err(bad)?,
            auroc_pixel: parse_metric(&rec[3]).map_err(bad)?,
            accuracy: parse_metric(&rec[4]).map_err(bad)?,
            n_images: rec[5].parse().map_err(|_| bad(format!("bad count `{}`", &rec[5])))?,
            n_defects: rec[6].parse().map_err(|_| bad(format!("bad count `{}`", &rec[6])))?,
        });
    }
    Ok(rows)
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 240;
const MARGIN: u32 = 16;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GOOD: Rgb<u8> = Rgb([46, 139, 87]);
const DEFECT: Rgb<u8> = Rgb([200, 50, 50]);
const VAL: Rgb<u8> = Rgb([40, 90, 200]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, BG);
    for x in MARGIN..PLOT_W - MARGIN {
        img.put_pixel(x, PLOT_H - MARGIN, AXIS);
    }
    for y in MARGIN..=PLOT_H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

/// Good vs defect score histogram over 20 bins.
pub fn score_histogram(records: &[EvalRecord]) -> RgbImage {
    const BINS: usize = 20;
    let mut img = canvas();
    if records.is_empty() {
        return img;
    }
    let lo = records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut counts = [[0usize; BINS]; 2];
    for r in records {
        let b = (((r.score - lo) / span) * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64) as usize;
        counts[r.label as usize][b] += 1;
    }
    let peak = counts.iter().flatten().copied().max().unwrap_or(1).max(1);
    let inner_w = PLOT_W - 2 * MARGIN - 2;
    let bin_w = inner_w / BINS as u32;
    let inner_h = (PLOT_H - 2 * MARGIN - 1) as f64;
    for b in 0..BINS {
        for (cls, colour) in [(0usize, GOOD), (1, DEFECT)] {
            let height = (counts[cls][b] as f64 / peak as f64 * inner_h).round() as u32;
            let x0 = MARGIN + 2 + b as u32 * bin_w + cls as u32 * (bin_w / 2);
            for x in x0..x0 + (bin_w / 2).saturating_sub(1) {
                for y in (PLOT_H - MARGIN - height)..(PLOT_H - MARGIN) {
                    img.put_pixel(x, y, colour);
                }
            }
        }
    }
    img
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), colour: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

/// Training total loss (red) and validation contextual loss (blue), each scaled to its own range.
pub fn loss_curve(history: &[EpochRecord]) -> RgbImage {
    let mut img = canvas();
    if history.len() < 2 {
        return img;
    }
    let series: [(Vec<f64>, Rgb<u8>); 2] =
        [(history.iter().map(|r| r.train.total).collect(), DEFECT), (history.iter().map(|r| r.val_con).collect(), VAL)];
    let inner_w = (PLOT_W - 2 * MARGIN - 2) as f64;
    let inner_h = (PLOT_H - 2 * MARGIN - 2) as f64;
    for (values, colour) in &series {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let point = |i: usize| {
            let x = MARGIN as f64 + 2.0 + inner_w * i as f64 / (values.len() - 1) as f64;
            let y = (PLOT_H - MARGIN) as f64 - 1.0 - inner_h * (values[i] - lo) / span;
            (x, y)
        };
        for i in 1..values.len() {
            draw_line(&mut img, point(i - 1), point(i), *colour);
        }
    }
    img
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub histogram: PathBuf,
    pub loss_curve: Option<PathBuf>,
    pub rows: Vec<MetricsRow>,
}

/// Writes `metrics.csv`, `score_histogram.png` and, with a history, `loss_curve.png`.
pub fn emit_report(records: &[EvalRecord], out_dir: &Path, split: &str, history: Option<&[EpochRecord]>) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = metrics_table(split, records);
    let metrics = out_dir.join("metrics.csv");
    write_metrics_csv(&metrics, &rows)?;
    let save = |img: RgbImage, path: &Path| img.save(path).map_err(|source| Error::Encode { path: path.to_path_buf(), source });
    let histogram = out_dir.join("score_histogram.png");
    save(score_histogram(records), &histogram)?;
    let loss_curve_path = match history {
        Some(h) => {
            let p = out_dir.join("loss_curve.png");
            save(loss_curve(h), &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(ReportFiles { metrics, histogram, loss_curve: loss_curve_path, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BinaryMask, Heatmap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    fn record(id: &str, label: bool, score: f64, heat: Heatmap<f64>, gt: Option<BinaryMask>) -> EvalRecord {
        let (h, w) = heat.dims();
        EvalRecord {
            id: id.into(),
            path: PathBuf::from(id),
            class: if label { "crack".into() } else { "good".into() },
            label,
            score,
            heat_smooth: heat,
            localization: BinaryMask::zeros(h, w),
            gt,
            roi: None,
        }
    }

    #[test]
    fn auroc_basics() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        let s = [0.3, 0.1, 0.7, 0.5, 0.9];
        let l = [false, true, true, false, true];
        let inv: Vec<bool> = l.iter().map(|&b| !b).collect();
        assert!((auroc(&s, &l).unwrap() + auroc(&s, &inv).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_matches_pairwise_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..200).map(|_| (rng.random_range(0..60) as f64) / 10.0).collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.4)).collect();
        assert!((auroc(&scores, &labels).unwrap() - pairwise(&scores, &labels)).abs() < 1e-12);
        let exp: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&exp, &labels).unwrap());
    }

    #[test]
    fn pixel_auroc_properties() {
        let gt = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let exact = Heatmap::from_fn(4, 4, |y, x| if gt.get(y, x) { 1.0 } else { 0.0 });
        let recs = vec![record("a", true, 1.0, exact, Some(gt.clone())), record("b", false, 0.0, Heatmap::filled(4, 4, 0.0), None)];
        assert_eq!(pixel_auroc(&recs).unwrap(), 1.0);
        let flat = vec![record("a", true, 1.0, Heatmap::filled(4, 4, 0.3), Some(gt.clone()))];
        assert_eq!(pixel_auroc(&flat).unwrap(), 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut recs = Vec::new();
        let mut all_s = Vec::new();
        let mut all_l = Vec::new();
        for i in 0..3 {
            let heat = Heatmap::from_fn(4, 4, |_, _| (rng.random_range(0..5) as f64) / 4.0);
            let m = BinaryMask::from_fn(4, 4, |_, _| rng.random_bool(0.3));
            all_s.extend_from_slice(heat.data());
            all_l.extend(m.bits().iter().map(|&b| b != 0));
            recs.push(record(&format!("r{i}"), true, 0.0, heat, Some(m)));
        }
        assert_eq!(pixel_auroc(&recs).unwrap(), pairwise(&all_s, &all_l));
    }

    #[test]
    fn accuracy_and_threshold_search() {
        assert_eq!(accuracy(&[0.2, 0.5, 0.9], &[true, true, true], 0.1).unwrap(), 1.0);
        // Alternating fixture: defects at odd positions, scores increase with index.
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let l = [false, true, false, true, false, true];
        assert_eq!(accuracy(&s, &l, 0.35).unwrap(), 4.0 / 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s: Vec<f64> = (0..30).map(|_| rng.random_range(0..10) as f64).collect();
            let l: Vec<bool> = (0..30).map(|_| rng.random_bool(0.5)).collect();
            let (theta, acc) = best_threshold(&s, &l).unwrap();
            let exhaustive = threshold_candidates(&s).into_iter().map(|t| accuracy(&s, &l, t).unwrap()).fold(0.0, f64::max);
            assert_eq!(acc, exhaustive);
            assert_eq!(accuracy(&s, &l, theta).unwrap(), acc);
        }
        assert!(accuracy(&[], &[], 0.0).is_err());
    }

    #[test]
    fn report_handles_single_class_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record("a", false, 0.2, Heatmap::filled(4, 4, 0.2), None), record("b", false, 0.4, Heatmap::filled(4, 4, 0.4), None)];
        let files = emit_report(&recs, dir.path(), "test", None).unwrap();
        let rows = read_metrics_csv(&files.metrics).unwrap();
        assert_eq!(rows, files.rows);
        assert_eq!(rows[0].auroc_image, None);
        let text = fs::read_to_string(&files.metrics).unwrap();
        assert!(text.contains("n/a"));
    }

    #[test]
    fn plots_are_deterministic() {
        let recs: Vec<EvalRecord> =
            (0..10).map(|i| record(&format!("r{i}"), i % 2 == 0, i as f64 * 0.1, Heatmap::filled(4, 4, 0.0), None)).collect();
        assert_eq!(score_histogram(&recs).into_raw(), score_histogram(&recs).into_raw());
    }
}
