//! MVTec-layout corpus indexing, ROI pairing and rotation augmentation.
//!
//! Expected layout under a dataset root:
//!
//! ```text
//! train/good/*.png
//! test/<class>/*.png           (class "good" for nominal images)
//! ground_truth/<class>/<stem>_mask.png
//! roi/<class>/<stem>.png       (optional, any tree passed to `attach_rois`)
//! ```

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use grdnet_tensor::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, MaskMap, RoiMask};

/// Gray levels within this distance of 0 or 255 count as binary.
pub const MASK_TOLERANCE: u8 = 8;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Good,
    Defect(String),
}

impl Label {
    pub fn is_defect(&self) -> bool {
        matches!(self, Label::Defect(_))
    }

    /// Folder name of the class.
    pub fn class(&self) -> &str {
        match self {
            Label::Good => "good",
            Label::Defect(c) => c,
        }
    }

    fn from_class(class: &str) -> Label {
        if class == "good" {
            Label::Good
        } else {
            Label::Defect(class.to_string())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub image: PathBuf,
    pub roi_path: Option<PathBuf>,
    /// Loaded ROI; `None` means the all-ones default.
    pub roi: Option<RoiMask>,
    pub gt_path: Option<PathBuf>,
    pub label: Label,
    pub split: Split,
}

impl Entry {
    fn new(image: PathBuf, label: Label, split: Split) -> Self {
        Entry { image, roi_path: None, roi: None, gt_path: None, label, split }
    }

    pub fn stem(&self) -> String {
        self.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    /// `<class>/<stem>`, unique within a split.
    pub fn id(&self) -> String {
        format!("{}/{}", self.label.class(), self.stem())
    }

    pub fn roi_mask(&self, size: usize) -> RoiMask {
        self.roi.clone().unwrap_or_else(|| BinaryMask::ones(size, size))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadConfig {
    /// Working resolution; images are resized to `resolution x resolution`.
    pub resolution: usize,
    pub channels: usize,
    /// Share of `train/good` held out as the validation split.
    pub val_fraction: f64,
    /// Fixes the validation hold-out.
    pub seed: u64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig { resolution: 256, channels: 3, val_fraction: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<Entry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for item in read {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for item in read {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn probe_decodable(path: &Path) -> Result<()> {
    image::image_dimensions(path).map(|_| ()).map_err(|source| Error::Decode { path: path.to_path_buf(), source })
}

/// Indices (into a `good` list of length `n`) held out for validation.
fn holdout(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((n as f64) * fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4c49_4441_5445));
    let mut held: Vec<usize> = order.into_iter().take(k).collect();
    held.sort_unstable();
    held
}

/// Builds the index of one split in lexicographic path order.
pub fn load_dataset(root: &Path, split: Split, cfg: &LoadConfig) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config(format!("validation fraction {} outside [0, 1)", cfg.val_fraction)));
    }
    let entries = match split {
        Split::Train | Split::Validation => {
            let dir = root.join("train").join("good");
            if !dir.is_dir() {
                return Err(Error::Config(format!("split directory {} does not exist", dir.display())));
            }
            let files = sorted_images(&dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!("no training images in {}", dir.display())));
            }
            let held = holdout(files.len(), cfg.val_fraction, cfg.seed);
            files
                .into_iter()
                .enumerate()
                .filter(|(i, _)| held.binary_search(i).is_ok() == (split == Split::Validation))
                .map(|(_, p)| Entry::new(p, Label::Good, split))
                .collect::<Vec<_>>()
        }
        Split::Test => {
            let dir = root.join("test");
            if !dir.is_dir() {
                return Err(Error::Config(format!("split directory {} does not exist", dir.display())));
            }
            let mut entries = Vec::new();
            for class_dir in sorted_subdirs(&dir)? {
                let class = class_dir.file_name().unwrap().to_string_lossy().into_owned();
                let label = Label::from_class(&class);
                for path in sorted_images(&class_dir)? {
                    let mut e = Entry::new(path, label.clone(), split);
                    if label.is_defect() {
                        e.gt_path = find_ground_truth(root, &class, &e.stem());
                    }
                    entries.push(e);
                }
            }
            entries
        }
    };
    for e in &entries {
        probe_decodable(&e.image)?;
    }
    Ok(DatasetIndex { root: root.to_path_buf(), split, entries })
}

fn find_ground_truth(root: &Path, class: &str, stem: &str) -> Option<PathBuf> {
    let dir = root.join("ground_truth").join(class);
    [format!("{stem}_mask.png"), format!("{stem}.png")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

/// Pairs every entry with `roi_dir/<class>/<stem>.png` (or `roi_dir/<stem>.png`).
/// A missing `roi_dir`, or a missing file, leaves the all-ones default.
pub fn attach_rois(mut index: DatasetIndex, roi_dir: Option<&Path>, size: usize) -> Result<DatasetIndex> {
    let Some(dir) = roi_dir.filter(|d| d.is_dir()) else {
        for e in &mut index.entries {
            e.roi_path = None;
            e.roi = None;
        }
        return Ok(index);
    };
    for e in &mut index.entries {
        let stem = e.stem();
        let candidates = [dir.join(e.label.class()).join(format!("{stem}.png")), dir.join(format!("{stem}.png"))];
        match candidates.into_iter().find(|p| p.is_file()) {
            Some(path) => {
                e.roi = Some(BinaryMask::load(&path, size, MASK_TOLERANCE)?);
                e.roi_path = Some(path);
            }
            None => {
                e.roi_path = None;
                e.roi = None;
            }
        }
    }
    Ok(index)
}

/// Decoded sample of an index entry at the working resolution.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: Image<T>,
    pub roi: RoiMask,
    /// Present for test entries; all zeros for good images.
    pub gt: Option<MaskMap>,
}

pub fn load_sample<T: Scalar>(entry: &Entry, cfg: &LoadConfig) -> Result<Sample<T>> {
    let image = Image::load(&entry.image, cfg.channels, cfg.resolution)?;
    let roi = entry.roi_mask(cfg.resolution);
    let gt = match (&entry.gt_path, &entry.label) {
        (Some(p), _) => Some(BinaryMask::load(p, cfg.resolution, MASK_TOLERANCE)?),
        (None, Label::Good) if entry.split == Split::Test => Some(BinaryMask::zeros(cfg.resolution, cfg.resolution)),
        _ => None,
    };
    Ok(Sample { image, roi, gt })
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Writes `path, roi_path, gt_path, label, split` rows.
pub fn write_index_csv(index: &DatasetIndex, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["path", "roi_path", "gt_path", "label", "split"]).map_err(|e| Error::csv(path, e))?;
    for e in &index.entries {
        w.write_record([
            e.image.display().to_string(),
            opt_path(&e.roi_path),
            opt_path(&e.gt_path),
            e.label.class().to_string(),
            e.split.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an index written by [`write_index_csv`]. ROI masks are not reloaded.
pub fn read_index_csv(path: &Path, root: &Path) -> Result<DatasetIndex> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut entries = Vec::new();
    let mut split = None;
    for row in r.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let get = |i: usize| row.get(i).unwrap_or("").to_string();
        let nonempty = |s: String| (!s.is_empty()).then(|| PathBuf::from(s));
        let s: Split = get(4).parse()?;
        split.get_or_insert(s);
        entries.push(Entry {
            image: PathBuf::from(get(0)),
            roi_path: nonempty(get(1)),
            roi: None,
            gt_path: nonempty(get(2)),
            label: Label::from_class(&get(3)),
            split: s,
        });
    }
    Ok(DatasetIndex { root: root.to_path_buf(), split: split.unwrap_or(Split::Test), entries })
}

/// Rotation angle drawn uniformly from `[-pi/2, pi/2]` for `seed`.
pub fn rotation_angle(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(-FRAC_PI_2..=FRAC_PI_2)
}

/// Mirror `t` into `[0, n-1]` without repeating the edge sample.
fn reflect(t: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let period = 2.0 * last;
    let mut t = t.abs() % period;
    if t > last {
        t = period - t;
    }
    t
}

/// Bilinear sample of a planar channel at a reflected source position.
fn sample_bilinear<T: Scalar>(plane: &[T], h: usize, w: usize, sy: f64, sx: f64) -> T {
    let (sy, sx) = (reflect(sy, h), reflect(sx, w));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (fy, fx) = (T::of(sy - y0 as f64), T::of(sx - x0 as f64));
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let one = T::one();
    let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
    top * (one - fy) + bottom * fy
}

/// Source coordinates feeding destination pixel `(y, x)` for a rotation by `angle`
/// about the image centre.
fn source_coords(y: usize, x: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
}

pub fn rotate_image<T: Scalar>(img: &Image<T>, angle: f64) -> Image<T> {
    let (h, w) = img.dims();
    let (sin, cos) = angle.sin_cos();
    let plane = h * w;
    Image::from_fn(img.channels(), h, w, |c, y, x| {
        let (sy, sx) = source_coords(y, x, h, w, cos, sin);
        sample_bilinear(&img.data()[c * plane..(c + 1) * plane], h, w, sy, sx)
    })
}

/// Rotates with bilinear interpolation and re-binarizes at 0.5.
pub fn rotate_mask(mask: &BinaryMask, angle: f64) -> BinaryMask {
    let (h, w) = mask.dims();
    let (sin, cos) = angle.sin_cos();
    let plane: Vec<f64> = mask.bits().iter().map(|&b| b as f64).collect();
    BinaryMask::from_fn(h, w, |y, x| {
        let (sy, sx) = source_coords(y, x, h, w, cos, sin);
        sample_bilinear(&plane, h, w, sy, sx) >= 0.5
    })
}

/// Rotates the image and both masks by one shared angle drawn from `seed`.
pub fn augment<T: Scalar>(x: &Image<T>, roi: &RoiMask, gt: &MaskMap, seed: u64) -> Result<(Image<T>, RoiMask, MaskMap)> {
    if x.dims() != roi.dims() || x.dims() != gt.dims() {
        return Err(Error::shape(format!("augment: image {:?}, roi {:?}, mask {:?}", x.dims(), roi.dims(), gt.dims())));
    }
    let angle = rotation_angle(seed);
    Ok((rotate_image(x, angle), rotate_mask(roi, angle), rotate_mask(gt, angle)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, v: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::GrayImage::from_pixel(8, 8, image::Luma([v])).save(path).unwrap();
    }

    #[test]
    fn train_split_lists_good_images_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["004", "001", "003", "000", "002"] {
            write_png(&dir.path().join(format!("train/good/{name}.png")), 100);
        }
        let cfg = LoadConfig { resolution: 8, channels: 1, val_fraction: 0.1, seed: 1 };
        let idx = load_dataset(dir.path(), Split::Train, &cfg).unwrap();
        assert_eq!(idx.len(), 5);
        assert!(idx.entries.iter().all(|e| e.label == Label::Good));
        let stems: Vec<String> = idx.entries.iter().map(Entry::stem).collect();
        assert_eq!(stems, ["000", "001", "002", "003", "004"]);
        assert!(load_dataset(dir.path(), Split::Validation, &cfg).unwrap().is_empty());
    }

    #[test]
    fn validation_holdout_is_disjoint_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..20 {
            write_png(&dir.path().join(format!("train/good/{i:03}.png")), 10);
        }
        let cfg = LoadConfig { resolution: 8, channels: 1, val_fraction: 0.25, seed: 9 };
        let train = load_dataset(dir.path(), Split::Train, &cfg).unwrap();
        let val = load_dataset(dir.path(), Split::Validation, &cfg).unwrap();
        assert_eq!((train.len(), val.len()), (15, 5));
        assert!(val.entries.iter().all(|v| !train.entries.iter().any(|t| t.image == v.image)));
        assert_eq!(val, load_dataset(dir.path(), Split::Validation, &cfg).unwrap());
    }

    #[test]
    fn empty_train_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("train/good")).unwrap();
        let err = load_dataset(dir.path(), Split::Train, &LoadConfig::default()).unwrap_err();
        assert!(err.to_string().contains("no training images"), "{err}");
    }

    #[test]
    fn missing_root_or_split_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(load_dataset(&missing, Split::Train, &LoadConfig::default()), Err(Error::Config(_))));
        assert!(matches!(load_dataset(dir.path(), Split::Test, &LoadConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn undecodable_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("train/good/broken.png");
        std::fs::create_dir_all(bad.parent().unwrap()).unwrap();
        std::fs::write(&bad, b"not a png").unwrap();
        let err = load_dataset(dir.path(), Split::Train, &LoadConfig::default()).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn test_split_pairs_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("test/good/000.png"), 10);
        write_png(&dir.path().join("test/crack/001.png"), 10);
        write_png(&dir.path().join("ground_truth/crack/001_mask.png"), 255);
        let idx = load_dataset(dir.path(), Split::Test, &LoadConfig::default()).unwrap();
        assert_eq!(idx.len(), 2);
        let crack = idx.entries.iter().find(|e| e.label.is_defect()).unwrap();
        assert_eq!(crack.label, Label::Defect("crack".into()));
        assert_eq!(crack.gt_path.as_deref(), Some(dir.path().join("ground_truth/crack/001_mask.png").as_path()));
        let good = idx.entries.iter().find(|e| !e.label.is_defect()).unwrap();
        assert!(good.gt_path.is_none());
    }

    #[test]
    fn rois_pair_by_stem_with_all_ones_default() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5 {
            write_png(&dir.path().join(format!("train/good/{i:03}.png")), 10);
        }
        for i in [0, 2, 4] {
            write_png(&dir.path().join(format!("roi/good/{i:03}.png")), 0);
        }
        let cfg = LoadConfig { resolution: 8, channels: 1, val_fraction: 0.0, seed: 0 };
        let idx = load_dataset(dir.path(), Split::Train, &cfg).unwrap();

        let none = attach_rois(idx.clone(), None, 8).unwrap();
        assert!(none.entries.iter().all(|e| e.roi_mask(8).is_full()));

        let with = attach_rois(idx, Some(&dir.path().join("roi")), 8).unwrap();
        let carrying: Vec<String> = with.entries.iter().filter(|e| e.roi.is_some()).map(Entry::stem).collect();
        assert_eq!(carrying, ["000", "002", "004"]);
        assert!(with.entries[0].roi_mask(8).is_empty());
        assert!(with.entries[1].roi_mask(8).is_full());
    }

    #[test]
    fn non_binary_roi_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("train/good/000.png"), 10);
        write_png(&dir.path().join("roi/good/000.png"), 128);
        let cfg = LoadConfig { resolution: 8, channels: 1, val_fraction: 0.0, seed: 0 };
        let idx = load_dataset(dir.path(), Split::Train, &cfg).unwrap();
        let err = attach_rois(idx, Some(&dir.path().join("roi")), 8).unwrap_err();
        assert!(matches!(err, Error::BadMask { .. }), "{err}");
    }

    #[test]
    fn index_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("test/good/000.png"), 10);
        write_png(&dir.path().join("test/crack/001.png"), 10);
        write_png(&dir.path().join("ground_truth/crack/001_mask.png"), 255);
        let idx = load_dataset(dir.path(), Split::Test, &LoadConfig::default()).unwrap();
        let csv_path = dir.path().join("index.csv");
        write_index_csv(&idx, &csv_path).unwrap();
        assert_eq!(read_index_csv(&csv_path, dir.path()).unwrap(), idx);
    }

    #[test]
    fn zero_angle_is_identity() {
        let img = Image::<f64>::from_fn(3, 9, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 16.0);
        assert_eq!(rotate_image(&img, 0.0), img);
        let m = BinaryMask::from_fn(9, 7, |y, x| (y + x) % 3 == 0);
        assert_eq!(rotate_mask(&m, 0.0), m);
    }

    #[test]
    fn centred_square_is_quarter_turn_invariant() {
        let m = BinaryMask::from_fn(32, 32, |y, x| (8..24).contains(&y) && (8..24).contains(&x));
        assert_eq!(rotate_mask(&m, FRAC_PI_2), m);
        assert_eq!(rotate_mask(&m, -FRAC_PI_2), m);
    }

    #[test]
    fn quarter_turn_maps_rows_to_columns() {
        let n = 6;
        let img = Image::<f64>::from_fn(1, n, n, |_, y, x| (y * n + x) as f64 / 35.0);
        let r = rotate_image(&img, FRAC_PI_2);
        for y in 0..n {
            for x in 0..n {
                assert!((r.get(0, y, x) - img.get(0, n - 1 - x, y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn augmentation_is_seeded_and_shared() {
        let img = Image::<f32>::from_fn(3, 16, 16, |c, y, x| ((c + 2 * y + 3 * x) % 11) as f32 / 10.0);
        let roi = BinaryMask::from_fn(16, 16, |y, _| y < 9);
        let gt = BinaryMask::from_fn(16, 16, |y, x| x > y);
        let a = augment(&img, &roi, &gt, 42).unwrap();
        let b = augment(&img, &roi, &gt, 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!((&a.1, &a.2), (&b.1, &b.2));
        let angle = rotation_angle(42);
        assert!(angle.abs() <= FRAC_PI_2);
        assert_eq!(a.0, rotate_image(&img, angle));
        assert_eq!(a.1, rotate_mask(&roi, angle));
        assert_eq!(a.2, rotate_mask(&gt, angle));
    }
}
