//! Image, mask and heatmap rasters plus 8-bit PNG/JPEG conversion.

use std::path::Path;

use grdnet_tensor::{Scalar, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Planar (`C x H x W`) image with values in `[0, 1]`; `C` is 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// `f(channel, y, x)`
    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).max(T::zero()).min(T::one()));
                }
            }
        }
        Image { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v.max(T::zero()).min(T::one());
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(Error::shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.check_same(other).is_ok()
    }

    /// Stacks same-shaped images into an `(N, C, H, W)` tensor.
    pub fn batch(images: &[&Image<T>]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            first.check_same(im)?;
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_vec(&[images.len(), first.channels, first.height, first.width], data))
    }

    /// Sample `n` of an `(N, C, H, W)` tensor, clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Image<T> {
        let (_, c, h, w) = t.dims4();
        let data = t.sample(n).iter().map(|v| v.max(T::zero()).min(T::one())).collect();
        Image { channels: c, height: h, width: w, data }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let q = |v: T| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8;
        if self.channels == 1 {
            let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([q(self.get(0, y as usize, x as usize))])
            });
            DynamicImage::ImageLuma8(img)
        } else {
            let img = RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
            });
            DynamicImage::ImageRgb8(img)
        }
    }

    pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Image<T>> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let scale = T::of(1.0 / 255.0);
        match channels {
            1 => {
                let g = img.to_luma8();
                Ok(Image::from_fn(1, h, w, |_, y, x| T::of(g.get_pixel(x as u32, y as u32)[0] as f64) * scale))
            }
            3 => {
                let rgb = img.to_rgb8();
                Ok(Image::from_fn(3, h, w, |c, y, x| T::of(rgb.get_pixel(x as u32, y as u32)[c] as f64) * scale))
            }
            other => Err(Error::InvalidArgument(format!("images have 1 or 3 channels, got {other}"))),
        }
    }

    /// Decodes `path` and bilinearly resizes to `size x size`.
    pub fn load(path: &Path, channels: usize, size: usize) -> Result<Image<T>> {
        let img = image::open(path).map_err(|source| Error::Decode { path: path.to_path_buf(), source })?;
        let img = if img.width() as usize != size || img.height() as usize != size {
            img.resize_exact(size as u32, size as u32, FilterType::Triangle)
        } else {
            img
        };
        Image::from_dynamic(&img, channels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save(path).map_err(|source| Error::Encode { path: path.to_path_buf(), source })
    }
}

/// Binary `H x W` raster with values in `{0, 1}`. Used both for ground-truth
/// anomaly masks and for regions of interest.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

/// Ground-truth anomaly mask (synthetic or annotated).
pub type MaskMap = BinaryMask;
/// Region of interest; all-ones when no ROI is supplied.
pub type RoiMask = BinaryMask;

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask { height, width, data }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} mask needs {} values, got {}", height * width, bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { height, width, data: bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.data.len()
    }

    pub fn invert(&self) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|&b| 1 - b).collect() }
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims(), "mask and: shape mismatch");
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Intersection over union; 1.0 when both are empty.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.and(other).count();
        let union = self.count() + other.count() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Stacks masks into an `(N, 1, H, W)` tensor.
    pub fn batch<T: Scalar>(masks: &[&BinaryMask]) -> Result<Tensor<T>> {
        let first = masks.first().ok_or_else(|| Error::InvalidArgument("empty mask batch".into()))?;
        let mut data = Vec::with_capacity(masks.len() * first.data.len());
        for m in masks {
            if m.dims() != first.dims() {
                return Err(Error::shape(format!("mask {:?} vs {:?}", m.dims(), first.dims())));
            }
            data.extend(m.data.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }));
        }
        Ok(Tensor::from_vec(&[masks.len(), 1, first.height, first.width], data))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Self::batch(&[self]).expect("single mask batch")
    }

    pub fn to_gray(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|source| Error::Encode { path: path.to_path_buf(), source })
    }

    /// Reads a single-channel 0/255 mask and nearest-resizes to `size x size`.
    /// Gray levels farther than `tolerance` from both 0 and 255 are rejected.
    pub fn load(path: &Path, size: usize, tolerance: u8) -> Result<BinaryMask> {
        let img = image::open(path).map_err(|source| Error::Decode { path: path.to_path_buf(), source })?;
        let gray = img.to_luma8();
        if let Some(p) = gray.pixels().find(|p| p[0] > tolerance && p[0] < 255 - tolerance) {
            return Err(Error::BadMask {
                path: path.to_path_buf(),
                reason: format!("gray level {} is not binarizable (expected values near 0 or 255)", p[0]),
            });
        }
        let gray = if gray.width() as usize != size || gray.height() as usize != size {
            image::imageops::resize(&gray, size as u32, size as u32, FilterType::Nearest)
        } else {
            gray
        };
        Ok(BinaryMask::from_fn(size, size, |y, x| gray.get_pixel(x as u32, y as u32)[0] >= 128))
    }
}

/// Per-pixel anomaly evidence, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} heatmap needs {} values, got {}", height * width, data.len())));
        }
        Ok(Heatmap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Heatmap { height, width, data: vec![v; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Heatmap { height, width, data }
    }

    /// Sample `n` of an `(N, 1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Heatmap<T> {
        let (_, c, h, w) = t.dims4();
        assert_eq!(c, 1, "heatmap tensors have one channel");
        Heatmap { height: h, width: w, data: t.sample(n).to_vec() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn sum(&self) -> T {
        grdnet_tensor::pairwise_sum(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone())
    }

    /// Pixels strictly above `threshold`.
    pub fn above(&self, threshold: T) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, x) > threshold)
    }

    /// 8-bit gray rendering of values clamped to `[0, 1]`.
    pub fn to_gray(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(y as usize, x as usize).to_f64_lossy().clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    /// Min-max normalized copy for display.
    pub fn normalized(&self) -> Heatmap<T> {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        let data = if span > T::zero() {
            self.data.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![T::zero(); self.data.len()]
        };
        Heatmap { height: self.height, width: self.width, data }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|source| Error::Encode { path: path.to_path_buf(), source })
    }
}

/// Jet-style false colour for `v` in `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f64| ((1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::<f32>::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(Image::<f32>::new(2, 1, 1, vec![0.5, 0.5]).is_err());
        assert!(Image::<f32>::new(1, 1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn tensor_round_trip() {
        let a = Image::<f64>::from_fn(3, 4, 5, |c, y, x| (c + y + x) as f64 / 12.0);
        let b = Image::<f64>::filled(3, 4, 5, 0.25);
        let t = Image::batch(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4, 5]);
        assert_eq!(Image::from_tensor(&t, 0), a);
        assert_eq!(Image::from_tensor(&t, 1), b);
    }

    #[test]
    fn mask_set_algebra() {
        let a = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let b = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        assert!(b.is_subset_of(&a));
        assert!(!a.is_subset_of(&b));
        assert_eq!(a.and(&b), b);
        assert_eq!(a.invert().count(), 8);
        assert!((a.iou(&b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
    }
}
