//! Pixel geometry: inclusive bounding boxes, binary masks, margin expansion
//! and aspect-preserving letterbox resize.

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty mask")]
    EmptyMask,
    #[error("degenerate bbox ({x0},{y0},{x1},{y1})")]
    Degenerate { x0: i64, y0: i64, x1: i64, y1: i64 },
    #[error("bbox {bbox} outside image extent {width}x{height}")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("invalid margin {0}")]
    InvalidMargin(f64),
    #[error("zero-sized crop {width}x{height}")]
    ZeroSizedCrop { width: u32, height: u32 },
    #[error("target size must be positive")]
    ZeroTarget,
    #[error("mask extent {mask_w}x{mask_h} does not match image extent {image_w}x{image_h}")]
    ExtentMismatch { mask_w: u32, mask_h: u32, image_w: u32, image_h: u32 },
}

/// Axis-aligned box in pixel coordinates. Both corners are inside the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, GeometryError> {
        if x0 > x1 || y0 > y1 {
            return Err(GeometryError::Degenerate { x0: x0.into(), y0: y0.into(), x1: x1.into(), y1: y1.into() });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn is_ordered(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// True when the box lies inside `[0,width) x [0,height)`.
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.is_ordered() && self.x1 < width && self.y1 < height
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        if ix0 > ix1 || iy0 > iy1 {
            return 0.0;
        }
        let inter = u64::from(ix1 - ix0 + 1) * u64::from(iy1 - iy0 + 1);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

/// Binary mask stored row-major, one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Any nonzero luma value is foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self { width: img.width(), height: img.height(), data: img.pixels().map(|p| u8::from(p.0[0] != 0)).collect() }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    /// Filled rectangle covering `bbox` on a `width x height` canvas.
    pub fn from_bbox(width: u32, height: u32, bbox: &BBox) -> Self {
        Self::from_fn(width, height, |x, y| bbox.contains_point(x, y))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y as usize) * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.data[(y as usize) * w + x as usize] = u8::from(value);
    }

    pub fn count(&self) -> u64 {
        self.data.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Pixel-wise OR. Both masks must share an extent.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<(), GeometryError> {
        if self.width != other.width || self.height != other.height {
            return Err(GeometryError::ExtentMismatch {
                mask_w: other.width,
                mask_h: other.height,
                image_w: self.width,
                image_h: self.height,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn iter_foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.data.iter().enumerate().filter(|(_, &v)| v != 0).map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }
}

/// Minimal box containing every foreground pixel of `mask`.
pub fn mask_to_bbox(mask: &BinaryMask) -> Result<BBox, GeometryError> {
    let mut it = mask.iter_foreground();
    let (x, y) = it.next().ok_or(GeometryError::EmptyMask)?;
    let mut b = BBox { x0: x, y0: y, x1: x, y1: y };
    for (x, y) in it {
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x);
        b.y1 = b.y1.max(y);
    }
    Ok(b)
}

// Slack so that products such as 0.1 * 100 / 2 that land a hair under an
// integer in binary still floor to that integer.
const GROWTH_EPS: f64 = 1e-9;

/// Grows `bbox` by `margin` of its width and height, half of the growth on
/// each side (floored to whole pixels), and clamps the result to the image.
pub fn expand_bbox(bbox: &BBox, margin: f64, extent: (u32, u32)) -> Result<BBox, GeometryError> {
    if !margin.is_finite() || margin < 0.0 {
        return Err(GeometryError::InvalidMargin(margin));
    }
    let (width, height) = extent;
    if !bbox.fits_within(width, height) {
        return Err(GeometryError::OutOfBounds { bbox: *bbox, width, height });
    }
    let per_side = |dim: u32| -> i64 { (margin * f64::from(dim) / 2.0 + GROWTH_EPS).floor() as i64 };
    let gx = per_side(bbox.width());
    let gy = per_side(bbox.height());
    let clamp = |v: i64, hi: u32| v.clamp(0, i64::from(hi) - 1) as u32;
    Ok(BBox {
        x0: clamp(i64::from(bbox.x0) - gx, width),
        y0: clamp(i64::from(bbox.y0) - gy, height),
        x1: clamp(i64::from(bbox.x1) + gx, width),
        y1: clamp(i64::from(bbox.y1) + gy, height),
    })
}

/// Placement of resized content inside a square letterbox canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_left: u32,
    pub pad_top: u32,
    pub content_width: u32,
    pub content_height: u32,
    pub target: u32,
}

impl LetterboxTransform {
    /// Layout for a `width x height` crop on a `target x target` canvas.
    pub fn compute(width: u32, height: u32, target: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::ZeroSizedCrop { width, height });
        }
        if target == 0 {
            return Err(GeometryError::ZeroTarget);
        }
        let long = u64::from(width.max(height));
        let t = u64::from(target);
        // round(dim * target / long) in integer arithmetic
        let scaled = |dim: u32| -> u32 {
            let v = (u64::from(dim) * t * 2 + long) / (2 * long);
            v.clamp(1, t) as u32
        };
        let content_width = scaled(width);
        let content_height = scaled(height);
        Ok(Self {
            scale: f64::from(target) / long as f64,
            pad_left: (target - content_width) / 2,
            pad_top: (target - content_height) / 2,
            content_width,
            content_height,
            target,
        })
    }

    pub fn pad_right(&self) -> u32 {
        self.target - self.content_width - self.pad_left
    }

    pub fn pad_bottom(&self) -> u32 {
        self.target - self.content_height - self.pad_top
    }
}

/// Scales `crop` uniformly to fit a `target x target` canvas, centred, with
/// the remainder filled by `pad_value`. Bilinear filtering.
pub fn letterbox_resize(crop: &RgbImage, target: u32, pad_value: u8) -> Result<(RgbImage, LetterboxTransform), GeometryError> {
    let t = LetterboxTransform::compute(crop.width(), crop.height(), target)?;
    let content = if t.content_width == crop.width() && t.content_height == crop.height() {
        crop.clone()
    } else {
        imageops::resize(crop, t.content_width, t.content_height, FilterType::Triangle)
    };
    let mut canvas = RgbImage::from_pixel(target, target, Rgb([pad_value; 3]));
    imageops::replace(&mut canvas, &content, i64::from(t.pad_left), i64::from(t.pad_top));
    Ok((canvas, t))
}

/// Copies the pixels covered by `bbox`.
pub fn crop_to_bbox(image: &RgbImage, bbox: &BBox) -> Result<RgbImage, GeometryError> {
    if !bbox.fits_within(image.width(), image.height()) {
        return Err(GeometryError::OutOfBounds { bbox: *bbox, width: image.width(), height: image.height() });
    }
    Ok(imageops::crop_imm(image, bbox.x0, bbox.y0, bbox.width(), bbox.height()).to_image())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn single_pixel_mask() {
        let m = BinaryMask::from_fn(10, 10, |x, y| x == 5 && y == 7);
        assert_eq!(mask_to_bbox(&m).unwrap(), bb(5, 7, 5, 7));
    }

    #[test]
    fn two_pixel_mask_matches_brute_force() {
        let m = BinaryMask::from_fn(12, 12, |x, y| (x, y) == (3, 4) || (x, y) == (7, 9));
        // brute force over every pixel
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..12 {
            for x in 0..12 {
                if m.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        assert_eq!((x0, y0, x1, y1), (3, 4, 7, 9));
        assert_eq!(mask_to_bbox(&m).unwrap(), bb(3, 4, 7, 9));
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert_eq!(mask_to_bbox(&BinaryMask::new(4, 4)), Err(GeometryError::EmptyMask));
    }

    #[test]
    fn zero_margin_is_identity() {
        let b = bb(10, 20, 30, 40);
        assert_eq!(expand_bbox(&b, 0.0, (100, 100)).unwrap(), b);
    }

    #[test]
    fn ten_percent_growth_is_centred() {
        assert_eq!(expand_bbox(&bb(100, 100, 200, 200), 0.10, (1024, 1024)).unwrap(), bb(95, 95, 205, 205));
    }

    #[test]
    fn growth_clamps_at_origin() {
        assert_eq!(expand_bbox(&bb(0, 0, 100, 100), 0.10, (1024, 1024)).unwrap(), bb(0, 0, 105, 105));
    }

    #[test]
    fn fifteen_percent_growth() {
        assert_eq!(expand_bbox(&bb(100, 100, 200, 200), 0.15, (1024, 1024)).unwrap(), bb(93, 93, 207, 207));
    }

    #[test]
    fn expand_rejects_bad_inputs() {
        assert!(matches!(expand_bbox(&bb(0, 0, 5, 5), -0.1, (10, 10)), Err(GeometryError::InvalidMargin(_))));
        assert!(matches!(expand_bbox(&bb(0, 0, 10, 5), 0.1, (10, 10)), Err(GeometryError::OutOfBounds { .. })));
    }

    #[test]
    fn letterbox_wide_crop() {
        let crop = RgbImage::from_pixel(200, 100, Rgb([200, 10, 10]));
        let (out, t) = letterbox_resize(&crop, 512, 0).unwrap();
        assert_eq!(out.dimensions(), (512, 512));
        assert!((t.scale - 2.56).abs() < 1e-12);
        assert_eq!((t.content_width, t.content_height), (512, 256));
        assert_eq!((t.pad_top, t.pad_bottom(), t.pad_left, t.pad_right()), (128, 128, 0, 0));
        assert_eq!(out.get_pixel(256, 10).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(256, 256).0, [200, 10, 10]);
    }

    #[test]
    fn letterbox_tall_crop() {
        let crop = RgbImage::new(100, 200);
        let (_, t) = letterbox_resize(&crop, 512, 0).unwrap();
        assert_eq!((t.content_width, t.content_height), (256, 512));
        assert_eq!((t.pad_left, t.pad_right()), (128, 128));
    }

    #[test]
    fn letterbox_identity() {
        let crop = RgbImage::from_fn(512, 512, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let (out, t) = letterbox_resize(&crop, 512, 0).unwrap();
        assert_eq!(t.scale, 1.0);
        assert_eq!((t.pad_left, t.pad_top, t.pad_right(), t.pad_bottom()), (0, 0, 0, 0));
        assert_eq!(out, crop);
    }

    #[test]
    fn letterbox_zero_crop() {
        assert!(matches!(letterbox_resize(&RgbImage::new(0, 10), 512, 0), Err(GeometryError::ZeroSizedCrop { .. })));
        assert_eq!(letterbox_resize(&RgbImage::new(4, 4), 0, 0).unwrap_err(), GeometryError::ZeroTarget);
    }

    #[test]
    fn iou_of_identical_and_disjoint() {
        let a = bb(0, 0, 9, 9);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&bb(20, 20, 25, 25)), 0.0);
    }
}
