//! Image containers, PNG/PPM codecs and the preprocessing chain applied
//! before either network sees an image.

mod codec;
mod mask;
mod resize;

pub use codec::{decode_gray, decode_image, encode_gray_png, encode_mask_png, encode_rgb_png, load_gray, load_image};
pub use mask::{binarize_mask, crop_from_mask, largest_component, BoundingBox, DEFAULT_PAD_FRAC};
pub use resize::{resize_bilinear, resize_mask_nearest};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit RGB, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "RGB image {height}×{width} needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the inclusive pixel box.
    pub fn crop(&self, b: BoundingBox) -> RgbImage {
        let (h, w) = (b.bottom - b.top + 1, b.right - b.left + 1);
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in b.top..=b.bottom {
            let start = (y * self.width + b.left) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        RgbImage { height: h, width: w, pixels }
    }
}

/// 8-bit single channel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Planar (CHW) 3-channel real image.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("planar image length")
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(self.data.iter().map(|&v| v as f64))
    }
}

/// Boolean lesion indicator per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask {height}×{width} needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut b: Option<BoundingBox> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &v)| v) {
            let (y, x) = (i / self.width, i % self.width);
            b = Some(match b {
                None => BoundingBox { top: y, left: x, bottom: y, right: x },
                Some(b) => BoundingBox {
                    top: b.top.min(y),
                    left: b.left.min(x),
                    bottom: b.bottom.max(y),
                    right: b.right.max(x),
                },
            });
        }
        b
    }

    /// 0.0/1.0 per pixel, for loss targets.
    pub fn to_target<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| if v { T::one() } else { T::zero() }).collect()
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

const STD_FLOOR: f64 = 1e-6;

/// Per-image standardization over all pixels and channels:
/// `(v − mean) / max(std, 1e-6)`.
pub fn normalize(img: &RgbImage) -> FloatImage {
    let (h, w) = (img.height, img.width);
    let (mean, std) = mean_std(img.pixels.iter().map(|&v| v as f64));
    let scale = 1.0 / std.max(STD_FLOOR);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = ((px[c] as f64 - mean) * scale) as f32;
        }
    }
    FloatImage { height: h, width: w, data }
}

/// Same standardization applied to an already-real image.
pub fn normalize_float(img: &FloatImage) -> FloatImage {
    let (mean, std) = img.mean_std();
    let scale = 1.0 / std.max(STD_FLOOR);
    FloatImage {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|&v| ((v as f64 - mean) * scale) as f32).collect(),
    }
}

/// Resize to `size×size` and normalize: the network input for one image.
pub fn preprocess(img: &RgbImage, size: usize) -> FloatImage {
    normalize(&resize_bilinear(img, size, size))
}
