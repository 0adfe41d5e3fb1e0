use std::collections::VecDeque;

use super::{resize_bilinear, BinaryMask, GrayImage, RgbImage};
use crate::error::{Error, Result};
use crate::INPUT_SIZE;

pub const DEFAULT_PAD_FRAC: f64 = 0.1;

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    /// Grows each side by `frac` of the box extent, clipped to `h×w`.
    pub fn expand(&self, frac: f64, h: usize, w: usize) -> BoundingBox {
        let py = (frac * self.height() as f64).round() as usize;
        let px = (frac * self.width() as f64).round() as usize;
        BoundingBox {
            top: self.top.saturating_sub(py),
            left: self.left.saturating_sub(px),
            bottom: (self.bottom + py).min(h - 1),
            right: (self.right + px).min(w - 1),
        }
    }
}

/// Pixels at or above `threshold` are lesion.
pub fn binarize_mask(gray: &GrayImage, threshold: u8) -> BinaryMask {
    let data = gray.pixels.iter().map(|&v| v >= threshold).collect();
    BinaryMask::new(gray.height, gray.width, data).expect("gray image length")
}

/// Keeps the largest 4-connected foreground component. Components are
/// discovered in row-major order and a later one must be strictly larger to
/// win, so ties go to the component whose first pixel comes first.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![0u32; h * w];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 1u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data()[start] || label[start] != 0 {
            continue;
        }
        let id = next;
        next += 1;
        label[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data()[j] && label[j] == 0 {
                    label[j] = id;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    match best {
        None => BinaryMask::empty(h, w),
        Some((id, _)) => BinaryMask::new(h, w, label.iter().map(|&l| l == id).collect()).unwrap(),
    }
}

/// Crops the padded bounding box of the mask's largest component and resizes
/// it to the network input size. An empty mask yields the whole image.
pub fn crop_from_mask(img: &RgbImage, mask: &BinaryMask, pad_frac: f64) -> Result<RgbImage> {
    if (img.height(), img.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape(
            "crop_from_mask",
            &[img.height(), img.width()],
            &[mask.height(), mask.width()],
        ));
    }
    let region = match largest_component(mask).bounding_box() {
        Some(b) => img.crop(b.expand(pad_frac, img.height(), img.width())),
        None => img.clone(),
    };
    Ok(resize_bilinear(&region, INPUT_SIZE, INPUT_SIZE))
}
