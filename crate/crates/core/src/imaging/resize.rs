use super::{BinaryMask, RgbImage};

/// Source coordinate and weights for one output index (half-pixel centers).
fn taps(out: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = ((out as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centers, rounded to the nearest 8-bit value.
pub fn resize_bilinear(img: &RgbImage, out_h: usize, out_w: usize) -> RgbImage {
    let (out_h, out_w) = (out_h.max(1), out_w.max(1));
    if (out_h, out_w) == (img.height(), img.width()) {
        return img.clone();
    }
    let rows: Vec<_> = (0..out_h).map(|y| taps(y, img.height(), out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, img.width(), out_w)).collect();
    let src = img.pixels();
    let w = img.width();
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for c in 0..3 {
                let p = |y: usize, x: usize| src[(y * w + x) * 3 + c] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(out_h, out_w, pixels).expect("resize output size")
}

/// Nearest-neighbor resize; keeps masks binary.
pub fn resize_mask_nearest(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (in_h, in_w) = (mask.height(), mask.width());
    let pick = |o: usize, in_len: usize, out_len: usize| ((o * in_len * 2 + in_len) / (out_len * 2)).min(in_len - 1);
    BinaryMask::from_fn(out_h, out_w, |y, x| mask.get(pick(y, in_h, out_h), pick(x, in_w, out_w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let pixels: Vec<u8> = (0..5 * 7 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let img = RgbImage::new(5, 7, pixels).unwrap();
        assert_eq!(resize_bilinear(&img, 5, 7), img);
    }

    #[test]
    fn two_by_two_to_one_averages() {
        let mut img = RgbImage::filled(2, 2, [0; 3]);
        img.set(0, 0, [10; 3]);
        img.set(0, 1, [20; 3]);
        img.set(1, 0, [30; 3]);
        img.set(1, 1, [40; 3]);
        assert_eq!(resize_bilinear(&img, 1, 1).pixels(), &[25, 25, 25]);
    }

    #[test]
    fn output_dims_follow_request() {
        let img = RgbImage::filled(37, 211, [1, 2, 3]);
        let r = resize_bilinear(&img, 150, 150);
        assert_eq!((r.height(), r.width()), (150, 150));
        assert!(r.pixels().chunks(3).all(|p| p == [1, 2, 3]));
    }

    #[test]
    fn nearest_mask_resize() {
        let m = BinaryMask::from_fn(2, 2, |y, x| y == x);
        let up = resize_mask_nearest(&m, 4, 4);
        assert_eq!(up, BinaryMask::from_fn(4, 4, |y, x| y / 2 == x / 2));
        assert_eq!(resize_mask_nearest(&up, 2, 2), m);
        assert_eq!(resize_mask_nearest(&m, 2, 2), m);
    }
}
