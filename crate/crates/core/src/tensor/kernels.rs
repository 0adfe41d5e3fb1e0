//! Slice-level forward/backward kernels. Shapes are validated by the callers in `ops`.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], col: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dinput: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut dinput[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (p, k) = (g.out_pixels(), g.patch());
    let in_per = g.c * g.h * g.w;
    let out_per = g.o * p;
    let mut out = vec![T::zero(); g.n * out_per];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        let x = &input[n * in_per..(n + 1) * in_per];
        let y = &mut out[n * out_per..(n + 1) * out_per];
        let col_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        T::gemm(g.o, k, p, kernel, false, col_ref, false, y, false);
        for (o, row) in y.chunks_mut(p).enumerate() {
            let b = bias[o];
            row.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; `d_input` only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    gout: &[T],
    want_input: bool,
    want_params: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (p, k) = (g.out_pixels(), g.patch());
    let in_per = g.c * g.h * g.w;
    let out_per = g.o * p;
    let mut dinput = want_input.then(|| vec![T::zero(); g.n * in_per]);
    let mut dkernel = vec![T::zero(); if want_params { g.o * k } else { 0 }];
    let mut dbias = vec![T::zero(); if want_params { g.o } else { 0 }];
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = if pointwise || !want_input { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        let x = &input[n * in_per..(n + 1) * in_per];
        let gy = &gout[n * out_per..(n + 1) * out_per];
        if want_params {
            let col_ref: &[T] = if pointwise {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            T::gemm(g.o, p, k, gy, false, col_ref, true, &mut dkernel, true);
            for (o, row) in gy.chunks(p).enumerate() {
                dbias[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx_all) = dinput.as_mut() {
            let dx = &mut dx_all[n * in_per..(n + 1) * in_per];
            if pointwise {
                T::gemm(k, g.o, p, kernel, true, gy, false, dx, true);
            } else {
                T::gemm(k, g.o, p, kernel, true, gy, false, &mut dcol, false);
                col2im_add(g, &dcol, dx);
            }
        }
    }
    (dinput, dkernel, dbias)
}

/// 2×2/stride-2 max pool over `planes` planes of `h×w`. Returns values and the
/// flat input index that won each window (first maximum in row-major order).
pub(crate) fn max_pool2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// 3×3 stride-1 average pool with zero padding; divisor is always 9.
pub(crate) fn avg_pool3_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ninth = T::lit(1.0 / 9.0);
    let mut out = vec![T::zero(); input.len()];
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += src[yy * w + xx];
                    }
                }
                dst[y * w + x] = acc * ninth;
            }
        }
    }
    out
}

pub(crate) fn avg_pool3_backward<T: Scalar>(gout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    // the operator is self-adjoint: symmetric window, constant divisor
    avg_pool3_forward(gout, planes, h, w)
}

pub(crate) fn upsample2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        for y in 0..oh {
            let src = &input[pl * h * w + (y / 2) * w..pl * h * w + (y / 2 + 1) * w];
            let dst = &mut out[pl * oh * ow + y * ow..pl * oh * ow + (y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(gout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gin = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                gin[pl * h * w + (y / 2) * w + x / 2] += gout[pl * oh * ow + y * ow + x];
            }
        }
    }
    gin
}

/// Mirror index without repeating the edge sample (`abc|ba`).
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

pub(crate) fn pad_reflect_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    bottom: usize,
    right: usize,
) -> Vec<T> {
    let (oh, ow) = (h + bottom, w + right);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            let sy = reflect(y, h);
            out.extend((0..ow).map(|x| src[sy * w + reflect(x, w)]));
        }
    }
    out
}

pub(crate) fn pad_reflect_backward<T: Scalar>(
    gout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    bottom: usize,
    right: usize,
) -> Vec<T> {
    let (oh, ow) = (h + bottom, w + right);
    let mut gin = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for y in 0..oh {
            let sy = reflect(y, h);
            for x in 0..ow {
                gin[pl * h * w + sy * w + reflect(x, w)] += gout[pl * oh * ow + y * ow + x];
            }
        }
    }
    gin
}

/// Copies the top-left `oh×ow` window of each plane.
pub(crate) fn crop_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        for y in 0..oh {
            let start = pl * h * w + y * w;
            out.extend_from_slice(&input[start..start + ow]);
        }
    }
    out
}

pub(crate) fn crop_backward<T: Scalar>(gout: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut gin = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for y in 0..oh {
            let start = pl * h * w + y * w;
            gin[start..start + ow].copy_from_slice(&gout[pl * oh * ow + y * ow..pl * oh * ow + (y + 1) * ow]);
        }
    }
    gin
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let s: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!((0..7).map(|i| reflect(i, 5)).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 3, 2]);
    }

    #[test]
    fn max_pool_prefers_first_on_ties() {
        let x = [1.0f64, 1.0, 1.0, 1.0];
        let (v, arg) = max_pool2_forward(&x, 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-1000.0f64), 0.0);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
