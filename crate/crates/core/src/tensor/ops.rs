//! Differentiable primitives recorded on a [`Tape`].

use super::kernels::{self, ConvGeom};
use super::tape::{Node, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output `ceil(H / stride)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: usize, geom: ConvGeom },
    MaxPool2 { input: usize, argmax: Vec<usize> },
    AvgPool3 { input: usize },
    Upsample2 { input: usize },
    Concat { a: usize, b: usize, outer: usize, a_len: usize, b_len: usize },
    Dense { x: usize, w: usize, b: usize },
    Relu { input: usize },
    Sigmoid { input: usize },
    Softmax { input: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { input: usize, factor: T },
    Sum { input: usize },
    PadReflect { input: usize, bottom: usize, right: usize },
    Crop { input: usize },
    GlobalAvgPool { input: usize },
    BceLogits { logits: usize, target: Vec<T> },
    DiceLogits { logits: usize, target: Vec<T> },
    SoftmaxXent { logits: usize, labels: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid_shape(op, format!("expected [N,C,H,W], got {shape:?}"))),
    }
}

fn planes_hw(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0] * shape[1], shape[2], shape[3])
}

impl<'t, T: Scalar> Var<'t, T> {
    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var<'t, T>]) -> Var<'t, T> {
        let nodes = self.tape.nodes();
        let requires_grad = inputs.iter().any(|v| {
            debug_assert!(std::ptr::eq(v.tape, self.tape), "vars from different tapes");
            nodes[v.id].requires_grad
        });
        drop(nodes);
        self.tape.push(value, op, requires_grad)
    }

    pub fn conv2d(self, kernel: Var<'t, T>, bias: Var<'t, T>, padding: Padding, stride: usize) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let k = &nodes[kernel.id].value;
        let b = &nodes[bias.id].value;
        let [n, c, h, w] = dims4("conv2d", &x.shape)?;
        let [o, kc, kh, kw] = dims4("conv2d", &k.shape)?;
        if kc != c {
            return Err(Error::shape("conv2d", &x.shape, &k.shape));
        }
        if b.shape != [o] {
            return Err(Error::shape("conv2d", &k.shape, &b.shape));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be ≥ 1".into()));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::shape("conv2d", &x.shape, &k.shape));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom { n, c, h, w, o, kh, kw, stride, pad_top, pad_left, oh, ow };
        let out = kernels::conv2d_forward(&geom, &x.data, &k.data, &b.data);
        drop(nodes);
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.record(
            value,
            Op::Conv2d { input: self.id, kernel: kernel.id, bias: bias.id, geom },
            &[self, kernel, bias],
        ))
    }

    pub fn max_pool2d(self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let [n, c, h, w] = dims4("max_pool2d", &x.shape)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid_shape("max_pool2d", format!("spatial dims must be even, got {h}×{w}")));
        }
        let (out, argmax) = kernels::max_pool2_forward(&x.data, n * c, h, w);
        drop(nodes);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.record(value, Op::MaxPool2 { input: self.id, argmax }, &[self]))
    }

    /// 3×3, stride 1, zero-padded average pool (inception pool branch).
    pub fn avg_pool3x3(self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let [n, c, h, w] = dims4("avg_pool3x3", &x.shape)?;
        let out = kernels::avg_pool3_forward(&x.data, n * c, h, w);
        let value = Tensor::new(x.shape.clone(), out)?;
        drop(nodes);
        Ok(self.record(value, Op::AvgPool3 { input: self.id }, &[self]))
    }

    pub fn upsample_nearest2x(self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let [n, c, h, w] = dims4("upsample_nearest2x", &x.shape)?;
        let out = kernels::upsample2_forward(&x.data, n * c, h, w);
        drop(nodes);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.record(value, Op::Upsample2 { input: self.id }, &[self]))
    }

    /// Concatenates along axis 1 (axis 0 for vectors).
    pub fn concat(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        let (sa, sb) = (&a.shape, &b.shape);
        let axis = if sa.len() == 1 { 0 } else { 1 };
        let compatible = sa.len() == sb.len()
            && !sa.is_empty()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", sa, sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_len = a.numel() / outer.max(1);
        let b_len = b.numel() / outer.max(1);
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for o in 0..outer {
            data.extend_from_slice(&a.data[o * a_len..(o + 1) * a_len]);
            data.extend_from_slice(&b.data[o * b_len..(o + 1) * b_len]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        drop(nodes);
        let value = Tensor::new(shape, data)?;
        Ok(self.record(
            value,
            Op::Concat { a: self.id, b: other.id, outer, a_len, b_len },
            &[self, other],
        ))
    }

    /// `x · W + b` for `x: [N,F]`, `W: [F,G]`, `b: [G]`.
    pub fn dense(self, weights: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let wt = &nodes[weights.id].value;
        let b = &nodes[bias.id].value;
        let (n, f, g) = match (x.shape.as_slice(), wt.shape.as_slice()) {
            ([n, f], [f2, g]) if f == f2 => (*n, *f, *g),
            _ => return Err(Error::shape("dense", &x.shape, &wt.shape)),
        };
        if b.shape != [g] {
            return Err(Error::shape("dense", &wt.shape, &b.shape));
        }
        let mut out = vec![T::zero(); n * g];
        T::gemm(n, f, g, &x.data, false, &wt.data, false, &mut out, false);
        for row in out.chunks_mut(g) {
            row.iter_mut().zip(&b.data).for_each(|(v, &bb)| *v += bb);
        }
        drop(nodes);
        let value = Tensor::new(vec![n, g], out)?;
        Ok(self.record(value, Op::Dense { x: self.id, w: weights.id, b: bias.id }, &[self, weights, bias]))
    }

    pub fn activation(self, kind: Activation) -> Var<'t, T> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = self.map_value(|v| v.max(T::zero()));
        self.record(value, Op::Relu { input: self.id }, &[self])
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let value = self.map_value(kernels::sigmoid);
        self.record(value, Op::Sigmoid { input: self.id }, &[self])
    }

    /// Row-wise softmax of `[N,C]` logits.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let c = match x.shape.as_slice() {
            [_, c] if *c >= 1 => *c,
            s => return Err(Error::invalid_shape("softmax", format!("expected [N,C], got {s:?}"))),
        };
        let value = Tensor::new(x.shape.clone(), kernels::softmax_rows(&x.data, c))?;
        drop(nodes);
        Ok(self.record(value, Op::Softmax { input: self.id }, &[self]))
    }

    #[allow(clippy::should_implement_trait)] // fallible: shapes must match
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.zip_value(other, "add", |a, b| a + b)?;
        Ok(self.record(value, Op::Add { a: self.id, b: other.id }, &[self, other]))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.zip_value(other, "mul", |a, b| a * b)?;
        Ok(self.record(value, Op::Mul { a: self.id, b: other.id }, &[self, other]))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let value = self.map_value(|v| v * factor);
        self.record(value, Op::Scale { input: self.id, factor }, &[self])
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.tape.nodes()[self.id].value.data.iter().copied().sum();
        self.record(Tensor::scalar(s), Op::Sum { input: self.id }, &[self])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.tape.nodes()[self.id].value.numel();
        self.sum().scale(T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Mirror-pads the bottom and right edges of an NCHW tensor.
    pub fn pad_reflect(self, bottom: usize, right: usize) -> Result<Var<'t, T>> {
        if bottom == 0 && right == 0 {
            return Ok(self);
        }
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let [n, c, h, w] = dims4("pad_reflect", &x.shape)?;
        if bottom >= h || right >= w {
            return Err(Error::invalid_shape(
                "pad_reflect",
                format!("padding ({bottom},{right}) must be smaller than {h}×{w}"),
            ));
        }
        let out = kernels::pad_reflect_forward(&x.data, n * c, h, w, bottom, right);
        drop(nodes);
        let value = Tensor::new(vec![n, c, h + bottom, w + right], out)?;
        Ok(self.record(value, Op::PadReflect { input: self.id, bottom, right }, &[self]))
    }

    /// Keeps the top-left `h×w` window of an NCHW tensor.
    pub fn crop(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let [n, c, ih, iw] = dims4("crop", &x.shape)?;
        if h > ih || w > iw {
            return Err(Error::invalid_shape("crop", format!("{h}×{w} exceeds {ih}×{iw}")));
        }
        if h == ih && w == iw {
            return Ok(self);
        }
        let out = kernels::crop_forward(&x.data, n * c, ih, iw, h, w);
        drop(nodes);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(value, Op::Crop { input: self.id }, &[self]))
    }

    /// Spatial mean: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let [n, c, h, w] = dims4("global_avg_pool", &x.shape)?;
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let out = x.data.chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        drop(nodes);
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.record(value, Op::GlobalAvgPool { input: self.id }, &[self]))
    }

    /// Mean binary cross-entropy on logits, `target` holds 0/1 per element.
    pub fn bce_with_logits(self, target: &[T]) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let z = &nodes[self.id].value;
        if z.numel() != target.len() {
            return Err(Error::shape("bce_loss", &z.shape, &[target.len()]));
        }
        let n = T::from_usize(z.numel().max(1)).unwrap();
        let total: T = z
            .data
            .iter()
            .zip(target)
            .map(|(&zi, &y)| kernels::softplus(zi) - zi * y)
            .sum();
        drop(nodes);
        Ok(self.record(
            Tensor::scalar(total / n),
            Op::BceLogits { logits: self.id, target: target.to_vec() },
            &[self],
        ))
    }

    /// `1 − (2Σpy + 1)/(Σp + Σy + 1)` with `p = σ(logits)`.
    pub fn dice_with_logits(self, target: &[T]) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let z = &nodes[self.id].value;
        if z.numel() != target.len() {
            return Err(Error::shape("dice_loss", &z.shape, &[target.len()]));
        }
        let (inter, sp, sy) = dice_sums(&z.data, target);
        let loss = T::one() - (T::lit(2.0) * inter + T::one()) / (sp + sy + T::one());
        drop(nodes);
        Ok(self.record(
            Tensor::scalar(loss),
            Op::DiceLogits { logits: self.id, target: target.to_vec() },
            &[self],
        ))
    }

    /// Weighted mean of `−w[y]·log softmax(z)[y]` over the batch (divides by N).
    pub fn softmax_cross_entropy(self, labels: &[usize], weights: &[T]) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let z = &nodes[self.id].value;
        let (n, c) = match z.shape.as_slice() {
            [n, c] => (*n, *c),
            s => return Err(Error::invalid_shape("cross_entropy", format!("expected [N,C], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", &z.shape, &[labels.len()]));
        }
        if weights.len() != c {
            return Err(Error::shape("cross_entropy", &z.shape, &[weights.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range [0,{c})")));
        }
        let probs = kernels::softmax_rows(&z.data, c);
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &z.data[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += weights[y] * (lse - row[y]);
        }
        let loss = total / T::from_usize(n.max(1)).unwrap();
        drop(nodes);
        Ok(self.record(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits: self.id, labels: labels.to_vec(), weights: weights.to_vec(), probs },
            &[self],
        ))
    }

    fn map_value(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    fn zip_value(&self, other: Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.shape != b.shape {
            return Err(Error::shape(op, &a.shape, &b.shape));
        }
        Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
    }
}

fn dice_sums<T: Scalar>(logits: &[T], target: &[T]) -> (T, T, T) {
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut sy = T::zero();
    for (&z, &y) in logits.iter().zip(target) {
        let p = kernels::sigmoid(z);
        inter += p * y;
        sp += p;
        sy += y;
    }
    (inter, sp, sy)
}

impl<T: Scalar> Op<T> {
    /// Input gradients for every input that requires one.
    pub(crate) fn backward(&self, nodes: &[Node<T>], out: &Tensor<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let wants = |id: usize| nodes[id].requires_grad;
        let val = |id: usize| &nodes[id].value;
        let mut grads = Vec::new();
        match self {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let want_params = wants(*kernel) || wants(*bias);
                let (dx, dk, db) =
                    kernels::conv2d_backward(geom, &val(*input).data, &val(*kernel).data, g, wants(*input), want_params);
                if let Some(dx) = dx {
                    grads.push((*input, dx));
                }
                if wants(*kernel) {
                    grads.push((*kernel, dk));
                }
                if wants(*bias) {
                    grads.push((*bias, db));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![T::zero(); val(*input).numel()];
                for (&idx, &go) in argmax.iter().zip(g) {
                    gi[idx] += go;
                }
                grads.push((*input, gi));
            }
            Op::AvgPool3 { input } => {
                let (planes, h, w) = planes_hw(&val(*input).shape);
                grads.push((*input, kernels::avg_pool3_backward(g, planes, h, w)));
            }
            Op::Upsample2 { input } => {
                let (planes, h, w) = planes_hw(&val(*input).shape);
                grads.push((*input, kernels::upsample2_backward(g, planes, h, w)));
            }
            Op::Concat { a, b, outer, a_len, b_len } => {
                let stride = a_len + b_len;
                if wants(*a) {
                    let ga = (0..*outer).flat_map(|o| g[o * stride..o * stride + a_len].iter().copied()).collect();
                    grads.push((*a, ga));
                }
                if wants(*b) {
                    let gb = (0..*outer)
                        .flat_map(|o| g[o * stride + a_len..(o + 1) * stride].iter().copied())
                        .collect();
                    grads.push((*b, gb));
                }
            }
            Op::Dense { x, w, b } => {
                let (n, f) = (val(*x).shape[0], val(*x).shape[1]);
                let gdim = val(*w).shape[1];
                if wants(*x) {
                    let mut gx = vec![T::zero(); n * f];
                    T::gemm(n, gdim, f, g, false, &val(*w).data, true, &mut gx, false);
                    grads.push((*x, gx));
                }
                if wants(*w) {
                    let mut gw = vec![T::zero(); f * gdim];
                    T::gemm(f, n, gdim, &val(*x).data, true, g, false, &mut gw, false);
                    grads.push((*w, gw));
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); gdim];
                    for row in g.chunks(gdim) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    grads.push((*b, gb));
                }
            }
            Op::Relu { input } => {
                let gi = out.data.iter().zip(g).map(|(&y, &go)| if y > T::zero() { go } else { T::zero() });
                grads.push((*input, gi.collect()));
            }
            Op::Sigmoid { input } => {
                let gi = out.data.iter().zip(g).map(|(&y, &go)| go * y * (T::one() - y));
                grads.push((*input, gi.collect()));
            }
            Op::Softmax { input } => {
                let c = out.shape[1];
                let mut gi = Vec::with_capacity(out.numel());
                for (y, go) in out.data.chunks(c).zip(g.chunks(c)) {
                    let dot: T = y.iter().zip(go).map(|(&a, &b)| a * b).sum();
                    gi.extend(y.iter().zip(go).map(|(&yy, &gg)| yy * (gg - dot)));
                }
                grads.push((*input, gi));
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    grads.push((*a, g.to_vec()));
                }
                if wants(*b) {
                    grads.push((*b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    grads.push((*a, val(*b).data.iter().zip(g).map(|(&y, &go)| y * go).collect()));
                }
                if wants(*b) {
                    grads.push((*b, val(*a).data.iter().zip(g).map(|(&x, &go)| x * go).collect()));
                }
            }
            Op::Scale { input, factor } => {
                grads.push((*input, g.iter().map(|&go| go * *factor).collect()));
            }
            Op::Sum { input } => {
                grads.push((*input, vec![g[0]; val(*input).numel()]));
            }
            Op::PadReflect { input, bottom, right } => {
                let (planes, h, w) = planes_hw(&val(*input).shape);
                grads.push((*input, kernels::pad_reflect_backward(g, planes, h, w, *bottom, *right)));
            }
            Op::Crop { input } => {
                let (planes, h, w) = planes_hw(&val(*input).shape);
                let (oh, ow) = (out.shape[2], out.shape[3]);
                grads.push((*input, kernels::crop_backward(g, planes, h, w, oh, ow)));
            }
            Op::GlobalAvgPool { input } => {
                let s = &val(*input).shape;
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let gi = g.iter().flat_map(|&go| std::iter::repeat_n(go * inv, hw)).collect();
                grads.push((*input, gi));
            }
            Op::BceLogits { logits, target } => {
                let z = &val(*logits).data;
                let scale = g[0] / T::from_usize(z.len().max(1)).unwrap();
                let gi = z.iter().zip(target).map(|(&zi, &y)| (kernels::sigmoid(zi) - y) * scale);
                grads.push((*logits, gi.collect()));
            }
            Op::DiceLogits { logits, target } => {
                let z = &val(*logits).data;
                let (inter, sp, sy) = dice_sums(z, target);
                let denom = sp + sy + T::one();
                let numer = T::lit(2.0) * inter + T::one();
                let two = T::lit(2.0);
                let gi = z.iter().zip(target).map(|(&zi, &y)| {
                    let p = kernels::sigmoid(zi);
                    let dl_dp = -(two * y * denom - numer) / (denom * denom);
                    g[0] * dl_dp * p * (T::one() - p)
                });
                grads.push((*logits, gi.collect()));
            }
            Op::SoftmaxXent { logits, labels, weights, probs } => {
                let c = weights.len();
                let n = labels.len();
                let scale = g[0] / T::from_usize(n.max(1)).unwrap();
                let mut gi = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let row = &mut gi[i * c..(i + 1) * c];
                    row[y] -= T::one();
                    let f = weights[y] * scale;
                    row.iter_mut().for_each(|v| *v *= f);
                }
                grads.push((*logits, gi));
            }
        }
        grads
    }
}
