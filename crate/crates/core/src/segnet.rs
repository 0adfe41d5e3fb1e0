//! Encoder/decoder lesion segmenter with skip connections.
//!
//! ```text
//! [conv3×3+relu ×2 → pool] × depth → conv3×3+relu ×2
//!   → [upsample2× → concat skip → conv3×3+relu ×2] × depth → conv1×1 (logit)
//! ```
//! Level `k` has `base_filters · 2^k` filters; the bottleneck is level `depth`.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, RgbImage};
use crate::param::{Bound, Group, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tape, Tensor, Var};
use crate::INPUT_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_filters: 8,
            in_channels: 3,
            out_channels: 1,
        }
    }
}

impl SegConfig {
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial dims must be multiples of this inside the network.
    pub fn granularity(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_filters == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid segmentation config {self:?}")));
        }
        Ok(())
    }
}

/// Indices of one conv layer's weight and bias in the store.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        group: Group,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * k * k;
        let w = Tensor::new(vec![out_ch, in_ch, k, k], rng::he_normal(rng, out_ch * fan_in, fan_in))?;
        let weight = store.add(format!("{name}.weight"), w, group)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]), group)?;
        Ok(Self { weight, bias })
    }

    pub(crate) fn conv<'t, T: Scalar>(
        &self,
        bound: &Bound<'t, T>,
        x: Var<'t, T>,
        padding: Padding,
        stride: usize,
    ) -> Result<Var<'t, T>> {
        x.conv2d(bound.var(self.weight), bound.var(self.bias), padding, stride)
    }

    pub(crate) fn conv_relu<'t, T: Scalar>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.conv(bound, x, Padding::Same, 1)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    cfg: SegConfig,
    params: ParamStore<T>,
    encoder: Vec<[ConvLayer; 2]>,
    bottleneck: [ConvLayer; 2],
    /// `decoder[k]` produces level-`k` features.
    decoder: Vec<[ConvLayer; 2]>,
    head: ConvLayer,
}

impl<T: Scalar> SegModel<T> {
    /// He-initialized model, deterministic in `seed`.
    pub fn build(cfg: SegConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, 0x5e6);
        let mut params = ParamStore::new();
        let g = Group::Seg;
        let mut pair = |params: &mut ParamStore<T>, name: &str, cin: usize, cout: usize| -> Result<[ConvLayer; 2]> {
            Ok([
                ConvLayer::create(params, &mut rng, &format!("{name}.conv1"), g, cin, cout, 3)?,
                ConvLayer::create(params, &mut rng, &format!("{name}.conv2"), g, cout, cout, 3)?,
            ])
        };
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for k in 0..cfg.depth {
            encoder.push(pair(&mut params, &format!("enc{k}"), cin, cfg.filters(k))?);
            cin = cfg.filters(k);
        }
        let bottleneck = pair(&mut params, "bottleneck", cin, cfg.filters(cfg.depth))?;
        let mut decoder = Vec::with_capacity(cfg.depth);
        for k in (0..cfg.depth).rev() {
            let merged = cfg.filters(k + 1) + cfg.filters(k);
            decoder.push(pair(&mut params, &format!("dec{k}"), merged, cfg.filters(k))?);
        }
        decoder.reverse();
        let head = ConvLayer::create(&mut params, &mut rng, "final", g, cfg.filters(0), cfg.out_channels, 1)?;
        Ok(Self { cfg, params, encoder, bottleneck, decoder, head })
    }

    /// Rebuilds the architecture from tensor shapes and loads the values.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let shape = |name: &str| {
            ckpt.get(name)
                .map(|e| e.shape.clone())
                .ok_or_else(|| Error::Checkpoint(format!("not a segmentation checkpoint: missing {name}")))
        };
        let first = shape("enc0.conv1.weight")?;
        let depth = (0..).take_while(|k| ckpt.get(&format!("enc{k}.conv1.weight")).is_some()).count();
        let out = shape("final.weight")?;
        let cfg = SegConfig {
            depth,
            base_filters: first[0],
            in_channels: first[1],
            out_channels: out[0],
        };
        let mut model = Self::build(cfg, 0)?;
        ckpt.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn config(&self) -> &SegConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.params)
    }

    /// Logits `[N,1,H,W]` for a batch `[N,3,H,W]`. Inputs whose sides are not
    /// multiples of `2^depth` are mirror-padded and the output cropped back.
    pub fn forward<'t>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::invalid_shape("seg_forward", format!("expected [N,C,H,W], got {shape:?}")));
        };
        if c != self.cfg.in_channels {
            return Err(Error::invalid_shape(
                "seg_forward",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            ));
        }
        let g = self.cfg.granularity();
        if h < g || w < g {
            return Err(Error::invalid_shape(
                "seg_forward",
                format!("input {h}×{w} smaller than {g}×{g} required by depth {}", self.cfg.depth),
            ));
        }
        let mut cur = x.pad_reflect(h.next_multiple_of(g) - h, w.next_multiple_of(g) - w)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for [a, b] in &self.encoder {
            let f = b.conv_relu(bound, a.conv_relu(bound, cur)?)?;
            skips.push(f);
            cur = f.max_pool2d()?;
        }
        let [a, b] = &self.bottleneck;
        cur = b.conv_relu(bound, a.conv_relu(bound, cur)?)?;
        for ([a, b], skip) in self.decoder.iter().zip(skips).rev() {
            let merged = cur.upsample_nearest2x()?.concat(skip)?;
            cur = b.conv_relu(bound, a.conv_relu(bound, merged)?)?;
        }
        self.head.conv(bound, cur, Padding::Same, 1)?.crop(h, w)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let x = tape.constant(batch.clone());
        Ok(self.forward(&bound, x)?.value())
    }

    /// Resize → normalize → logits → `σ ≥ 0.5` at input size, then
    /// nearest-neighbor back to the image's own dims.
    pub fn predict_mask(&self, image: &RgbImage) -> Result<BinaryMask> {
        let input = imaging::preprocess(image, INPUT_SIZE).to_tensor::<T>();
        let batch = input.reshape(vec![1, 3, INPUT_SIZE, INPUT_SIZE])?;
        let logits = self.infer(&batch)?;
        let mask = logits_to_mask(logits.data(), INPUT_SIZE, INPUT_SIZE);
        Ok(imaging::resize_mask_nearest(&mask, image.height(), image.width()))
    }
}

/// `σ(z) ≥ 0.5` is `z ≥ 0`.
pub fn logits_to_mask<T: Scalar>(logits: &[T], h: usize, w: usize) -> BinaryMask {
    BinaryMask::new(h, w, logits[..h * w].iter().map(|&z| z >= T::zero()).collect()).expect("logit plane")
}

pub fn build_segnet<T: Scalar>(cfg: SegConfig, seed: u64) -> Result<SegModel<T>> {
    SegModel::build(cfg, seed)
}

pub fn seg_forward<T: Scalar>(model: &SegModel<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    model.infer(batch)
}

pub fn predict_mask<T: Scalar>(model: &SegModel<T>, image: &RgbImage) -> Result<BinaryMask> {
    model.predict_mask(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SegConfig {
        SegConfig { depth: 1, base_filters: 1, ..SegConfig::default() }
    }

    #[test]
    fn tiny_model_layout() {
        let m = SegModel::<f32>::build(tiny(), 3).unwrap();
        let got: Vec<_> = m.params().iter().map(|p| (p.name.as_str(), p.tensor.shape().to_vec())).collect();
        let want: Vec<(&str, Vec<usize>)> = vec![
            ("enc0.conv1.weight", vec![1, 3, 3, 3]),
            ("enc0.conv1.bias", vec![1]),
            ("enc0.conv2.weight", vec![1, 1, 3, 3]),
            ("enc0.conv2.bias", vec![1]),
            ("bottleneck.conv1.weight", vec![2, 1, 3, 3]),
            ("bottleneck.conv1.bias", vec![2]),
            ("bottleneck.conv2.weight", vec![2, 2, 3, 3]),
            ("bottleneck.conv2.bias", vec![2]),
            ("dec0.conv1.weight", vec![1, 3, 3, 3]),
            ("dec0.conv1.bias", vec![1]),
            ("dec0.conv2.weight", vec![1, 1, 3, 3]),
            ("dec0.conv2.bias", vec![1]),
            ("final.weight", vec![1, 1, 1, 1]),
            ("final.bias", vec![1]),
        ];
        assert_eq!(got, want);
        assert!(m.params().iter().all(|p| p.group == Group::Seg));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SegModel::<f32>::build(SegConfig::default(), 11).unwrap();
        let b = SegModel::<f32>::build(SegConfig::default(), 11).unwrap();
        let c = SegModel::<f32>::build(SegConfig::default(), 12).unwrap();
        assert_eq!(a.params().checksums(), b.params().checksums());
        assert_ne!(a.params().checksums(), c.params().checksums());
    }

    #[test]
    fn padded_and_unpadded_shapes() {
        let m = SegModel::<f32>::build(SegConfig::default(), 1).unwrap();
        let out = m.infer(&Tensor::zeros(vec![1, 3, 64, 64])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 64, 64]);
        let x = Tensor::from_f64(vec![2, 3, 150, 150], &(0..2 * 3 * 150 * 150).map(|i| ((i % 97) as f64 - 48.0) / 30.0).collect::<Vec<_>>()).unwrap();
        let out = m.infer(&x).unwrap();
        assert_eq!(out.shape(), &[2, 1, 150, 150]);
        assert!(out.all_finite());
        assert!(m.infer(&Tensor::zeros(vec![1, 3, 7, 64])).is_err());
    }

    #[test]
    fn checkpoint_rebuilds_same_model() {
        let m = SegModel::<f32>::build(SegConfig { depth: 2, base_filters: 3, ..SegConfig::default() }, 5).unwrap();
        let back = SegModel::<f32>::from_checkpoint(&m.checkpoint()).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().checksums(), m.params().checksums());
    }

    #[test]
    fn mask_threshold_limits() {
        let z = [f32::INFINITY, f32::NEG_INFINITY, 0.0, -1e-6];
        assert_eq!(logits_to_mask(&z, 1, 4).data(), &[true, false, true, false]);
    }

    #[test]
    fn predicted_mask_has_image_dims() {
        let m = SegModel::<f32>::build(tiny(), 1).unwrap();
        let img = RgbImage::filled(37, 61, [120, 80, 60]);
        let mask = m.predict_mask(&img).unwrap();
        assert_eq!((mask.height(), mask.width()), (37, 61));
    }
}
