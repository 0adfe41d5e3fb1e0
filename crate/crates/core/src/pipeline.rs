//! Two-stage inference: segment, crop, classify.

use serde::Serialize;

use crate::error::Result;
use crate::imaging::{self, BinaryMask, RgbImage, DEFAULT_PAD_FRAC};
use crate::recnet::{RecModel, CLASS_NAMES};
use crate::scalar::Scalar;
use crate::segnet::SegModel;
use crate::training::argmax;
use crate::INPUT_SIZE;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult {
    pub mask: BinaryMask,
    /// Lesion crop at network input size.
    pub crop: RgbImage,
    /// In class order melanoma, nevus, seborrheic keratosis.
    pub probabilities: [f64; 3],
    pub predicted_label: &'static str,
    /// Set when the predicted mask was empty and the whole image was used.
    pub empty_mask_fallback: bool,
}

/// The machine-readable record printed by `classify`.
#[derive(Serialize)]
struct Record<'a> {
    probabilities: &'a [f64; 3],
    label: &'a str,
    empty_mask_fallback: bool,
}

impl PipelineResult {
    /// `{"probabilities":[..],"label":..,"empty_mask_fallback":..}`, one line.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Record {
            probabilities: &self.probabilities,
            label: self.predicted_label,
            empty_mask_fallback: self.empty_mask_fallback,
        })
        .expect("pipeline record serialize")
    }
}

pub fn classify_image<T: Scalar>(seg: &SegModel<T>, rec: &RecModel<T>, image: &RgbImage) -> Result<PipelineResult> {
    let mask = seg.predict_mask(image)?;
    let crop = imaging::crop_from_mask(image, &mask, DEFAULT_PAD_FRAC)?;
    let shape = [1, 3, INPUT_SIZE, INPUT_SIZE];
    let full = imaging::preprocess(image, INPUT_SIZE).to_tensor::<T>().reshape(shape)?;
    let crop_in = imaging::preprocess(&crop, INPUT_SIZE).to_tensor::<T>().reshape(shape)?;
    let probs = rec.infer(&full, &crop_in)?;
    let mut probabilities = [0.0; 3];
    for (p, v) in probabilities.iter_mut().zip(probs.data()) {
        *p = v.to_f64().unwrap_or(f64::NAN);
    }
    Ok(PipelineResult {
        empty_mask_fallback: mask.is_empty(),
        predicted_label: CLASS_NAMES[argmax(&probabilities)],
        mask,
        crop,
        probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recnet::RecConfig;
    use crate::segnet::SegConfig;

    fn models() -> (SegModel<f32>, RecModel<f32>) {
        let seg = SegModel::build(SegConfig { depth: 1, base_filters: 2, ..SegConfig::default() }, 1).unwrap();
        let rec = RecModel::build(RecConfig { stem_filters: 2, num_blocks: 2, block_width: 1, head_units: 4, ..RecConfig::default() }, 1).unwrap();
        (seg, rec)
    }

    fn image() -> RgbImage {
        let mut img = RgbImage::filled(40, 50, [220, 180, 150]);
        for y in 10..25 {
            for x in 15..35 {
                img.set(y, x, [70, 40, 30]);
            }
        }
        img
    }

    #[test]
    fn deterministic_distribution() {
        let (seg, rec) = models();
        let a = classify_image(&seg, &rec, &image()).unwrap();
        let b = classify_image(&seg, &rec, &image()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
        assert_eq!((a.mask.height(), a.mask.width()), (40, 50));
        assert_eq!((a.crop.height(), a.crop.width()), (150, 150));
        assert!(CLASS_NAMES.contains(&a.predicted_label));
    }

    #[test]
    fn tie_goes_to_melanoma_and_empty_mask_falls_back() {
        let (mut seg, mut rec) = models();
        // Zero output layer → uniform probabilities.
        let out = rec.params().index_of("head.out.weight").unwrap();
        rec.params_mut().get_mut(out).tensor.data_mut().fill(0.0);
        // Strongly negative final bias → empty mask.
        let bias = seg.params().index_of("final.bias").unwrap();
        seg.params_mut().get_mut(bias).tensor.data_mut().fill(-1e6);
        let r = classify_image(&seg, &rec, &image()).unwrap();
        assert_eq!(r.predicted_label, "melanoma");
        assert!(r.empty_mask_fallback);
        assert!(r.mask.is_empty());
        assert_eq!(
            r.to_json(),
            format!(
                "{{\"probabilities\":[{p},{p},{p}],\"label\":\"melanoma\",\"empty_mask_fallback\":true}}",
                p = r.probabilities[0]
            )
        );
    }
}
