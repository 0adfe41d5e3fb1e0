//! Mask overlap scores and three-class classification quality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

/// Pixel counts shared by [`jaccard`] and [`dice`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub pred: usize,
    pub truth: usize,
}

impl Overlap {
    pub fn union(&self) -> usize {
        self.pred + self.truth - self.intersection
    }

    /// |∩|/|∪|, 1.0 when both masks are empty.
    pub fn jaccard(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }

    /// 2|∩|/(|pred|+|truth|), 1.0 when both masks are empty.
    pub fn dice(&self) -> f64 {
        match self.pred + self.truth {
            0 => 1.0,
            s => 2.0 * self.intersection as f64 / s as f64,
        }
    }
}

pub fn overlap(pred: &BinaryMask, truth: &BinaryMask) -> Result<Overlap> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::shape("mask overlap", &[pred.height(), pred.width()], &[truth.height(), truth.width()]));
    }
    let mut o = Overlap { intersection: 0, pred: 0, truth: 0 };
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        o.pred += p as usize;
        o.truth += t as usize;
        o.intersection += (p && t) as usize;
    }
    Ok(o)
}

pub fn jaccard(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, truth)?.jaccard())
}

pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, truth)?.dice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub mean_jaccard: f64,
    pub mean_dice: f64,
    pub per_image_jaccard: Vec<f64>,
    pub per_image_dice: Vec<f64>,
}

impl SegmentationReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>) -> Result<Self> {
        let mut per_image_jaccard = Vec::new();
        let mut per_image_dice = Vec::new();
        for (p, t) in pairs {
            let o = overlap(p, t)?;
            per_image_jaccard.push(o.jaccard());
            per_image_dice.push(o.dice());
        }
        if per_image_jaccard.is_empty() {
            return Err(Error::Data("segmentation report over zero images".into()));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            mean_jaccard: mean(&per_image_jaccard),
            mean_dice: mean(&per_image_dice),
            per_image_jaccard,
            per_image_dice,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// Rows are truth, columns prediction.
    pub confusion: [[usize; 3]; 3],
    /// `None` for a class with no truth samples.
    pub sensitivity: [Option<f64>; 3],
    /// `None` when every sample belongs to the class.
    pub specificity: [Option<f64>; 3],
}

pub fn classification_report(preds: &[usize], truths: &[usize]) -> Result<ClassificationReport> {
    if preds.len() != truths.len() {
        return Err(Error::shape("classification_report", &[preds.len()], &[truths.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Data("classification report over zero samples".into()));
    }
    let mut m = [[0usize; 3]; 3];
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= 3 || t >= 3 {
            return Err(Error::InvalidArgument(format!("class index out of range: pred {p}, truth {t}")));
        }
        m[t][p] += 1;
    }
    let total = preds.len();
    let trace: usize = (0..3).map(|k| m[k][k]).sum();
    let mut sensitivity = [None; 3];
    let mut specificity = [None; 3];
    for k in 0..3 {
        let row: usize = m[k].iter().sum();
        let col: usize = (0..3).map(|r| m[r][k]).sum();
        if row > 0 {
            sensitivity[k] = Some(m[k][k] as f64 / row as f64);
        }
        if total > row {
            specificity[k] = Some((total + m[k][k] - row - col) as f64 / (total - row) as f64);
        }
    }
    Ok(ClassificationReport { accuracy: trace as f64 / total as f64, confusion: m, sensitivity, specificity })
}

/// Evaluation output; exactly one part is present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
}

impl MetricsReport {
    /// Single-line JSON record.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        let b = mask(&[0, 1, 1, 0]);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let e = mask(&[0, 0, 0, 0]);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(jaccard(&a, &mask(&[1, 1, 0])).is_err());
    }

    #[test]
    fn classification_examples() {
        let r = classification_report(&[1, 1, 2], &[0, 1, 2]).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion[0][1], 1);
        assert_eq!(r.sensitivity, [Some(0.0), Some(1.0), Some(1.0)]);
        // class 1: total 3, row 1, col 2, tp 1 → (3-1-2+1)/(3-1)
        assert_eq!(r.specificity[1], Some(0.5));

        let r = classification_report(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, [[1, 0, 0], [0, 2, 0], [0, 0, 0]]);
        assert_eq!(r.sensitivity[2], None);
        assert_eq!(r.specificity[2], Some(1.0));

        assert!(classification_report(&[], &[]).is_err());
        assert!(classification_report(&[3], &[0]).is_err());
    }

    #[test]
    fn report_json_omits_missing_part() {
        let r = MetricsReport { classification: Some(classification_report(&[0], &[0]).unwrap()), ..Default::default() };
        let s = r.to_json();
        assert!(!s.contains("segmentation") && !s.contains('\n'));
        assert_eq!(serde_json::from_str::<MetricsReport>(&s).unwrap(), r);
    }
}
