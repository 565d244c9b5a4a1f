//! Pixel-count evaluation metrics.
//!
//! Precision, recall, F1, CDR (overall pixel accuracy) and IoU are computed
//! from counts aggregated over the whole dataset. DSC is the mean of the
//! per-image Dice coefficients, so it differs from F1 whenever images
//! differ in size or difficulty.
//!
//! A ratio whose denominator is zero is 1.0 when its error count is also
//! zero and 0.0 otherwise.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::types::BinaryMask;

/// Binarization threshold applied to sigmoid outputs before counting.
pub const EVAL_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// `num / den`, with the zero-denominator convention. `den == 0` implies the
/// error count inside it is zero too.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if !pred.same_dims(gt) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs label {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub cdr: f64,
    pub dsc: f64,
    pub iou: f64,
}

impl Metrics {
    /// Metrics over a set of images, one confusion record each.
    pub fn from_images(per_image: &[ConfusionCounts]) -> Metrics {
        let agg = per_image.iter().fold(ConfusionCounts::default(), |a, &b| a + b);
        let precision = ratio(agg.tp, agg.tp + agg.fp);
        let recall = ratio(agg.tp, agg.tp + agg.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let dsc = if per_image.is_empty() {
            1.0
        } else {
            per_image.iter().map(ConfusionCounts::dice).sum::<f64>() / per_image.len() as f64
        };
        Metrics {
            precision,
            recall,
            f1,
            cdr: ratio(agg.tp + agg.tn, agg.total()),
            dsc,
            iou: ratio(agg.tp, agg.tp + agg.fp + agg.fn_),
        }
    }

    pub fn from_counts(counts: ConfusionCounts) -> Metrics {
        Self::from_images(&[counts])
    }

    pub fn get(&self, name: MonitorMetric) -> f64 {
        match name {
            MonitorMetric::F1 => self.f1,
            MonitorMetric::Dsc => self.dsc,
        }
    }
}

/// Validation metric watched by the relabeling stop rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonitorMetric {
    F1,
    Dsc,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = BinaryMask::from_fn(8, 8, |r, c| (r + c) % 3 == 0);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let m = Metrics::from_images(&[c, c]);
        for v in [m.precision, m.recall, m.f1, m.cdr, m.dsc, m.iou] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn inverted_prediction() {
        let gt = BinaryMask::from_fn(4, 5, |r, c| r > c);
        let inv = BinaryMask::from_fn(4, 5, |r, c| r <= c);
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn table_like_ratios() {
        let c = ConfusionCounts {
            tp: 88,
            fp: 12,
            fn_: 14,
            tn: 886,
        };
        let m = Metrics::from_counts(c);
        assert!((m.precision - 0.88).abs() < 1e-15);
        assert!((m.recall - 88.0 / 102.0).abs() < 1e-15);
        assert!((m.recall - 0.8627).abs() < 1e-4);
        assert!((m.cdr - 0.974).abs() < 1e-15);
    }

    #[test]
    fn dsc_is_image_averaged() {
        // image A: perfect (dice 1); image B: tp=1, fp=2, fn=0 -> dice 0.5
        let a = ConfusionCounts {
            tp: 10,
            fp: 0,
            fn_: 0,
            tn: 6,
        };
        let b = ConfusionCounts {
            tp: 1,
            fp: 2,
            fn_: 0,
            tn: 13,
        };
        let m = Metrics::from_images(&[a, b]);
        assert!((m.dsc - 0.75).abs() < 1e-15);
        // aggregated: tp 11, fp 2, fn 0 -> f1 = 22/24
        assert!((m.f1 - 22.0 / 24.0).abs() < 1e-15);
        assert!(m.f1 != m.dsc);
    }

    #[test]
    fn zero_denominator_convention() {
        let empty = ConfusionCounts {
            tn: 9,
            ..Default::default()
        };
        let m = Metrics::from_counts(empty);
        assert_eq!((m.precision, m.recall, m.iou, m.dsc), (1.0, 1.0, 1.0, 1.0));
        let missed = ConfusionCounts {
            fn_: 3,
            tn: 6,
            ..Default::default()
        };
        let m = Metrics::from_counts(missed);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn counts_merge_associatively() {
        let a = ConfusionCounts {
            tp: 1,
            fp: 2,
            tn: 3,
            fn_: 4,
        };
        let b = ConfusionCounts {
            tp: 5,
            fp: 6,
            tn: 7,
            fn_: 8,
        };
        let c = ConfusionCounts {
            tp: 9,
            fp: 1,
            tn: 2,
            fn_: 3,
        };
        assert_eq!((a + b) + c, a + (b + c));
    }
}
