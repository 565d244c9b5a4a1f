//! Dice + binary focal training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, SkinProbMap};

/// Predictions are clipped to `[FOCAL_EPS, 1 - FOCAL_EPS]` before the log.
pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
            dice_weight: 1.0,
            focal_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.focal_gamma >= 0.0
            && self.focal_alpha > 0.0
            && self.focal_alpha < 1.0
            && self.dice_smooth > 0.0
            && self.dice_weight >= 0.0
            && self.focal_weight >= 0.0
            && self.dice_weight + self.focal_weight > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss settings out of range: {self:?}")))
        }
    }
}

/// `1 - (2 Σ p g + s) / (Σ p + Σ g + s)` and its gradient w.r.t. `p`.
pub(crate) fn dice_with_grad(pred: &[f64], target: &[f64], smooth: f64) -> (f64, Vec<f64>) {
    let inter: f64 = pred.iter().zip(target).map(|(p, g)| p * g).sum();
    let denom: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>() + smooth;
    let numer = 2.0 * inter + smooth;
    let loss = 1.0 - numer / denom;
    let grad = target
        .iter()
        .map(|g| -(2.0 * g * denom - numer) / (denom * denom))
        .collect();
    (loss, grad)
}

/// Mean of `-α_t (1 - p_t)^γ ln p_t` and its gradient w.r.t. `p`.
pub(crate) fn focal_with_grad(pred: &[f64], target: &[f64], gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&raw, &t) in pred.iter().zip(target) {
        let p = raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let clipped = !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&raw);
        let positive = t > 0.5;
        // Everything is written in terms of p_t; dp_t/dp = ±1.
        let (pt, a, sign) = if positive {
            (p, alpha, 1.0)
        } else {
            (1.0 - p, 1.0 - alpha, -1.0)
        };
        let q = 1.0 - pt;
        let log_pt = pt.ln();
        total += -a * q.powf(gamma) * log_pt;
        let dq_term = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * log_pt
        };
        let dl_dpt = a * (dq_term - q.powf(gamma) / pt);
        grad.push(if clipped { 0.0 } else { sign * dl_dpt / n });
    }
    (total / n, grad)
}

fn check(pred: &SkinProbMap, gt: &BinaryMask) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs label {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

pub fn dice_loss(pred: &SkinProbMap, gt: &BinaryMask, smooth: f64) -> Result<f64> {
    check(pred, gt)?;
    Ok(dice_with_grad(pred.values(), &gt.as_f64(), smooth).0)
}

pub fn focal_loss(pred: &SkinProbMap, gt: &BinaryMask, gamma: f64, alpha: f64) -> Result<f64> {
    check(pred, gt)?;
    Ok(focal_with_grad(pred.values(), &gt.as_f64(), gamma, alpha).0)
}

pub fn combined_loss(pred: &SkinProbMap, gt: &BinaryMask, cfg: &LossConfig) -> Result<f64> {
    Ok(cfg.dice_weight * dice_loss(pred, gt, cfg.dice_smooth)?
        + cfg.focal_weight * focal_loss(pred, gt, cfg.focal_gamma, cfg.focal_alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> SkinProbMap {
        SkinProbMap::new(h, w, v.to_vec()).unwrap()
    }

    fn mask(h: usize, w: usize, v: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn dice_hand_computed() {
        let l = dice_loss(&map(2, 2, &[1.0, 0.5, 0.0, 0.0]), &mask(2, 2, &[1, 0, 0, 0]), 0.0).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
    }

    #[test]
    fn dice_perfect_overlap_on_large_mask() {
        let n = 1000 * 1000;
        let gt: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let pred: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
        let l = dice_loss(&map(1000, 1000, &pred), &mask(1000, 1000, &gt), 1.0).unwrap();
        assert!(l < 1e-6);
        let l0 = dice_loss(&map(1000, 1000, &pred), &mask(1000, 1000, &gt), 0.0).unwrap();
        assert_eq!(l0, 0.0);
    }

    #[test]
    fn dice_disjoint() {
        let gt = [1u8, 0, 1, 0, 0, 1];
        let pred: Vec<f64> = gt.iter().map(|&v| 1.0 - v as f64).collect();
        let l = dice_loss(&map(2, 3, &pred), &mask(2, 3, &gt), 1.0).unwrap();
        assert!((l - (1.0 - 1.0 / 7.0)).abs() < 1e-15);
    }

    #[test]
    fn focal_scalar_case() {
        let l = focal_loss(&map(1, 1, &[0.9]), &mask(1, 1, &[1]), 2.0, 0.25).unwrap();
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn focal_gamma_zero_is_half_bce() {
        let pred = [0.2, 0.7, 0.9, 0.4];
        let gt = [0u8, 1, 1, 0];
        let bce: f64 = pred
            .iter()
            .zip(gt)
            .map(|(&p, g): (&f64, u8)| if g == 1 { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 4.0;
        let l = focal_loss(&map(2, 2, &pred), &mask(2, 2, &gt), 0.0, 0.5).unwrap();
        assert!((l - 0.5 * bce).abs() < 1e-14);
    }

    #[test]
    fn focal_confident_correct_vanishes() {
        let l = focal_loss(&map(1, 2, &[1.0, 0.0]), &mask(1, 2, &[1, 0]), 2.0, 0.25).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn combined_projections_and_sum() {
        let pred = map(2, 2, &[1.0, 0.5, 0.0, 0.0]);
        let gt = mask(2, 2, &[1, 0, 0, 0]);
        let d = dice_loss(&pred, &gt, 1.0).unwrap();
        let f = focal_loss(&pred, &gt, 2.0, 0.25).unwrap();
        let mut cfg = LossConfig {
            dice_weight: 1.0,
            focal_weight: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(combined_loss(&pred, &gt, &cfg).unwrap(), d);
        cfg.dice_weight = 0.0;
        cfg.focal_weight = 1.0;
        assert_eq!(combined_loss(&pred, &gt, &cfg).unwrap(), f);
        cfg.dice_weight = 1.0;
        assert!((combined_loss(&pred, &gt, &cfg).unwrap() - (d + f)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        assert!(dice_loss(&map(1, 2, &[0.0, 0.0]), &mask(2, 1, &[0, 0]), 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            dice_weight: 0.0,
            focal_weight: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
