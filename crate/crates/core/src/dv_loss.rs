//! The DV-SFT objective over per-position logits.
//!
//! * text loss: mean next-token cross-entropy over response positions;
//! * vision loss: cross-entropy at labeled visual positions against the
//!   label's first token, with Vision Smoothing spreading `beta` of the target
//!   mass uniformly over the other vision labels of the same image;
//! * combined: `text + lambda * vision`.
//!
//! All arithmetic is `f64`; reductions use pairwise summation.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    Visual,
    Prompt,
    /// A position whose logits are scored against the next response token.
    Response,
}

/// One sequence: position kinds, optional targets, and logits (positions x vocab).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub kinds: Vec<PositionKind>,
    pub targets: Vec<Option<usize>>,
    pub logits: Array2<f64>,
    /// Distinct first-token ids of every vision label in the image.
    pub vision_label_set: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kinds.len();
        if self.targets.len() != n || self.logits.nrows() != n {
            return Err(Error::LossInput(format!(
                "{} kinds, {} targets, {} logit rows",
                n,
                self.targets.len(),
                self.logits.nrows()
            )));
        }
        let vocab = self.vocab_size();
        for (i, (k, t)) in self.kinds.iter().zip(&self.targets).enumerate() {
            match (k, t) {
                (PositionKind::Response, None) => {
                    return Err(Error::LossInput(format!("response position {i} has no target")))
                }
                (PositionKind::Prompt, Some(_)) => {
                    return Err(Error::LossInput(format!("prompt position {i} has a target")))
                }
                (_, Some(t)) if *t >= vocab => {
                    return Err(Error::LossInput(format!(
                        "target {t} at position {i} outside vocab {vocab}"
                    )))
                }
                _ => {}
            }
        }
        if self.labeled_visual().next().is_some() && self.vision_label_set.is_empty() {
            return Err(Error::LossInput("visual targets present but label set is empty".into()));
        }
        Ok(())
    }

    pub fn response_positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positions_of(PositionKind::Response)
    }

    pub fn labeled_visual(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positions_of(PositionKind::Visual)
    }

    fn positions_of(&self, kind: PositionKind) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.kinds
            .iter()
            .zip(&self.targets)
            .enumerate()
            .filter_map(move |(i, (k, t))| match (k, t) {
                (k, Some(t)) if *k == kind => Some((i, *t)),
                _ => None,
            })
    }

    pub fn visual_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k == PositionKind::Visual).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionDenominator {
    /// Divide by the number of labeled visual positions.
    LabeledCount,
    /// Divide by every visual position, labeled or not.
    AllVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda: f64,
    pub vision_denominator: VisionDenominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.3,
            lambda: 2e-3,
            vision_denominator: VisionDenominator::LabeledCount,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1), got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn log_softmax_row(row: ArrayView1<f64>, position: usize) -> Result<Vec<f64>> {
    if row.iter().any(|v| !v.is_finite()) || row.is_empty() {
        return Err(Error::NonFinite { position });
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = row.iter().map(|v| v - max).collect();
    let exps: Vec<f64> = shifted.iter().map(|v| v.exp()).collect();
    let lse = pairwise_sum(&exps).ln();
    Ok(shifted.into_iter().map(|v| v - lse).collect())
}

/// Numerically stable log-softmax.
pub fn log_softmax(values: &[f64]) -> Result<Vec<f64>> {
    log_softmax_row(ArrayView1::from(values), 0)
}

/// Target distribution at a visual position: `1 - beta` on the position's own
/// label, `beta / (|V| - 1)` on every other label in `label_set`. With a
/// single label the whole mass stays on it.
pub fn smoothing_weights(target: usize, label_set: &[usize], beta: f64) -> Result<BTreeMap<usize, f64>> {
    let distinct: std::collections::BTreeSet<usize> = label_set.iter().copied().collect();
    if !distinct.contains(&target) {
        return Err(Error::LossInput(format!("target {target} is not among the vision labels")));
    }
    if distinct.len() == 1 {
        return Ok(BTreeMap::from([(target, 1.0)]));
    }
    let other = beta / (distinct.len() - 1) as f64;
    Ok(distinct
        .into_iter()
        .map(|t| (t, if t == target { 1.0 - beta } else { other }))
        .collect())
}

/// Mean negative log-likelihood of the response tokens.
pub fn text_loss(batch: &SequenceBatch) -> Result<f64> {
    batch.validate()?;
    let terms = batch
        .response_positions()
        .map(|(i, t)| Ok(-log_softmax_row(batch.logits.row(i), i)?[t]))
        .collect::<Result<Vec<f64>>>()?;
    if terms.is_empty() {
        return Err(Error::LossInapplicable("no response positions".into()));
    }
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

fn vision_denominator(batch: &SequenceBatch, cfg: &LossConfig, labeled: usize) -> f64 {
    match cfg.vision_denominator {
        VisionDenominator::LabeledCount => labeled as f64,
        VisionDenominator::AllVisual => batch.visual_count() as f64,
    }
}

/// Smoothed first-token loss over labeled visual positions.
pub fn vision_loss(batch: &SequenceBatch, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    let terms = batch
        .labeled_visual()
        .map(|(i, t)| {
            let logp = log_softmax_row(batch.logits.row(i), i)?;
            let weights = smoothing_weights(t, &batch.vision_label_set, cfg.beta)?;
            let parts: Vec<f64> = weights.iter().map(|(&id, &w)| -w * logp[id]).collect();
            Ok(pairwise_sum(&parts))
        })
        .collect::<Result<Vec<f64>>>()?;
    if terms.is_empty() {
        return Err(Error::LossInapplicable("no labeled visual positions".into()));
    }
    Ok(pairwise_sum(&terms) / vision_denominator(batch, cfg, terms.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub text: f64,
    pub vision: f64,
}

/// `text + lambda * vision`; vision is 0 when nothing is labeled.
pub fn combined_loss(batch: &SequenceBatch, cfg: &LossConfig) -> Result<LossParts> {
    let text = text_loss(batch)?;
    let vision = if batch.labeled_visual().next().is_some() {
        vision_loss(batch, cfg)?
    } else {
        0.0
    };
    Ok(LossParts {
        total: text + cfg.lambda * vision,
        text,
        vision,
    })
}

/// Gradient of `combined_loss` with respect to the logits.
pub fn loss_gradient(batch: &SequenceBatch, cfg: &LossConfig) -> Result<Array2<f64>> {
    batch.validate()?;
    let mut grad = Array2::<f64>::zeros(batch.logits.raw_dim());
    let text: Vec<(usize, usize)> = batch.response_positions().collect();
    if text.is_empty() {
        return Err(Error::LossInapplicable("no response positions".into()));
    }
    let n = text.len() as f64;
    for (i, t) in text {
        let logp = log_softmax_row(batch.logits.row(i), i)?;
        let mut row = grad.row_mut(i);
        for (g, lp) in row.iter_mut().zip(&logp) {
            *g = lp.exp() / n;
        }
        row[t] -= 1.0 / n;
    }
    let visual: Vec<(usize, usize)> = batch.labeled_visual().collect();
    if !visual.is_empty() && cfg.lambda != 0.0 {
        let scale = cfg.lambda / vision_denominator(batch, cfg, visual.len());
        for (i, t) in visual {
            let logp = log_softmax_row(batch.logits.row(i), i)?;
            let weights = smoothing_weights(t, &batch.vision_label_set, cfg.beta)?;
            let mut row = grad.row_mut(i);
            for (g, lp) in row.iter_mut().zip(&logp) {
                *g = lp.exp() * scale;
            }
            for (id, w) in weights {
                row[id] -= w * scale;
            }
        }
    }
    Ok(grad)
}

/// Central finite-difference gradient of `combined_loss` w.r.t. the logits.
pub fn numeric_gradient(batch: &SequenceBatch, cfg: &LossConfig, step: f64) -> Result<Array2<f64>> {
    let mut probe = batch.clone();
    let mut grad = Array2::<f64>::zeros(batch.logits.raw_dim());
    for ((i, j), g) in grad.indexed_iter_mut() {
        let orig = probe.logits[(i, j)];
        probe.logits[(i, j)] = orig + step;
        let plus = combined_loss(&probe, cfg)?.total;
        probe.logits[(i, j)] = orig - step;
        let minus = combined_loss(&probe, cfg)?.total;
        probe.logits[(i, j)] = orig;
        *g = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Relative error with the denominator floored at `floor`; entries where both
/// sides sit below finite-difference resolution compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub mod selfcheck;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn batch(kinds: Vec<PositionKind>, targets: Vec<Option<usize>>, logits: Array2<f64>, v: Vec<usize>) -> SequenceBatch {
        SequenceBatch {
            kinds,
            targets,
            logits,
            vision_label_set: v,
        }
    }

    use PositionKind::{Prompt, Response, Visual};

    #[test]
    fn log_softmax_examples() {
        let ln2 = std::f64::consts::LN_2;
        let out = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((out[0] + ln2).abs() < 1e-15 && (out[1] + ln2).abs() < 1e-15);

        let out = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(out[0].abs() < 1e-300 || out[0] == 0.0);
        assert!((out[1] + 1000.0).abs() < 1e-9);

        // ln(e + e^2 + e^3) = 3 + ln(1 + e^-1 + e^-2)
        let lse = 3.0 + (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        let out = log_softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (k, o) in out.iter().enumerate() {
            let want = (k as f64 + 1.0) - lse;
            assert!((o - want).abs() <= 1e-12 * want.abs(), "{o} vs {want}");
        }
        let total: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        assert!(log_softmax(&[1.0, f64::NAN]).is_err());
        assert!(log_softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(log_softmax(&[f64::NEG_INFINITY, 0.0]).is_err());
    }

    #[test]
    fn text_loss_examples() {
        let b = batch(vec![Prompt, Response, Response], vec![None, Some(3), Some(7)], Array2::zeros((3, 10)), vec![]);
        assert!((text_loss(&b).unwrap() - 10f64.ln()).abs() < 1e-15);

        // two-level logits: target at a, the other 3 at 0 -> p = e^a / (e^a + 3)
        let a = 2.0f64;
        let b = batch(vec![Response], vec![Some(1)], array![[0.0, a, 0.0, 0.0]], vec![]);
        let p = a.exp() / (a.exp() + 3.0);
        assert!((text_loss(&b).unwrap() + p.ln()).abs() < 1e-14);

        let empty = batch(vec![Prompt], vec![None], Array2::zeros((1, 4)), vec![]);
        assert!(matches!(text_loss(&empty), Err(Error::LossInapplicable(_))));
    }

    #[test]
    fn smoothing_weight_examples() {
        let w = smoothing_weights(5, &[5, 9, 2], 0.3).unwrap();
        assert_eq!(w[&5], 0.7);
        assert_eq!(w[&9], 0.15);
        assert_eq!(w[&2], 0.15);
        assert_eq!(smoothing_weights(5, &[5], 0.3).unwrap(), BTreeMap::from([(5, 1.0)]));
        let w = smoothing_weights(5, &[5, 9, 2], 0.0).unwrap();
        assert_eq!((w[&5], w[&9], w[&2]), (1.0, 0.0, 0.0));
        // duplicates collapse
        let w = smoothing_weights(5, &[5, 9, 9, 2, 5], 0.3).unwrap();
        assert_eq!(w.len(), 3);
        assert!(smoothing_weights(4, &[5, 9], 0.3).is_err());
    }

    #[test]
    fn vision_loss_examples() {
        let logits = Array2::zeros((4, 10));
        let b = batch(
            vec![Visual, Visual, Visual, Response],
            vec![Some(1), None, Some(4), Some(0)],
            logits,
            vec![1, 4, 6],
        );
        let cfg = LossConfig::default();
        assert!((vision_loss(&b, &cfg).unwrap() - 10f64.ln()).abs() < 1e-14);

        // hand-set logits, vocab 3, labels {0, 2}, beta 0.3
        let logits = array![[1.0, 0.0, 0.0], [0.0, 0.5, 2.0], [0.0, 0.0, 0.0]];
        let b = batch(vec![Visual, Visual, Response], vec![Some(0), Some(2), Some(1)], logits, vec![0, 2]);
        let lse0 = (1f64.exp() + 2.0).ln();
        let lse1 = (1.0 + 0.5f64.exp() + 2f64.exp()).ln();
        let pos0 = -(0.7 * (1.0 - lse0) + 0.3 * (0.0 - lse0));
        let pos1 = -(0.7 * (2.0 - lse1) + 0.3 * (0.0 - lse1));
        let want = (pos0 + pos1) / 2.0;
        assert!((vision_loss(&b, &cfg).unwrap() - want).abs() < 1e-14);

        let all = LossConfig {
            vision_denominator: VisionDenominator::AllVisual,
            ..cfg
        };
        assert!((vision_loss(&b, &all).unwrap() - want).abs() < 1e-14);

        let none = batch(vec![Visual, Response], vec![None, Some(0)], Array2::zeros((2, 3)), vec![]);
        assert!(matches!(vision_loss(&none, &cfg), Err(Error::LossInapplicable(_))));
    }

    #[test]
    fn all_visual_denominator_counts_unlabeled() {
        let b = batch(
            vec![Visual, Visual, Visual, Visual, Response],
            vec![Some(0), None, None, None, Some(0)],
            Array2::zeros((5, 4)),
            vec![0],
        );
        let labeled = vision_loss(&b, &LossConfig::default()).unwrap();
        let all = vision_loss(
            &b,
            &LossConfig {
                vision_denominator: VisionDenominator::AllVisual,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert!((labeled - 4.0 * all).abs() < 1e-14);
    }

    #[test]
    fn combined_examples() {
        let b = batch(
            vec![Visual, Prompt, Response],
            vec![Some(2), None, Some(1)],
            array![[0.3, -1.0, 2.0], [5.0, 5.0, 5.0], [0.1, 0.2, 0.3]],
            vec![2, 0],
        );
        let zero = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let parts = combined_loss(&b, &zero).unwrap();
        assert_eq!(parts.total, text_loss(&b).unwrap());

        let one = LossConfig {
            lambda: 1.0,
            ..LossConfig::default()
        };
        let parts = combined_loss(&b, &one).unwrap();
        assert_eq!(parts.total, parts.text + parts.vision);

        let unlabeled = batch(vec![Visual, Response], vec![None, Some(1)], Array2::zeros((2, 3)), vec![]);
        let parts = combined_loss(&unlabeled, &LossConfig::default()).unwrap();
        assert_eq!((parts.vision, parts.total), (0.0, parts.text));
    }

    #[test]
    fn reported_magnitudes_combine() {
        let (text, vision) = (0.98, 24.30);
        let total = text + LossConfig::default().lambda * vision;
        assert!((total - 1.0286).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let b = batch(vec![Response], vec![Some(0)], Array2::zeros((1, 2)), vec![]);
        let g = loss_gradient(&b, &LossConfig::default()).unwrap();
        assert_eq!(g, array![[-0.5, 0.5]]);

        // smoothed visual row: softmax - weights, scaled by lambda / labeled count
        let cfg = LossConfig {
            lambda: 0.5,
            ..LossConfig::default()
        };
        let b = batch(
            vec![Visual, Response],
            vec![Some(1), Some(0)],
            array![[0.2, -0.4, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]],
            vec![1, 3, 2],
        );
        let g = loss_gradient(&b, &cfg).unwrap();
        let p: Vec<f64> = log_softmax(&[0.2, -0.4, 1.0, 0.0]).unwrap().iter().map(|v| v.exp()).collect();
        let w = [0.0, 0.7, 0.15, 0.15];
        for k in 0..4 {
            assert!((g[(0, k)] - 0.5 * (p[k] - w[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn prompt_and_unlabeled_rows_have_zero_gradient() {
        let b = batch(
            vec![Visual, Visual, Prompt, Response],
            vec![Some(0), None, None, Some(2)],
            array![[1.0, 2.0, 3.0], [0.5, 0.1, 0.0], [3.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![0, 1],
        );
        let g = loss_gradient(&b, &LossConfig::default()).unwrap();
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        assert!(g.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validation_errors() {
        let bad = batch(vec![Response], vec![None], Array2::zeros((1, 2)), vec![]);
        assert!(bad.validate().is_err());
        let bad = batch(vec![Prompt], vec![Some(0)], Array2::zeros((1, 2)), vec![]);
        assert!(bad.validate().is_err());
        let bad = batch(vec![Visual, Response], vec![Some(0), Some(0)], Array2::zeros((2, 2)), vec![]);
        assert!(bad.validate().is_err());
        let bad = batch(vec![Response], vec![Some(5)], Array2::zeros((1, 2)), vec![]);
        assert!(bad.validate().is_err());
        assert!(LossConfig { beta: 1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..LossConfig::default() }.validate().is_err());
    }
}
