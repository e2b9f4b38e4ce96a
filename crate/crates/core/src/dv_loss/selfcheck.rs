//! Randomized identity and gradient suites behind `dv-forge losscheck`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    combined_loss, loss_gradient, numeric_gradient, relative_error, text_loss, vision_loss,
    LossConfig, PositionKind, SequenceBatch,
};
use crate::error::Result;

/// Denominator floor for relative gradient errors. Central differences at
/// step 1e-5 carry about 1e-10 of cancellation error, so entries smaller than
/// this are effectively held to an absolute tolerance of 1e-9.
pub const GRADIENT_FLOOR: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub worst: f64,
    pub threshold: f64,
}

/// Random sequence with visual, prompt and response positions, at least one
/// labeled visual position and one response position.
pub fn random_batch<R: Rng>(rng: &mut R, max_vocab: usize, max_len: usize) -> SequenceBatch {
    let vocab = rng.gen_range(2..=max_vocab);
    let len = rng.gen_range(3..=max_len.max(3));
    let visual = rng.gen_range(1..len - 1);
    let prompt = rng.gen_range(0..len - visual);
    let label_count = rng.gen_range(1..=vocab.min(4));
    let mut labels: Vec<usize> = Vec::new();
    while labels.len() < label_count {
        let t = rng.gen_range(0..vocab);
        if !labels.contains(&t) {
            labels.push(t);
        }
    }
    let mut kinds = Vec::with_capacity(len);
    let mut targets = Vec::with_capacity(len);
    for i in 0..len {
        if i < visual {
            kinds.push(PositionKind::Visual);
            let labeled = i == 0 || rng.gen_bool(0.6);
            targets.push(labeled.then(|| labels[rng.gen_range(0..labels.len())]));
        } else if i < visual + prompt {
            kinds.push(PositionKind::Prompt);
            targets.push(None);
        } else {
            kinds.push(PositionKind::Response);
            targets.push(Some(rng.gen_range(0..vocab)));
        }
    }
    let scale = rng.gen_range(0.5..4.0);
    let logits = Array2::from_shape_fn((len, vocab), |_| rng.gen_range(-scale..scale));
    SequenceBatch {
        kinds,
        targets,
        logits,
        vision_label_set: labels,
    }
}

/// Plain first-token cross-entropy computed directly from exp/ln, as an
/// independent reference for the beta = 0 reduction.
fn plain_first_token_ce(batch: &SequenceBatch) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, t) in batch.labeled_visual() {
        let row = batch.logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += -(row[t] - max - z.ln());
        count += 1;
    }
    total / count as f64
}

pub fn identity_suite(seed: u64, cases: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_beta = 0.0f64;
    let mut worst_lambda = 0.0f64;
    for _ in 0..cases {
        let b = random_batch(&mut rng, 32, 16);
        let beta0 = LossConfig {
            beta: 0.0,
            ..LossConfig::default()
        };
        let ours = vision_loss(&b, &beta0)?;
        let reference = plain_first_token_ce(&b);
        worst_beta = worst_beta.max((ours - reference).abs() / reference.abs().max(f64::MIN_POSITIVE));

        let lambda0 = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let total = combined_loss(&b, &lambda0)?.total;
        worst_lambda = worst_lambda.max((total - text_loss(&b)?).abs());
    }
    Ok(vec![
        CheckResult {
            name: "vision loss at beta=0 equals first-token cross-entropy".into(),
            passed: worst_beta <= 1e-12,
            cases,
            worst: worst_beta,
            threshold: 1e-12,
        },
        CheckResult {
            name: "combined loss at lambda=0 equals text loss".into(),
            passed: worst_lambda == 0.0,
            cases,
            worst: worst_lambda,
            threshold: 0.0,
        },
    ])
}

pub fn gradient_suite(seed: u64, cases: usize, cfg: &LossConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let b = random_batch(&mut rng, 32, 16);
        let analytic = loss_gradient(&b, cfg)?;
        let numeric = numeric_gradient(&b, cfg, FD_STEP)?;
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            worst = worst.max(relative_error(*a, *n, GRADIENT_FLOOR));
        }
    }
    Ok(CheckResult {
        name: format!(
            "loss gradient vs central differences (beta={}, lambda={})",
            cfg.beta, cfg.lambda
        ),
        passed: worst < 1e-6,
        cases,
        worst,
        threshold: 1e-6,
    })
}

/// Everything `losscheck` runs.
pub fn run(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = identity_suite(seed, 100)?;
    results.push(gradient_suite(seed.wrapping_add(1), 100, &LossConfig::default())?);
    let heavy = LossConfig {
        lambda: 1.0,
        ..LossConfig::default()
    };
    results.push(gradient_suite(seed.wrapping_add(2), 100, &heavy)?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for r in run(7).unwrap() {
            assert!(r.passed, "{} worst {}", r.name, r.worst);
        }
    }

    #[test]
    fn random_batches_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let b = random_batch(&mut rng, 32, 16);
            b.validate().unwrap();
            assert!(b.labeled_visual().count() >= 1);
            assert!(b.response_positions().count() >= 1);
        }
    }
}
