//! Plain SGD training loop, checkpoint metrics and greedy decoding.

use ndarray::s;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, nn, sequence_layout, Example, Parameters, ToyConfig, EOS};
use crate::dv_loss::{combined_loss, loss_gradient, LossConfig, SequenceBatch};
use crate::error::{Error, Result};
use crate::util::{derive_seed, pairwise_sum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean combined training loss over the steps since the last checkpoint.
    pub train_loss: f64,
    pub text_loss: f64,
    /// Validation vision loss; measured whether or not it is trained.
    pub vision_loss: f64,
    pub extraction_accuracy: f64,
    pub vision_top1: f64,
    /// Future text tokens left earlier logits untouched on a probe sequence.
    pub causal_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub beta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainReport {
    pub fn final_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn at_step(&self, step: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.step == step)
    }
}

/// Loss parts of one example and the accumulated parameter gradient, scaled
/// by `weight`.
fn example_gradient(
    params: &Parameters,
    ex: &Example,
    loss: &LossConfig,
    weight: f64,
    grads: &mut [f64],
) -> Result<f64> {
    let text = ex.text_input();
    let (logits, cache) = nn::forward(params, &ex.net_input(&text))?;
    let (kinds, targets) = sequence_layout(ex);
    let batch = SequenceBatch {
        kinds,
        targets,
        logits,
        vision_label_set: ex.label_set.clone(),
    };
    let parts = combined_loss(&batch, loss)?;
    let dlogits = loss_gradient(&batch, loss)? * weight;
    nn::backward(params, &cache, &dlogits, grads);
    Ok(parts.total)
}

/// Mean combined loss over `examples` and its gradient.
pub fn batch_gradient(
    params: &Parameters,
    examples: &[&Example],
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = params.zeros_like();
    let weight = 1.0 / examples.len() as f64;
    let mut losses = Vec::with_capacity(examples.len());
    for ex in examples {
        losses.push(example_gradient(params, ex, loss, weight, &mut grads)?);
    }
    Ok((pairwise_sum(&losses) * weight, grads))
}

/// Greedy answer bytes after the prompt, stopping at EOS or the byte limit.
pub fn greedy_answer(params: &Parameters, ex: &Example, max_bytes: usize) -> Result<Vec<u8>> {
    let mut text = ex.prefix();
    let room = params.dims.max_seq.saturating_sub(ex.visual_targets.len() + text.len());
    let mut out = Vec::new();
    for _ in 0..max_bytes.min(room + 1) {
        let (logits, _) = nn::forward(params, &ex.net_input(&text))?;
        let last = logits.row(logits.nrows() - 1);
        let mut best = 0;
        for (i, v) in last.iter().enumerate() {
            if *v > last[best] {
                best = i;
            }
        }
        if best == EOS || best > 255 || text.len() + ex.visual_targets.len() >= params.dims.max_seq {
            break;
        }
        out.push(best as u8);
        text.push(best);
    }
    Ok(out)
}

/// Exact-match rate of greedy answers against the stored responses.
pub fn evaluate_extraction(params: &Parameters, val: &[Example], max_bytes: usize) -> Result<f64> {
    if val.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in val {
        let answer = greedy_answer(params, ex, max_bytes)?;
        let truth: Vec<u8> = ex.response.iter().map(|&b| b as u8).collect();
        hits += usize::from(answer == truth);
    }
    Ok(hits as f64 / val.len() as f64)
}

/// Whether changing the last text token leaves all earlier logits unchanged
/// to 1e-10.
pub fn causal_probe(params: &Parameters, ex: &Example) -> Result<bool> {
    let text = ex.text_input();
    let mut other = text.clone();
    let last = other.len() - 1;
    other[last] = (other[last] + 1) % 256;
    let (a, _) = nn::forward(params, &ex.net_input(&text))?;
    let (b, _) = nn::forward(params, &ex.net_input(&other))?;
    let cut = a.nrows() - 1;
    let diff = (&a.slice(s![..cut, ..]) - &b.slice(s![..cut, ..]))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(diff < 1e-10)
}

/// Validation metrics at `step`.
pub fn evaluate(
    params: &Parameters,
    val: &[Example],
    loss: &LossConfig,
    max_bytes: usize,
    step: usize,
    train_loss: f64,
) -> Result<Checkpoint> {
    let mut text = Vec::new();
    let mut vision = Vec::new();
    let (mut hits, mut labeled) = (0usize, 0usize);
    for ex in val {
        let batch = forward(params, ex)?;
        let parts = combined_loss(&batch, loss)?;
        text.push(parts.text);
        if ex.labeled_count() > 0 {
            vision.push(parts.vision);
        }
        for (i, t) in batch.labeled_visual() {
            let row = batch.logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += usize::from(best == t);
            labeled += 1;
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { pairwise_sum(v) / v.len() as f64 };
    Ok(Checkpoint {
        step,
        train_loss,
        text_loss: mean(&text),
        vision_loss: mean(&vision),
        extraction_accuracy: evaluate_extraction(params, val, max_bytes)?,
        vision_top1: if labeled == 0 { 0.0 } else { hits as f64 / labeled as f64 },
        causal_ok: match val.first() {
            Some(ex) => causal_probe(params, ex)?,
            None => true,
        },
    })
}

/// Train from a seeded initialization. Metrics are taken every
/// `cfg.eval_every` steps and after the last step.
pub fn train(
    cfg: &ToyConfig,
    train_set: &[Example],
    val_set: &[Example],
    loss: &LossConfig,
) -> Result<(Parameters, TrainReport)> {
    train_with(cfg, train_set, val_set, loss, &mut |_, _| Ok(()))
}

/// As `train`, calling `on_checkpoint` after every checkpoint.
pub fn train_with(
    cfg: &ToyConfig,
    train_set: &[Example],
    val_set: &[Example],
    loss: &LossConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint, &Parameters) -> Result<()>,
) -> Result<(Parameters, TrainReport)> {
    cfg.validate()?;
    loss.validate()?;
    if train_set.is_empty() {
        return Err(Error::ModelConfig("empty training set".into()));
    }
    let mut params = Parameters::init(cfg.dims(), derive_seed(cfg.seed, "init", "toy"))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order", "toy"));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut report = TrainReport {
        beta: loss.beta,
        lambda: loss.lambda,
        seed: cfg.seed,
        checkpoints: Vec::new(),
    };
    let mut window = Vec::new();
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let (value, mut grads) = batch_gradient(&params, &batch, loss)?;
        if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: value });
        }
        window.push(value);
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            let k = cfg.max_grad_norm / norm;
            grads.iter_mut().for_each(|g| *g *= k);
        }
        for (p, g) in params.values.iter_mut().zip(&grads) {
            *p -= cfg.learning_rate * g;
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let train_loss = pairwise_sum(&window) / window.len() as f64;
            window.clear();
            let cp = evaluate(&params, val_set, loss, cfg.max_answer_bytes, step, train_loss)?;
            on_checkpoint(&cp, &params)?;
            report.checkpoints.push(cp);
        }
    }
    Ok((params, report))
}
