//! Desk-scale multimodal model trained with the combined loss.
//!
//! Images enter as one contrast map per patch (distance from the dominant
//! background color), so rendered documents look the same in any color pair.

use std::collections::BTreeSet;

use image::RgbImage;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dv_loss::{LossConfig, PositionKind, SequenceBatch};
use crate::error::{Error, Result};
use crate::label_align::LabeledSample;
use crate::patch_grid::PatchGrid;

pub mod nn;
pub mod params;
pub mod task;
pub mod train;

pub use nn::NetInput;
pub use params::{ModelDims, Parameters};
pub use train::{evaluate, evaluate_extraction, greedy_answer, train, Checkpoint, TrainReport};

pub const BOS: usize = 256;
pub const EOS: usize = 257;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mixer_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub cell: u32,
    pub max_seq: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub max_answer_bytes: usize,
    /// Samples held out for validation when training from a data directory.
    pub val_samples: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mixer_layers: 1,
            d_ff: 128,
            vocab_size: 258,
            cell: 16,
            max_seq: 128,
            seed: 0,
            learning_rate: 0.1,
            steps: 2000,
            batch_size: 8,
            eval_every: 50,
            max_grad_norm: 1.0,
            max_answer_bytes: 16,
            val_samples: 48,
        }
    }
}

impl ToyConfig {
    /// Model shape of a loaded parameter file, with default training knobs.
    pub fn for_dims(dims: &ModelDims) -> Self {
        ToyConfig {
            d_model: dims.d_model,
            n_layers: dims.n_layers,
            n_heads: dims.n_heads,
            mixer_layers: dims.mixer_layers,
            d_ff: dims.d_ff,
            vocab_size: dims.vocab_size,
            cell: (dims.patch_dim as f64).sqrt().round() as u32,
            max_seq: dims.max_seq,
            ..ToyConfig::default()
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            mixer_layers: self.mixer_layers,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            patch_dim: (self.cell * self.cell) as usize,
            max_seq: self.max_seq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        let bad = |m: &str| Err(Error::ModelConfig(m.to_string()));
        if self.vocab_size < 258 {
            return bad("vocab_size must be at least 258 (bytes plus BOS/EOS)");
        }
        if self.cell == 0 {
            return bad("cell must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm must be non-negative");
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("steps, batch_size and eval_every must be positive");
        }
        Ok(())
    }
}

/// Contrast map of `image`, one row of cell x cell values in [0, 1] per patch,
/// patches in row-major order.
pub fn patchify(image: &RgbImage, grid: &PatchGrid) -> Result<Array2<f64>> {
    let expected = (grid.width, grid.height);
    if image.dimensions() != expected {
        return Err(Error::ImageDims {
            actual: image.dimensions(),
            expected,
        });
    }
    let mut counts = std::collections::HashMap::<[u8; 3], usize>::new();
    for p in image.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    let bg = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or([0, 0, 0]);
    let contrast = |p: [u8; 3]| {
        (0..3)
            .map(|c| p[c].abs_diff(bg[c]))
            .max()
            .unwrap_or(0)
    };
    let peak = image.pixels().map(|p| contrast(p.0)).max().unwrap_or(0).max(1) as f64;
    let cell = grid.cell as usize;
    let mut out = Array2::<f64>::zeros((grid.token_count(), cell * cell));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (r, c) = (i / grid.cols as usize, i % grid.cols as usize);
        for dy in 0..cell {
            for dx in 0..cell {
                let px = image.get_pixel((c * cell + dx) as u32, (r * cell + dy) as u32);
                row[dy * cell + dx] = contrast(px.0) as f64 / peak;
            }
        }
    }
    Ok(out)
}

/// Visual embedding sequence of `image`, before any mixing.
pub fn embed_image(image: &RgbImage, grid: &PatchGrid, params: &Parameters) -> Result<Array2<f64>> {
    let patches = patchify(image, grid)?;
    nn::embed_visual(
        params,
        &NetInput {
            patches: patches.view(),
            rows: grid.rows as usize,
            cols: grid.cols as usize,
            text: &[],
        },
    )
}

/// A training or evaluation example: patches plus byte-level text.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub patches: Array2<f64>,
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    /// First-token target per visual position.
    pub visual_targets: Vec<Option<usize>>,
    pub label_set: Vec<usize>,
}

impl Example {
    /// Labels must come from a byte-level vocabulary whose ids fit the model.
    pub fn from_sample(sample: &LabeledSample, image: &RgbImage, cfg: &ToyConfig) -> Result<Self> {
        if sample.grid.cell != cfg.cell {
            return Err(Error::ModelConfig(format!(
                "sample {} uses cell {} but the model expects {}",
                sample.sample_id, sample.grid.cell, cfg.cell
            )));
        }
        let patches = patchify(image, &sample.grid)?;
        let m = sample.grid.token_count();
        let mut visual_targets = vec![None; m];
        let mut set = BTreeSet::new();
        for l in &sample.vision_labels {
            let id = l.first_token_id as usize;
            if id >= cfg.vocab_size || l.token_index >= m {
                return Err(Error::ModelConfig(format!(
                    "sample {}: label {:?} does not fit the model",
                    sample.sample_id, l.word
                )));
            }
            visual_targets[l.token_index] = Some(id);
            set.insert(id);
        }
        Ok(Example {
            id: sample.sample_id.clone(),
            rows: sample.grid.rows as usize,
            cols: sample.grid.cols as usize,
            patches,
            prompt: sample.prompt.bytes().map(usize::from).collect(),
            response: sample.response.bytes().map(usize::from).collect(),
            visual_targets,
            label_set: set.into_iter().collect(),
        })
    }

    /// `[BOS] prompt [EOS]`, the prefix the answer is decoded from.
    pub fn prefix(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.prompt.len() + 2);
        t.push(BOS);
        t.extend_from_slice(&self.prompt);
        t.push(EOS);
        t
    }

    /// Teacher-forced text input: the prefix followed by the response.
    pub fn text_input(&self) -> Vec<usize> {
        let mut t = self.prefix();
        t.extend_from_slice(&self.response);
        t
    }

    pub fn net_input<'a>(&'a self, text: &'a [usize]) -> NetInput<'a> {
        NetInput {
            patches: self.patches.view(),
            rows: self.rows,
            cols: self.cols,
            text,
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.visual_targets.iter().flatten().count()
    }
}

/// Kinds and targets for `ex` under teacher forcing. The position holding the
/// prompt-closing EOS predicts the first response byte; the last response
/// position predicts the closing EOS.
pub fn sequence_layout(ex: &Example) -> (Vec<PositionKind>, Vec<Option<usize>>) {
    let text = ex.text_input();
    let answer_start = ex.prompt.len() + 1;
    let mut kinds = vec![PositionKind::Visual; ex.visual_targets.len()];
    let mut targets = ex.visual_targets.clone();
    for j in 0..text.len() {
        if j >= answer_start {
            kinds.push(PositionKind::Response);
            targets.push(Some(text.get(j + 1).copied().unwrap_or(EOS)));
        } else {
            kinds.push(PositionKind::Prompt);
            targets.push(None);
        }
    }
    (kinds, targets)
}

/// Teacher-forced logits for every position, packaged for the loss.
pub fn forward(params: &Parameters, ex: &Example) -> Result<SequenceBatch> {
    let text = ex.text_input();
    let (logits, _) = nn::forward(params, &ex.net_input(&text))?;
    let (kinds, targets) = sequence_layout(ex);
    Ok(SequenceBatch {
        kinds,
        targets,
        logits,
        vision_label_set: ex.label_set.clone(),
    })
}

/// The `k` highest-logit ids at each visual position, best first; ties go to
/// the smaller id.
pub fn probe_visual_logits(params: &Parameters, ex: &Example, k: usize) -> Result<Vec<Vec<usize>>> {
    let batch = forward(params, ex)?;
    let m = ex.visual_targets.len();
    Ok(batch
        .logits
        .rows()
        .into_iter()
        .take(m)
        .map(|row| {
            let mut ids: Vec<usize> = (0..row.len()).collect();
            ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            ids.truncate(k);
            ids
        })
        .collect())
}

/// Text grid of top-1 probe results; each cell shows the byte as a character
/// (`<id>` otherwise), with labeled cells marked `*` when correct and `!`
/// when wrong.
pub fn probe_report(params: &Parameters, ex: &Example, k: usize) -> Result<String> {
    let top = probe_visual_logits(params, ex, k)?;
    let show = |id: usize| match id {
        0x21..=0x7e => (id as u8 as char).to_string(),
        BOS => "<s>".into(),
        EOS => "</s>".into(),
        _ => format!("<{id}>"),
    };
    let mut out = format!(
        "sample {}  grid {}x{}  (patch embedder trained from scratch, no pretrained encoder)\n",
        ex.id, ex.rows, ex.cols
    );
    for r in 0..ex.rows {
        let cells: Vec<String> = (0..ex.cols)
            .map(|c| {
                let i = r * ex.cols + c;
                let head = show(top[i][0]);
                match ex.visual_targets[i] {
                    Some(t) if t == top[i][0] => format!("{head}*"),
                    Some(_) => format!("{head}!"),
                    None => head,
                }
            })
            .collect();
        out.push_str(&cells.iter().map(|c| format!("{c:>6}")).collect::<String>());
        out.push('\n');
    }
    if k > 1 {
        out.push_str("top-k per position:\n");
        for (i, ids) in top.iter().enumerate() {
            let shown: Vec<String> = ids.iter().map(|&id| show(id)).collect();
            out.push_str(&format!("  {i:>4}: {}\n", shown.join(" ")));
        }
    }
    Ok(out)
}

/// Max-norm change of the first visual position's logits when the last patch
/// is perturbed by `delta` in every pixel.
pub fn last_patch_influence(params: &Parameters, ex: &Example, delta: f64) -> Result<f64> {
    let text = ex.text_input();
    let (a, _) = nn::forward(params, &ex.net_input(&text))?;
    let mut moved = ex.clone();
    let last = moved.patches.nrows() - 1;
    moved.patches.row_mut(last).mapv_inplace(|v| v + delta);
    let (b, _) = nn::forward(params, &moved.net_input(&text))?;
    Ok(a.row(0)
        .iter()
        .zip(b.row(0).iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

/// Worst relative error between the analytic parameter gradient of the
/// combined loss and central differences, on a randomly drawn micro model
/// (d_model 8, vocab 16, 11 positions).
pub fn micro_gradient_check(seed: u64, mixer_layers: usize, loss: &LossConfig) -> Result<f64> {
    use crate::dv_loss::selfcheck::{FD_STEP, GRADIENT_FLOOR};
    use crate::dv_loss::{combined_loss, loss_gradient, relative_error};
    use rand::{Rng, SeedableRng};

    let dims = ModelDims {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        mixer_layers,
        d_ff: 12,
        vocab_size: 16,
        patch_dim: 4,
        max_seq: 12,
    };
    let mut params = Parameters::init(dims, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (rows, cols) = (2, 3);
    let patches = Array2::from_shape_fn((rows * cols, 4), |_| rng.gen_range(0.0..1.0));
    let text: Vec<usize> = (0..5).map(|_| rng.gen_range(0..16)).collect();
    let label_set = vec![3usize, 7, 11];
    let mut kinds = vec![PositionKind::Visual; rows * cols];
    let mut targets: Vec<Option<usize>> = (0..rows * cols)
        .map(|i| (i % 2 == 1).then(|| label_set[rng.gen_range(0..3)]))
        .collect();
    for j in 0..text.len() {
        if j < 2 {
            kinds.push(PositionKind::Prompt);
            targets.push(None);
        } else {
            kinds.push(PositionKind::Response);
            targets.push(Some(rng.gen_range(0..16)));
        }
    }
    let eval = |p: &Parameters| -> Result<(SequenceBatch, nn::Cache)> {
        let input = NetInput {
            patches: patches.view(),
            rows,
            cols,
            text: &text,
        };
        let (logits, cache) = nn::forward(p, &input)?;
        let batch = SequenceBatch {
            kinds: kinds.clone(),
            targets: targets.clone(),
            logits,
            vision_label_set: label_set.clone(),
        };
        Ok((batch, cache))
    };
    let (batch, cache) = eval(&params)?;
    let mut analytic = params.zeros_like();
    nn::backward(&params, &cache, &loss_gradient(&batch, loss)?, &mut analytic);
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = params.values[i];
        params.values[i] = orig + FD_STEP;
        let plus = combined_loss(&eval(&params)?.0, loss)?.total;
        params.values[i] = orig - FD_STEP;
        let minus = combined_loss(&eval(&params)?.0, loss)?.total;
        params.values[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(*a, numeric, GRADIENT_FLOOR));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn image(rows: u32, cols: u32, cell: u32) -> RgbImage {
        RgbImage::from_pixel(cols * cell, rows * cell, Rgb([200, 30, 40]))
    }

    #[test]
    fn patchify_order_and_range() {
        let grid = PatchGrid::new(2, 3, 4);
        let mut img = image(2, 3, 4);
        img.put_pixel(9, 5, Rgb([0, 0, 0]));
        let p = patchify(&img, &grid).unwrap();
        assert_eq!(p.dim(), (6, 16));
        let idx = crate::patch_grid::token_index(&grid, 10.0, 6.0).unwrap();
        assert_eq!(idx, 5);
        assert_eq!(p[(5, 1 * 4 + 1)], 1.0);
        assert_eq!(p.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn patchify_ignores_color_choice() {
        let grid = PatchGrid::new(1, 2, 4);
        let mut a = RgbImage::from_pixel(8, 4, Rgb([10, 10, 10]));
        let mut b = RgbImage::from_pixel(8, 4, Rgb([240, 250, 200]));
        a.put_pixel(5, 1, Rgb([220, 220, 220]));
        b.put_pixel(5, 1, Rgb([20, 40, 30]));
        assert_eq!(patchify(&a, &grid).unwrap(), patchify(&b, &grid).unwrap());
    }

    #[test]
    fn patchify_rejects_wrong_dims() {
        let grid = PatchGrid::new(2, 2, 4);
        let img = image(2, 3, 4);
        assert!(matches!(patchify(&img, &grid), Err(Error::ImageDims { .. })));
    }

    #[test]
    fn config_validation() {
        ToyConfig::default().validate().unwrap();
        let mut c = ToyConfig::default();
        c.vocab_size = 200;
        assert!(c.validate().is_err());
        let mut c = ToyConfig::default();
        c.n_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_model_gradient_matches_differences() {
        for (seed, mixer) in [(1, 1), (2, 0), (3, 2)] {
            let heavy = LossConfig {
                lambda: 1.0,
                ..LossConfig::default()
            };
            for loss in [LossConfig::default(), heavy] {
                let worst = micro_gradient_check(seed, mixer, &loss).unwrap();
                assert!(worst < 1e-4, "seed {seed} mixer {mixer}: {worst}");
            }
        }
    }

    fn tiny_example(cfg: &ToyConfig) -> Example {
        let task = task::TaskConfig::default();
        let docs = task::synth_docs(1, 9, &task).unwrap();
        task::build_examples(&docs, &task, 9, cfg, 1).unwrap().remove(0)
    }

    fn small_cfg(mixer_layers: usize) -> ToyConfig {
        ToyConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            mixer_layers,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn mixer_carries_late_patches_forward() {
        let cfg = small_cfg(1);
        let p = Parameters::init(cfg.dims(), 0).unwrap();
        let ex = tiny_example(&cfg);
        assert!(last_patch_influence(&p, &ex, 0.5).unwrap() > 1e-6);

        let cfg = small_cfg(0);
        let p = Parameters::init(cfg.dims(), 0).unwrap();
        assert!(last_patch_influence(&p, &ex, 0.5).unwrap() < 1e-10);
    }

    #[test]
    fn embeddings_differ_only_at_the_changed_patch() {
        let cfg = small_cfg(1);
        let p = Parameters::init(cfg.dims(), 0).unwrap();
        let grid = PatchGrid::new(2, 3, 16);
        let a = image(2, 3, 16);
        let mut b = a.clone();
        b.put_pixel(20, 3, Rgb([0, 0, 0]));
        let ea = embed_image(&a, &grid, &p).unwrap();
        let eb = embed_image(&b, &grid, &p).unwrap();
        assert_eq!(ea.nrows(), 6);
        let changed: Vec<usize> = (0..6).filter(|&i| ea.row(i) != eb.row(i)).collect();
        assert_eq!(changed, vec![1]);
        let one = embed_image(&image(1, 1, 16), &PatchGrid::new(1, 1, 16), &p).unwrap();
        assert_eq!(one.nrows(), 1);
    }

    #[test]
    fn probe_topk_prefix_property() {
        let cfg = small_cfg(1);
        let p = Parameters::init(cfg.dims(), 4).unwrap();
        let ex = tiny_example(&cfg);
        let one = probe_visual_logits(&p, &ex, 1).unwrap();
        let five = probe_visual_logits(&p, &ex, 5).unwrap();
        assert_eq!(one.len(), ex.rows * ex.cols);
        for (a, b) in one.iter().zip(&five) {
            assert_eq!(b.len(), 5);
            assert_eq!(a[0], b[0]);
        }
        assert!(probe_report(&p, &ex, 3).unwrap().contains("grid 4x8"));
    }

    #[test]
    fn sequence_layout_targets() {
        let cfg = small_cfg(1);
        let ex = tiny_example(&cfg);
        let (kinds, targets) = sequence_layout(&ex);
        let m = ex.rows * ex.cols;
        let responses: Vec<usize> = kinds
            .iter()
            .zip(&targets)
            .skip(m)
            .filter(|(k, _)| **k == PositionKind::Response)
            .map(|(_, t)| t.unwrap())
            .collect();
        let mut expect = ex.response.clone();
        expect.push(EOS);
        assert_eq!(responses, expect);
    }
}
