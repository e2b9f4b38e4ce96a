//! Synthetic extractive QA over rendered word grids: "line k" is answered by
//! the first word on line k.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, ToyConfig};
use crate::doc_render::{layout, pick_colors, render_document, DocRecord, Placement, RenderSpec};
use crate::error::{Error, Result};
use crate::instructions::InstructionChoice;
use crate::label_align::LabelConfig;
use crate::tokenizer::Vocabulary;
use crate::util::{derive_seed, parallel_map};

/// Closed word list; every word starts with a different letter.
pub const WORDS: &[&str] = &[
    "ant", "box", "cat", "dog", "egg", "fish", "gold", "hat", "ink", "jam", "kite", "lamp", "map",
    "nut", "owl", "pen", "quiz", "red", "sun", "tree", "vase", "wolf", "yak", "zoo",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub rows: u32,
    pub cols: u32,
    pub cell: u32,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            rows: 4,
            cols: 8,
            cell: 16,
            min_words: 6,
            max_words: 12,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::ModelConfig("need 0 < min_words <= max_words".into()));
        }
        self.spec(0).validate()
    }

    /// Render spec of the document with render seed `seed`.
    pub fn spec(&self, seed: u64) -> RenderSpec {
        let (bg, fg) = pick_colors(seed);
        RenderSpec {
            cell: self.cell,
            rows: self.rows,
            cols: self.cols,
            glyph_scale: 1,
            fg,
            bg,
            margin_cells: 0,
            seed,
        }
    }
}

/// Render seed for one document.
pub fn render_seed(seed: u64, doc_id: &str) -> u64 {
    derive_seed(seed, "render", doc_id)
}

/// `n` documents; words that would overflow the grid are dropped from the end.
pub fn synth_docs(n: usize, seed: u64, task: &TaskConfig) -> Result<Vec<DocRecord>> {
    task.validate()?;
    let spec = task.spec(0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth", "docs"));
    let mut docs = Vec::with_capacity(n);
    for i in 0..n {
        let count = rng.gen_range(task.min_words..=task.max_words);
        let mut words: Vec<String> = (0..count)
            .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
            .collect();
        let placements = loop {
            match layout(&words, &spec) {
                Ok(p) => break p,
                Err(Error::LayoutOverflow { .. }) if words.len() > 1 => {
                    words.pop();
                }
                Err(e) => return Err(e),
            }
        };
        let lines = placements.last().map_or(1, |p| p.start_cell.0 + 1);
        let k = rng.gen_range(0..lines);
        let answer = placements
            .iter()
            .find(|p| p.start_cell.0 == k)
            .map(|p| p.word.clone())
            .expect("every line has a word");
        docs.push(DocRecord {
            doc_id: format!("doc{i:05}"),
            text: words.join(" "),
            question: format!("line {}", k + 1),
            answer,
        });
    }
    Ok(docs)
}

/// Answer to a "line k" question under `placements`; `None` for any other
/// question or a line that does not exist.
pub fn line_answer(question: &str, placements: &[Placement]) -> Option<String> {
    let k: u32 = question.strip_prefix("line ")?.trim().parse().ok()?;
    let first_row = placements.first()?.start_cell.0;
    placements
        .iter()
        .find(|p| p.start_cell.0 + 1 == first_row + k)
        .map(|p| p.word.clone())
}

/// Render documents in memory and convert them to model examples.
pub fn build_examples(
    docs: &[DocRecord],
    task: &TaskConfig,
    seed: u64,
    cfg: &ToyConfig,
    workers: usize,
) -> Result<Vec<Example>> {
    let vocab = Vocabulary::bytes_only(0);
    let label_cfg = LabelConfig::default();
    parallel_map(docs, workers, |doc| {
        let spec = task.spec(render_seed(seed, &doc.doc_id));
        let r = render_document(doc, &spec, &vocab, &label_cfg, InstructionChoice::None, "")?;
        Example::from_sample(&r.sample, &r.image, cfg)
    })
    .into_iter()
    .collect()
}
