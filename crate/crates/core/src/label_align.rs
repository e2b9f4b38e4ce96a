//! Image-to-label pipeline: filter OCR words, attach each survivor to the
//! visual token under its bottom-right corner, drop tokens claimed by more
//! than one word, and assemble labeled samples.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instructions::InstructionChoice;
use crate::patch_grid::{grid_of, scale_box, smart_resize, token_index, GridConfig, PatchGrid};
use crate::tokenizer::Vocabulary;
use crate::util::derive_seed;

/// One OCR word in original image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordBox {
    pub text: String,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl WordBox {
    pub fn new(text: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        WordBox {
            text: text.to_string(),
            x0,
            y0,
            x1,
            y1,
            confidence: None,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        let finite = [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite());
        finite && !self.text.is_empty() && self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// Supervision for one visual token: the word and its first subword id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, String, u32)", into = "(usize, String, u32)")]
pub struct VisionLabel {
    pub token_index: usize,
    pub word: String,
    pub first_token_id: u32,
}

impl From<(usize, String, u32)> for VisionLabel {
    fn from((token_index, word, first_token_id): (usize, String, u32)) -> Self {
        VisionLabel {
            token_index,
            word,
            first_token_id,
        }
    }
}

impl From<VisionLabel> for (usize, String, u32) {
    fn from(l: VisionLabel) -> Self {
        (l.token_index, l.word, l.first_token_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    ImageToLabel,
    LabelToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: String,
    pub image_ref: String,
    pub grid: PatchGrid,
    pub prompt: String,
    pub response: String,
    /// Response length in tokens under the vocabulary used to build the sample.
    pub response_tokens: usize,
    pub vision_labels: Vec<VisionLabel>,
    pub source: Source,
}

impl LabeledSample {
    /// Distinct first-token ids over the sample's labels, ascending.
    pub fn vision_label_set(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.vision_labels.iter().map(|l| l.first_token_id).collect();
        set.into_iter().collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for l in &self.vision_labels {
            if l.token_index >= self.grid.token_count() {
                return Err(Error::LossInput(format!(
                    "{}: label index {} outside grid of {} tokens",
                    self.sample_id,
                    l.token_index,
                    self.grid.token_count()
                )));
            }
            if !seen.insert(l.token_index) {
                return Err(Error::LossInput(format!(
                    "{}: token {} labeled twice",
                    self.sample_id, l.token_index
                )));
            }
        }
        if self.response.is_empty() {
            return Err(Error::LossInput(format!("{}: empty response", self.sample_id)));
        }
        Ok(())
    }
}

/// Knobs shared by both labeling pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Prepended to each word before tokenizing it for length and first token.
    pub label_prefix: String,
    pub max_label_tokens: usize,
    /// Words taller than this many cells are dropped.
    pub max_height_cells: u32,
    /// QA pairs sampled per image; 0 keeps all of them.
    pub qa_per_image: usize,
    /// "none", "random", or an index into the built-in instruction list.
    pub instruction: String,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            label_prefix: String::new(),
            max_label_tokens: 3,
            max_height_cells: 3,
            qa_per_image: 0,
            instruction: "none".into(),
        }
    }
}

impl LabelConfig {
    pub fn instruction_choice(&self) -> Result<InstructionChoice> {
        self.instruction.parse()
    }

    pub fn label_text(&self, word: &str) -> String {
        format!("{}{}", self.label_prefix, word)
    }

    pub fn first_token(&self, vocab: &Vocabulary, word: &str) -> u32 {
        vocab
            .first_token(&self.label_text(word))
            .expect("label text is never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Kept,
    TooManyTokens,
    TooTall,
    OutOfBounds,
    Malformed,
    Conflict,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Outcome::Kept => "kept",
            Outcome::TooManyTokens => "too_many_tokens",
            Outcome::TooTall => "too_tall",
            Outcome::OutOfBounds => "out_of_bounds",
            Outcome::Malformed => "malformed",
            Outcome::Conflict => "conflict",
        };
        f.write_str(s)
    }
}

/// Token-count and height filters. Returns `Outcome::Kept` or the reason.
pub fn filter_word(b: &WordBox, cell: u32, vocab: &Vocabulary, cfg: &LabelConfig) -> Outcome {
    if vocab.token_len(&cfg.label_text(&b.text)) > cfg.max_label_tokens {
        Outcome::TooManyTokens
    } else if b.height() > f64::from(cfg.max_height_cells * cell) {
        Outcome::TooTall
    } else {
        Outcome::Kept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub word: String,
    pub outcome: Outcome,
    /// Token the word's corner landed on, when it got that far.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_index: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Alignment {
    /// Sorted by token index.
    pub labels: Vec<VisionLabel>,
    /// One entry per input word, in input order.
    pub audit: Vec<AuditEntry>,
}

/// Assign words (original image space, `orig_dims` = (h, w)) to tokens of
/// `grid`. Height filtering happens after scaling to the grid's pixel space,
/// since that is where the cell size is measured.
pub fn align_words(
    words: &[WordBox],
    grid: &PatchGrid,
    orig_dims: (u32, u32),
    vocab: &Vocabulary,
    cfg: &LabelConfig,
) -> Alignment {
    let (oh, ow) = orig_dims;
    let to = (grid.height, grid.width);
    let mut audit = Vec::with_capacity(words.len());
    let mut claims: BTreeMap<usize, Vec<usize>> = BTreeMap::new();

    for (i, w) in words.iter().enumerate() {
        let entry = |outcome| AuditEntry {
            word: w.text.clone(),
            outcome,
            token_index: None,
        };
        if !w.is_well_formed() || oh == 0 || ow == 0 {
            audit.push(entry(Outcome::Malformed));
            continue;
        }
        if w.x0 < 0.0 || w.y0 < 0.0 || w.x1 > f64::from(ow) || w.y1 > f64::from(oh) {
            audit.push(entry(Outcome::OutOfBounds));
            continue;
        }
        let scaled = scale_box(w, orig_dims, to);
        let verdict = filter_word(&scaled, grid.cell, vocab, cfg);
        if verdict != Outcome::Kept {
            audit.push(entry(verdict));
            continue;
        }
        let x = scaled.x1.clamp(0.0, f64::from(grid.width));
        let y = scaled.y1.clamp(0.0, f64::from(grid.height));
        let idx = token_index(grid, x, y).expect("clamped corner lies inside the grid");
        claims.entry(idx).or_default().push(i);
        audit.push(AuditEntry {
            word: w.text.clone(),
            outcome: Outcome::Kept,
            token_index: Some(idx),
        });
    }

    let mut labels = Vec::new();
    for (idx, owners) in claims {
        if let [only] = owners[..] {
            let word = &words[only].text;
            labels.push(VisionLabel {
                token_index: idx,
                word: word.clone(),
                first_token_id: cfg.first_token(vocab, word),
            });
        } else {
            for o in owners {
                audit[o].outcome = Outcome::Conflict;
            }
        }
    }
    Alignment { labels, audit }
}

/// Corpus statistics: label counts and vision-token coverage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub images: usize,
    pub text_labels: usize,
    pub vision_labels: usize,
    pub visual_tokens: usize,
    pub vision_coverage: f64,
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl CorpusStats {
    pub const HEADER: [&'static str; 6] = [
        "Dataset",
        "Samples",
        "Images",
        "Text Labels",
        "Vision Labels",
        "Vision Coverage",
    ];

    pub fn table_cells(&self, dataset: &str) -> [String; 6] {
        [
            dataset.to_string(),
            thousands(self.samples),
            thousands(self.images),
            thousands(self.text_labels),
            thousands(self.vision_labels),
            format!("{:.2}%", self.vision_coverage * 100.0),
        ]
    }

    /// Two-line table: header and one row.
    pub fn table(&self, dataset: &str) -> String {
        let row = self.table_cells(dataset);
        let widths: Vec<usize> = Self::HEADER
            .iter()
            .zip(&row)
            .map(|(h, c)| h.len().max(c.len()))
            .collect();
        let fmt_line = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect::<Vec<_>>()
                .join(" | ")
        };
        format!(
            "{}\n{}\n",
            fmt_line(Self::HEADER.iter().map(|s| s.to_string()).collect()),
            fmt_line(row.to_vec())
        )
    }
}

/// Corpus statistics. Samples sharing an image count that image's tokens
/// once, with its labeled tokens being the union across those samples.
pub fn compute_stats<'a, I>(samples: I) -> CorpusStats
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let mut per_image: BTreeMap<&str, (usize, BTreeSet<usize>)> = BTreeMap::new();
    let mut stats = CorpusStats::default();
    for s in samples {
        stats.samples += 1;
        stats.text_labels += s.response_tokens;
        let entry = per_image
            .entry(s.image_ref.as_str())
            .or_insert_with(|| (s.grid.token_count(), BTreeSet::new()));
        entry.1.extend(s.vision_labels.iter().map(|l| l.token_index));
    }
    stats.images = per_image.len();
    for (tokens, labeled) in per_image.values() {
        stats.visual_tokens += tokens;
        stats.vision_labels += labeled.len();
    }
    if stats.visual_tokens > 0 {
        stats.vision_coverage = stats.vision_labels as f64 / stats.visual_tokens as f64;
    }
    stats
}

/// One line of the OCR input: an image and its recognized words as
/// `[text, x0, y0, x1, y1, confidence]` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcrRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub words: Vec<(String, f64, f64, f64, f64, Option<f64>)>,
}

impl OcrRecord {
    pub fn word_boxes(&self) -> Vec<WordBox> {
        self.words
            .iter()
            .map(|(text, x0, y0, x1, y1, conf)| WordBox {
                text: text.clone(),
                x0: *x0,
                y0: *y0,
                x1: *x1,
                y1: *y1,
                confidence: *conf,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub image_id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub image_id: String,
    #[serde(flatten)]
    pub entry: AuditEntry,
}

#[derive(Debug, Clone, Default)]
pub struct AlignOutput {
    pub samples: Vec<LabeledSample>,
    pub audit: Vec<AuditRow>,
    pub stats: CorpusStats,
}

/// Join OCR records with QA pairs and label every sample.
///
/// Images are processed in image-id order; `accept` is a pluggable QA
/// predicate (for example a perplexity filter) applied before sampling.
pub fn build_samples(
    ocr: &[OcrRecord],
    qa: &[QaRecord],
    grid_cfg: &GridConfig,
    label_cfg: &LabelConfig,
    vocab: &Vocabulary,
    seed: u64,
    workers: usize,
    accept: &(dyn Fn(&QaRecord) -> bool + Sync),
) -> Result<AlignOutput> {
    let instruction = label_cfg.instruction_choice()?;
    let mut by_image: HashMap<&str, Vec<&QaRecord>> = HashMap::new();
    for q in qa.iter().filter(|q| accept(q)) {
        by_image.entry(q.image_id.as_str()).or_default().push(q);
    }
    let mut images: Vec<&OcrRecord> = ocr.iter().collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(w) = images.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        return Err(Error::Config(format!("duplicate OCR image id {:?}", w[0].image_id)));
    }

    let per_image = crate::util::parallel_map(&images, workers, |rec| {
        let (h, w) = smart_resize(rec.height, rec.width, grid_cfg)?;
        let grid = grid_of(h, w, grid_cfg.cell)?;
        let words = rec.word_boxes();
        let alignment = align_words(&words, &grid, (rec.height, rec.width), vocab, label_cfg);

        let mut pairs: Vec<(usize, &QaRecord)> = by_image
            .get(rec.image_id.as_str())
            .map(|v| v.iter().copied().enumerate().collect())
            .unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "qa", &rec.image_id));
        if label_cfg.qa_per_image > 0 && pairs.len() > label_cfg.qa_per_image {
            pairs.shuffle(&mut rng);
            pairs.truncate(label_cfg.qa_per_image);
            pairs.sort_by_key(|p| p.0);
        }
        let samples: Vec<LabeledSample> = pairs
            .into_iter()
            .map(|(qi, q)| LabeledSample {
                sample_id: format!("{}#{qi}", rec.image_id),
                image_ref: rec.image_id.clone(),
                grid,
                prompt: instruction.apply(&q.question, &mut rng),
                response: q.answer.clone(),
                response_tokens: vocab.token_len(&q.answer),
                vision_labels: alignment.labels.clone(),
                source: Source::ImageToLabel,
            })
            .filter(|s| !s.response.is_empty())
            .collect();
        let audit: Vec<AuditRow> = alignment
            .audit
            .into_iter()
            .map(|entry| AuditRow {
                image_id: rec.image_id.clone(),
                entry,
            })
            .collect();
        Ok::<_, Error>((samples, audit))
    });

    let mut out = AlignOutput::default();
    for item in per_image {
        let (samples, audit) = item?;
        out.samples.extend(samples);
        out.audit.extend(audit);
    }
    for s in &out.samples {
        s.check_invariants()?;
    }
    out.stats = compute_stats(&out.samples);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let entries = vec![("the".to_string(), 1), ("mod".to_string(), 2), ("el".to_string(), 3)];
        Vocabulary::from_entries(entries, Some(100)).unwrap()
    }

    fn cfg() -> LabelConfig {
        LabelConfig::default()
    }

    #[test]
    fn filter_examples() {
        let v = vocab();
        let the = WordBox::new("the", 0.0, 0.0, 30.0, 20.0);
        assert_eq!(filter_word(&the, 32, &v, &cfg()), Outcome::Kept);
        let long = WordBox::new("abcd", 0.0, 0.0, 30.0, 20.0);
        assert_eq!(v.token_len("abcd"), 4);
        assert_eq!(filter_word(&long, 32, &v, &cfg()), Outcome::TooManyTokens);
        let tall = WordBox::new("the", 0.0, 0.0, 30.0, 97.0);
        assert_eq!(filter_word(&tall, 32, &v, &cfg()), Outcome::TooTall);
        let edge = WordBox::new("the", 0.0, 0.0, 30.0, 96.0);
        assert_eq!(filter_word(&edge, 32, &v, &cfg()), Outcome::Kept);
    }

    #[test]
    fn label_prefix_changes_tokenization() {
        let v = Vocabulary::from_entries(vec![(" the".into(), 7)], Some(100)).unwrap();
        let mut c = cfg();
        assert_eq!(c.first_token(&v, "the"), 100 + u32::from(b't'));
        c.label_prefix = " ".into();
        assert_eq!(c.first_token(&v, "the"), 7);
    }

    #[test]
    fn two_words_two_tokens() {
        let g = PatchGrid::new(8, 8, 32);
        let words = vec![
            WordBox::new("the", 40.0, 20.0, 70.0, 40.0),
            WordBox::new("model", 100.0, 80.0, 96.0 + 32.0 * 3.0, 96.0),
        ];
        let a = align_words(&words, &g, (256, 256), &vocab(), &cfg());
        let idx: Vec<usize> = a.labels.iter().map(|l| l.token_index).collect();
        assert_eq!(idx, vec![10, 2 * 8 + 5]);
        assert_eq!(a.labels[1].first_token_id, 2);
        assert!(a.audit.iter().all(|e| e.outcome == Outcome::Kept));
    }

    #[test]
    fn conflicting_words_are_all_dropped() {
        let g = PatchGrid::new(8, 8, 32);
        let words = vec![
            WordBox::new("the", 40.0, 20.0, 70.0, 40.0),
            WordBox::new("el", 66.0, 35.0, 96.0, 64.0),
            WordBox::new("mod", 0.0, 0.0, 20.0, 20.0),
        ];
        let a = align_words(&words, &g, (256, 256), &vocab(), &cfg());
        assert_eq!(a.labels.len(), 1);
        assert_eq!(a.labels[0].token_index, 0);
        assert_eq!(a.audit[0].outcome, Outcome::Conflict);
        assert_eq!(a.audit[1].outcome, Outcome::Conflict);
        assert_eq!(a.audit[2].outcome, Outcome::Kept);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let g = PatchGrid::new(8, 8, 32);
        let a = align_words(&[], &g, (256, 256), &vocab(), &cfg());
        assert!(a.labels.is_empty() && a.audit.is_empty());

        let words = vec![
            WordBox::new("the", 200.0, 0.0, 300.0, 20.0),
            WordBox::new("", 0.0, 0.0, 10.0, 10.0),
            WordBox::new("the", 10.0, 10.0, 5.0, 20.0),
        ];
        let a = align_words(&words, &g, (256, 256), &vocab(), &cfg());
        assert!(a.labels.is_empty());
        let outcomes: Vec<Outcome> = a.audit.iter().map(|e| e.outcome).collect();
        assert_eq!(outcomes, vec![Outcome::OutOfBounds, Outcome::Malformed, Outcome::Malformed]);
    }

    #[test]
    fn corner_on_image_edge_is_clamped() {
        // 100 -> 256 scaling of 100.0 is exactly 256; 99.99 -> 255.97
        let g = PatchGrid::new(8, 8, 32);
        let words = vec![WordBox::new("the", 90.0, 90.0, 100.0, 100.0)];
        let a = align_words(&words, &g, (100, 100), &vocab(), &cfg());
        assert_eq!(a.labels[0].token_index, 63);
    }

    #[test]
    fn height_filter_uses_resized_space() {
        // 40px tall at 100px becomes 102.4px at 256px: taller than 3 cells
        let g = PatchGrid::new(8, 8, 32);
        let words = vec![WordBox::new("the", 0.0, 0.0, 10.0, 40.0)];
        let a = align_words(&words, &g, (100, 100), &vocab(), &cfg());
        assert_eq!(a.audit[0].outcome, Outcome::TooTall);
    }

    fn sample(image: &str, tokens: u32, labels: &[usize]) -> LabeledSample {
        LabeledSample {
            sample_id: format!("{image}#0"),
            image_ref: image.into(),
            grid: PatchGrid::new(1, tokens, 32),
            prompt: "q".into(),
            response: "a".into(),
            response_tokens: 2,
            vision_labels: labels
                .iter()
                .map(|&i| VisionLabel {
                    token_index: i,
                    word: "w".into(),
                    first_token_id: 1,
                })
                .collect(),
            source: Source::ImageToLabel,
        }
    }

    #[test]
    fn stats_single_sample() {
        let labels: Vec<usize> = (0..16).collect();
        let s = compute_stats([&sample("a", 64, &labels)]);
        assert_eq!((s.samples, s.images, s.vision_labels), (1, 1, 16));
        assert_eq!(s.vision_coverage, 0.25);
        assert_eq!(s.text_labels, 2);
    }

    #[test]
    fn stats_union_per_image() {
        let first: Vec<usize> = (0..10).collect();
        let second: Vec<usize> = (10..30).collect();
        let s = compute_stats([&sample("a", 100, &first), &sample("a", 100, &second)]);
        assert_eq!((s.samples, s.images, s.visual_tokens), (2, 1, 100));
        assert_eq!(s.vision_labels, 30);
        assert!((s.vision_coverage - 0.3).abs() < 1e-15);

        let overlap: Vec<usize> = (5..25).collect();
        let s = compute_stats([&sample("a", 100, &first), &sample("a", 100, &overlap)]);
        assert_eq!(s.vision_labels, 25);
    }

    #[test]
    fn stats_table_layout() {
        let s = CorpusStats {
            samples: 39_463,
            images: 10_194,
            text_labels: 190_895,
            vision_labels: 5_402_739,
            visual_tokens: 77_514_189,
            vision_coverage: 0.0697,
        };
        let cells = s.table_cells("DocVQA");
        assert_eq!(cells[1], "39,463");
        assert_eq!(cells[2], "10,194");
        assert_eq!(cells[4], "5,402,739");
        assert_eq!(cells[5], "6.97%");
        assert!(s.table("DocVQA").starts_with("Dataset"));
    }

    #[test]
    fn vision_label_serializes_as_triple() {
        let l = VisionLabel {
            token_index: 4,
            word: "the".into(),
            first_token_id: 9,
        };
        assert_eq!(serde_json::to_string(&l).unwrap(), "[4,\"the\",9]");
    }

    #[test]
    fn build_samples_joins_and_samples_qa() {
        let ocr = vec![
            OcrRecord {
                image_id: "b".into(),
                width: 256,
                height: 256,
                words: vec![("the".into(), 0.0, 0.0, 30.0, 20.0, Some(0.9))],
            },
            OcrRecord {
                image_id: "a".into(),
                width: 100,
                height: 100,
                words: vec![],
            },
        ];
        let qa: Vec<QaRecord> = (0..5)
            .map(|i| QaRecord {
                image_id: "b".into(),
                question: format!("q{i}"),
                answer: format!("a{i}"),
            })
            .collect();
        let mut lc = cfg();
        lc.qa_per_image = 2;
        let out = build_samples(&ocr, &qa, &GridConfig::default(), &lc, &vocab(), 3, 1, &|_| true)
            .unwrap();
        assert_eq!(out.samples.len(), 2);
        assert!(out.samples.iter().all(|s| s.image_ref == "b"));
        assert_eq!(out.samples[0].vision_labels.len(), 1);
        assert_eq!(out.audit.len(), 1);
        let again = build_samples(&ocr, &qa, &GridConfig::default(), &lc, &vocab(), 3, 4, &|_| true)
            .unwrap();
        assert_eq!(out.samples, again.samples);

        let rejected =
            build_samples(&ocr, &qa, &GridConfig::default(), &lc, &vocab(), 3, 1, &|q| {
                q.question != "q0" && q.question != "q1" && q.question != "q2"
            })
            .unwrap();
        let ids: Vec<&str> = rejected.samples.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids, vec!["b#0", "b#1"]);
    }
}
