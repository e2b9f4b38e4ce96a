//! OCR-style evaluation: edit distance, NED, test-set generators, resolution
//! sweeps and answer scoring.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::doc_render::{auto_grid, DocRecord, RenderSpec};
use crate::error::{Error, Result};
use crate::patch_grid::GridConfig;
use crate::util::pairwise_sum;

/// Levenshtein distance over Unicode scalar values, unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Answer normalization applied before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Policy {
    pub strip: bool,
    pub lowercase: bool,
    /// Exact match also accepts a prediction that contains the truth.
    pub contains: bool,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            strip: true,
            lowercase: false,
            contains: false,
        }
    }
}

impl Policy {
    pub fn normalize(&self, s: &str) -> String {
        let s = if self.strip { s.trim() } else { s };
        if self.lowercase {
            s.to_lowercase()
        } else {
            s.to_string()
        }
    }
}

/// Edit distance over the longer length, on trimmed strings; 0 when both are
/// empty.
pub fn ned(pred: &str, truth: &str) -> f64 {
    ned_with(pred, truth, &Policy::default())
}

pub fn ned_with(pred: &str, truth: &str, policy: &Policy) -> f64 {
    let (p, t) = (policy.normalize(pred), policy.normalize(truth));
    let longest = p.chars().count().max(t.chars().count());
    if longest == 0 {
        return 0.0;
    }
    edit_distance(&p, &t) as f64 / longest as f64
}

pub fn exact_match(pred: &str, truth: &str, policy: &Policy) -> bool {
    let (p, t) = (policy.normalize(pred), policy.normalize(truth));
    p == t || (policy.contains && !t.is_empty() && p.contains(&t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Contextual,
    Noncontextual,
    Extraction,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contextual" => Ok(Task::Contextual),
            "noncontextual" => Ok(Task::Noncontextual),
            "extraction" => Ok(Task::Extraction),
            other => Err(Error::Config(format!("unknown eval task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub task: Task,
    pub prediction: String,
    pub truth: String,
    pub ned: f64,
    pub exact: bool,
    /// Visual token count of the input grid.
    pub resolution: usize,
}

impl EvalRecord {
    pub fn score(
        id: &str,
        task: Task,
        prediction: &str,
        truth: &str,
        resolution: usize,
        policy: &Policy,
    ) -> Self {
        EvalRecord {
            id: id.to_string(),
            task,
            prediction: prediction.to_string(),
            truth: truth.to_string(),
            ned: ned_with(prediction, truth, policy),
            exact: exact_match(prediction, truth, policy),
            resolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean_ned: f64,
    pub exact_rate: f64,
}

/// Rescore `records` under `policy` and summarize them in order.
pub fn score_answers(records: &[EvalRecord], policy: &Policy) -> (Vec<EvalRecord>, Summary) {
    let rescored: Vec<EvalRecord> = records
        .iter()
        .map(|r| EvalRecord::score(&r.id, r.task, &r.prediction, &r.truth, r.resolution, policy))
        .collect();
    let n = rescored.len();
    let neds: Vec<f64> = rescored.iter().map(|r| r.ned).collect();
    let hits = rescored.iter().filter(|r| r.exact).count();
    let summary = Summary {
        count: n,
        mean_ned: if n == 0 { 0.0 } else { pairwise_sum(&neds) / n as f64 },
        exact_rate: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
    };
    (rescored, summary)
}

/// Word frequencies, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub entries: Vec<(String, f64)>,
}

impl FrequencyTable {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.is_empty() || entries.iter().all(|(_, f)| *f == 0.0) {
            return Err(Error::EmptyFrequencyTable);
        }
        if let Some((w, f)) = entries
            .iter()
            .find(|(w, f)| !(f.is_finite() && *f >= 0.0) || w.is_empty() || w.contains(char::is_whitespace))
        {
            return Err(Error::Config(format!("bad frequency entry {w:?} {f}")));
        }
        Ok(FrequencyTable { entries })
    }

    /// Lines of `word<TAB>count`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| Error::Record {
                path: origin.to_string(),
                line: n + 1,
                message: m.to_string(),
            };
            let (word, count) = line.split_once('\t').ok_or_else(|| err("expected word<TAB>count"))?;
            let count: f64 = count.trim().parse().map_err(|_| err("count is not a number"))?;
            entries.push((word.to_string(), count));
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// `n` i.i.d. draws proportional to frequency.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<&str> {
        let dist = WeightedIndex::new(self.entries.iter().map(|(_, f)| *f)).expect("validated weights");
        (0..n).map(|_| self.entries[dist.sample(rng)].0.as_str()).collect()
    }
}

/// Length rule for generated sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthRule {
    pub min_chars: usize,
    pub max_chars: usize,
    /// Count the single space between words toward the length.
    pub count_spaces: bool,
}

impl Default for LengthRule {
    fn default() -> Self {
        LengthRule {
            min_chars: 200,
            max_chars: 500,
            count_spaces: true,
        }
    }
}

impl LengthRule {
    pub fn validate(&self) -> Result<()> {
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return Err(Error::Config(format!(
                "need 0 < min_chars <= max_chars, got {}..{}",
                self.min_chars, self.max_chars
            )));
        }
        Ok(())
    }

    fn length(&self, words: &[&str]) -> usize {
        let chars: usize = words.iter().map(|w| w.chars().count()).sum();
        chars + if self.count_spaces { words.len().saturating_sub(1) } else { 0 }
    }
}

/// Frequency-sampled words, appended until the length first reaches
/// `min_chars`, then whole words dropped from the end while over `max_chars`.
pub fn gen_noncontextual(table: &FrequencyTable, seed: u64, rule: &LengthRule) -> Result<Vec<String>> {
    rule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(table.entries.iter().map(|(_, f)| *f))
        .map_err(|_| Error::EmptyFrequencyTable)?;
    let mut words: Vec<&str> = Vec::new();
    while rule.length(&words) < rule.min_chars {
        words.push(&table.entries[dist.sample(&mut rng)].0);
    }
    while words.len() > 1 && rule.length(&words) > rule.max_chars {
        words.pop();
    }
    Ok(words.into_iter().map(str::to_string).collect())
}

/// Blank-line separated passages of a corpus, whitespace collapsed.
pub fn passages(corpus: &str) -> Vec<String> {
    corpus
        .split("\n\n")
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect()
}

/// `n` distinct passages (all of them when the corpus is smaller), cut at a
/// word boundary so they fit `rule.max_chars`. Passages shorter than
/// `rule.min_chars` are skipped.
pub fn gen_contextual(corpus: &str, seed: u64, n: usize, rule: &LengthRule) -> Result<Vec<String>> {
    rule.validate()?;
    let pool: Vec<String> = passages(corpus)
        .into_iter()
        .filter_map(|p| {
            let mut words: Vec<&str> = p.split(' ').collect();
            while words.len() > 1 && rule.length(&words) > rule.max_chars {
                words.pop();
            }
            (rule.length(&words) >= rule.min_chars && rule.length(&words) <= rule.max_chars)
                .then(|| words.join(" "))
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "corpus has no passage of {}..={} characters",
            rule.min_chars, rule.max_chars
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, pool.len(), n.min(pool.len())).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| pool[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SweepEntry {
    Evaluated(EvalRecord),
    Skipped { token_count: usize, reason: String },
}

/// Grid shape holding `words` with exactly `tokens` cells. With `cols` fixed
/// the rows follow from the count; otherwise the renderer's grid search runs
/// on an exact budget.
pub fn realize_grid(
    words: &[String],
    tokens: usize,
    cell: u32,
    cols: u32,
    glyph_scale: u32,
    margin: u32,
) -> Result<(u32, u32)> {
    if tokens == 0 {
        return Err(Error::RenderSpec("token count must be positive".into()));
    }
    if cols > 0 {
        if tokens % cols as usize != 0 {
            return Err(Error::RenderSpec(format!("{tokens} tokens is not a multiple of {cols} columns")));
        }
        return Ok(((tokens / cols as usize) as u32, cols));
    }
    let budget = GridConfig::exact_tokens(cell, tokens as u64);
    auto_grid(words, &budget, glyph_scale, margin)
}

/// Re-render `doc` at each token count and evaluate it. `base` supplies
/// everything but the grid shape; `eval_fn` returns (prediction, truth) for
/// the rendered spec. Counts that cannot hold the document are skipped.
pub fn resolution_sweep<F>(
    doc: &DocRecord,
    task: Task,
    base: &RenderSpec,
    fixed_cols: u32,
    token_counts: &[usize],
    policy: &Policy,
    eval_fn: F,
) -> Result<Vec<SweepEntry>>
where
    F: Fn(&RenderSpec) -> Result<(String, String)>,
{
    let words = doc.words();
    let mut out = Vec::with_capacity(token_counts.len());
    for &n in token_counts {
        let attempt = realize_grid(&words, n, base.cell, fixed_cols, base.glyph_scale, base.margin_cells)
            .and_then(|(rows, cols)| {
                let spec = RenderSpec { rows, cols, ..base.clone() };
                crate::doc_render::layout(&words, &spec).map(|_| spec)
            });
        match attempt {
            Ok(spec) => {
                let (prediction, truth) = eval_fn(&spec)?;
                out.push(SweepEntry::Evaluated(EvalRecord::score(
                    &doc.doc_id,
                    task,
                    &prediction,
                    &truth,
                    n,
                    policy,
                )));
            }
            Err(e) => out.push(SweepEntry::Skipped {
                token_count: n,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> RenderSpec {
        RenderSpec {
            cell: 16,
            rows: 4,
            cols: 8,
            glyph_scale: 1,
            fg: [0, 0, 0],
            bg: [255, 255, 255],
            margin_cells: 0,
            seed: 0,
        }
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("same", "same"), 0);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("héllo", "hello"), 1);
    }

    #[test]
    fn ned_examples() {
        assert!((ned("kitten", "sitting") - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(ned("abc", "abc"), 0.0);
        assert_eq!(ned("abc", "xyz"), 1.0);
        assert_eq!(ned("", ""), 0.0);
        assert_eq!(ned("  abc\n", "abc"), 0.0);
    }

    #[test]
    fn policy_variants() {
        let p = Policy {
            lowercase: true,
            contains: true,
            ..Policy::default()
        };
        assert!(exact_match(" The Cat ", "cat", &p));
        assert!(!exact_match("The Cat", "cat", &Policy::default()));
        assert_eq!(ned_with("ABC", "abc", &p), 0.0);
    }

    #[test]
    fn summary_counts() {
        let recs = vec![
            EvalRecord::score("a", Task::Extraction, "cat", "cat", 32, &Policy::default()),
            EvalRecord::score("b", Task::Extraction, "cot", "cat", 32, &Policy::default()),
        ];
        let (_, s) = score_answers(&recs, &Policy::default());
        assert_eq!(s.count, 2);
        assert_eq!(s.exact_rate, 0.5);
        assert!((s.mean_ned - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn noncontextual_degenerate_table() {
        let t = FrequencyTable::new(vec![("a".into(), 1.0)]).unwrap();
        let rule = LengthRule::default();
        let w = gen_noncontextual(&t, 1, &rule).unwrap();
        let len = w.len() * 2 - 1;
        assert!((200..=500).contains(&len));
        assert!(w.iter().all(|x| x == "a"));
        assert_eq!(w, gen_noncontextual(&t, 1, &rule).unwrap());
    }

    #[test]
    fn noncontextual_respects_bounds() {
        let t = FrequencyTable::new(vec![
            ("alpha".into(), 3.0),
            ("be".into(), 1.0),
            ("gammadeltaepsilon".into(), 0.5),
        ])
        .unwrap();
        for seed in 0..200 {
            let rule = LengthRule::default();
            let w = gen_noncontextual(&t, seed, &rule).unwrap();
            let refs: Vec<&str> = w.iter().map(String::as_str).collect();
            assert!((200..=500).contains(&rule.length(&refs)));
        }
    }

    #[test]
    fn frequency_table_parsing() {
        let t = FrequencyTable::parse("# header\nthe\t10\n\nof\t4.5\n", "f").unwrap();
        assert_eq!(t.entries, vec![("the".into(), 10.0), ("of".into(), 4.5)]);
        assert!(matches!(FrequencyTable::parse("", "f"), Err(Error::EmptyFrequencyTable)));
        assert!(matches!(
            FrequencyTable::parse("x 1\n", "f"),
            Err(Error::Record { line: 1, .. })
        ));
    }

    #[test]
    fn contextual_passages() {
        let corpus = "one two three\nfour\n\n\nshort\n\nfive six seven eight";
        let rule = LengthRule {
            min_chars: 8,
            max_chars: 14,
            count_spaces: true,
        };
        let docs = gen_contextual(corpus, 0, 5, &rule).unwrap();
        assert_eq!(docs, vec!["one two three".to_string(), "five six seven".to_string()]);
        assert_eq!(docs, gen_contextual(corpus, 0, 5, &rule).unwrap());
    }

    #[test]
    fn sweep_skips_unrealizable_counts() {
        let doc = DocRecord {
            doc_id: "d".into(),
            text: "cat dog sun map red box".into(),
            question: "line 1".into(),
            answer: "cat".into(),
        };
        let entries = resolution_sweep(
            &doc,
            Task::Extraction,
            &spec(),
            8,
            &[8, 12, 16, 32],
            &Policy::default(),
            |s| Ok((format!("{}", s.rows), "2".to_string())),
        )
        .unwrap();
        assert!(matches!(entries[0], SweepEntry::Skipped { token_count: 8, .. }));
        assert!(matches!(entries[1], SweepEntry::Skipped { token_count: 12, .. }));
        match &entries[2] {
            SweepEntry::Evaluated(r) => {
                assert_eq!(r.resolution, 16);
                assert!(r.exact);
            }
            other => panic!("{other:?}"),
        }
        match &entries[3] {
            SweepEntry::Evaluated(r) => assert_eq!(r.prediction, "4"),
            other => panic!("{other:?}"),
        }
    }
}
