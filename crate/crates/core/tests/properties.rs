use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dv_forge_core::dv_loss::selfcheck::random_batch;
use dv_forge_core::dv_loss::{combined_loss, vision_loss, LossConfig};
use dv_forge_core::eval_harness::{edit_distance, ned, FrequencyTable};
use dv_forge_core::label_align::{align_words, LabelConfig, WordBox};
use dv_forge_core::patch_grid::PatchGrid;
use dv_forge_core::tokenizer::Vocabulary;

fn table_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..=a.len() {
        for j in 0..=b.len() {
            d[i][j] = if i == 0 {
                j
            } else if j == 0 {
                i
            } else {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1)
            };
        }
    }
    d[a.len()][b.len()]
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in "[abé ]{0,10}", b in "[abé ]{0,10}", c in "[abé ]{0,10}") {
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(ab, table_distance(&a, &b));
        prop_assert_eq!(ab, edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        prop_assert_eq!(ab == 0, a == b);
        let n = ned(&a, &b);
        prop_assert!((0.0..=1.0).contains(&n));
    }

    #[test]
    fn combined_loss_grows_with_lambda(seed in 0u64..500, lo in 0.0f64..2.0, extra in 0.0f64..2.0) {
        let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 12, 10);
        let at = |lambda| combined_loss(&b, &LossConfig { lambda, ..LossConfig::default() }).unwrap().total;
        prop_assert!(at(lo + extra) >= at(lo));
    }

    #[test]
    fn raising_the_label_logit_lowers_unsmoothed_vision_loss(seed in 0u64..500, bump in 0.01f64..3.0) {
        let mut b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 12, 10);
        let cfg = LossConfig { beta: 0.0, ..LossConfig::default() };
        let before = vision_loss(&b, &cfg).unwrap();
        let (i, t) = b.labeled_visual().next().unwrap();
        b.logits[[i, t]] += bump;
        prop_assert!(vision_loss(&b, &cfg).unwrap() < before);
    }

    #[test]
    fn alignment_labels_are_unique_and_sorted(
        boxes in prop::collection::vec((0.0f64..300.0, 0.0f64..200.0, 1.0f64..80.0, 1.0f64..40.0), 0..30)
    ) {
        let grid = PatchGrid::new(6, 9, 32);
        let words: Vec<WordBox> = boxes
            .iter()
            .map(|&(x, y, w, h)| WordBox::new("ab", x, y, x + w, y + h))
            .collect();
        let a = align_words(&words, &grid, (200, 300), &Vocabulary::bytes_only(0), &LabelConfig::default());
        prop_assert_eq!(a.audit.len(), words.len());
        prop_assert!(a.labels.windows(2).all(|w| w[0].token_index < w[1].token_index));
        prop_assert!(a.labels.iter().all(|l| l.token_index < grid.token_count()));
    }
}

#[test]
fn frequency_sampling_matches_weights() {
    let table = FrequencyTable::new(
        [("a", 1.0), ("b", 2.0), ("c", 3.0), ("d", 4.0), ("e", 10.0)]
            .iter()
            .map(|(w, f)| (w.to_string(), *f))
            .collect(),
    )
    .unwrap();
    let n = 100_000;
    let draws = table.sample(&mut ChaCha8Rng::seed_from_u64(11), n);
    let total: f64 = table.entries.iter().map(|e| e.1).sum();
    let chi2: f64 = table
        .entries
        .iter()
        .map(|(w, f)| {
            let observed = draws.iter().filter(|d| *d == w).count() as f64;
            let expected = n as f64 * f / total;
            (observed - expected).powi(2) / expected
        })
        .sum();
    // df = 4, p = 0.01
    assert!(chi2 < 13.277, "chi-square {chi2}");
}
