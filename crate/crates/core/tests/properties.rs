use std::sync::OnceLock;

use proptest::prelude::*;

use deltalogit::corpus::{gen_synthetic_corpus, CorpusKind, CorpusSpec};
use deltalogit::tokenizer::Tokenizer;
use deltalogit::train::cosine_warmup_lr;
use deltalogit::vocab_map::{dtw_align, edit_distance, overlap_ratio, Sparsify, VocabMap};
use deltalogit::Tensor;

fn texts() -> &'static Vec<String> {
    static T: OnceLock<Vec<String>> = OnceLock::new();
    T.get_or_init(|| {
        gen_synthetic_corpus(&CorpusSpec {
            kind: CorpusKind::Demonstrations,
            grammar: "mixed".into(),
            size: 300,
            seed: 8,
        })
        .unwrap()
        .texts()
    })
}

fn toks() -> &'static (Tokenizer, Tokenizer) {
    static T: OnceLock<(Tokenizer, Tokenizer)> = OnceLock::new();
    T.get_or_init(|| {
        let t = texts();
        (
            Tokenizer::train_bpe(t, 70, 0).unwrap(),
            Tokenizer::train_bpe(&t[150..], 55, 0).unwrap(),
        )
    })
}

fn cross_map() -> &'static VocabMap {
    static M: OnceLock<VocabMap> = OnceLock::new();
    M.get_or_init(|| {
        let (a, b) = toks();
        VocabMap::build(b, a, texts(), Sparsify::default()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn corpus_texts_round_trip(i in 0usize..300) {
        let (a, b) = toks();
        let t = &texts()[i];
        prop_assert_eq!(&a.decode(&a.encode(t)).unwrap(), t);
        prop_assert_eq!(&b.decode(&b.encode(t)).unwrap(), t);
    }

    #[test]
    fn known_character_text_round_trips(words in prop::collection::vec("[a-z0-9:]{1,6}", 1..6)) {
        let (a, _) = toks();
        let text = words.join(" ");
        let enc = a.encode_with_stats(&text);
        if enc.unknown == 0 {
            prop_assert_eq!(a.decode(&enc.ids).unwrap(), text);
        }
    }

    #[test]
    fn dtw_paths_are_valid_and_costs_consistent(
        lb in 1usize..8, lv in 1usize..8, seed in any::<u64>()
    ) {
        let cost = |i: usize, j: usize| ((seed ^ (i as u64 * 31 + j as u64 * 17)) % 5) as f64;
        let p = dtw_align(lb, lv, cost).unwrap();
        prop_assert!(p.is_valid(lb, lv));
        let total: f64 = p.pairs.iter().map(|&(i, j)| cost(i, j)).sum();
        prop_assert_eq!(total, p.cost);
    }

    #[test]
    fn edit_distance_is_a_metric(a in "[abc]{0,7}", b in "[abc]{0,7}", c in "[abc]{0,7}") {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.chars().count().max(b.chars().count()));
    }

    #[test]
    fn map_logits_is_linear(
        alpha in -3.0f32..3.0, beta in -3.0f32..3.0, seed in any::<u64>()
    ) {
        let map = cross_map();
        let n = map.rows();
        let x: Vec<f32> = (0..n).map(|i| (((seed >> (i % 60)) & 7) as f32) - 3.5).collect();
        let y: Vec<f32> = (0..n).map(|i| ((i * 7 + seed as usize) % 5) as f32 * 0.3).collect();
        let combo: Vec<f32> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = map.map_logits(&combo).unwrap();
        let mx = map.map_logits(&x).unwrap();
        let my = map.map_logits(&y).unwrap();
        for (j, l) in lhs.iter().enumerate() {
            prop_assert!((l - (alpha * mx[j] + beta * my[j])).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-20.0f64..20.0, 12)) {
        let t = Tensor::<f64>::from_vec(data, &[3, 4]).unwrap();
        let p = t.softmax_rows().unwrap();
        for r in 0..3 {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_stays_in_range(total in 1usize..500, ratio in 0.0f64..0.9, frac in 0.0f64..=1.0) {
        let step = (frac * total as f64) as usize;
        let lr = cosine_warmup_lr(step, total, ratio, 0.01);
        prop_assert!((0.0..=0.01 + 1e-15).contains(&lr));
    }
}

#[test]
fn built_maps_are_row_stochastic() {
    let (a, b) = toks();
    for sp in [Sparsify::MinWeight(0.01), Sparsify::MinWeight(0.2), Sparsify::TopK(1), Sparsify::TopK(4)] {
        for (x, y) in [(a, b), (b, a), (a, a)] {
            let m = VocabMap::build(x, y, texts(), sp).unwrap();
            assert!(m.max_row_sum_error() <= 1e-6, "{sp:?}");
            for id in 0..m.rows() as u32 {
                let row = m.row(id);
                assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
                assert!(row.iter().all(|&(_, w)| w > 0.0));
            }
        }
    }
}

#[test]
fn identical_tokenizers_give_identity_and_full_overlap() {
    let (a, _) = toks();
    let m = VocabMap::build(a, a, texts(), Sparsify::default()).unwrap();
    for id in 0..m.rows() as u32 {
        let row = m.row(id);
        if !row.is_empty() {
            assert_eq!(row, &[(id, 1.0)]);
        }
    }
    assert_eq!(overlap_ratio(&m, a, a, texts()), 1.0);
    let empty = VocabMap::from_rows(a.vocab_size(), vec![Vec::new(); a.vocab_size()]).unwrap();
    assert_eq!(overlap_ratio(&empty, a, a, texts()), 0.0);
}

#[test]
fn map_file_round_trip() {
    let (a, b) = toks();
    let m = cross_map();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.bin");
    m.save(&path).unwrap();
    let back = VocabMap::load(&path).unwrap();
    assert_eq!(back.to_bytes(), m.to_bytes());
    assert!(back.matches(b, a));
    assert!(!back.matches(a, b));
}
