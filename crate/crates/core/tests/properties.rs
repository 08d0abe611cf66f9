use mdug_core::metrics::{bleu1, boundary_score, cider, meteor_lite, rouge_l};
use mdug_core::understanding::window_spans;
use mdug_core::{generate_corpus, load_corpus, save_corpus, BoundaryPrediction, GenConfig};
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "cat", "sat", "on", "the", "mat", "dog", "ran"]), 1..8)
        .prop_map(|w| w.join(" "))
}

fn corpus_pairs() -> impl Strategy<Value = (Vec<String>, Vec<Vec<String>>, Vec<usize>)> {
    prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..3)), 2..8).prop_flat_map(|pairs| {
        let n = pairs.len();
        let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        (Just(c), Just(r), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn text_metrics_ignore_pair_order((cands, refs, perm) in corpus_pairs()) {
        let pc: Vec<String> = perm.iter().map(|&i| cands[i].clone()).collect();
        let pr: Vec<Vec<String>> = perm.iter().map(|&i| refs[i].clone()).collect();
        for f in [bleu1, rouge_l, meteor_lite, cider] {
            let (a, b) = (f(&cands, &refs).unwrap(), f(&pc, &pr).unwrap());
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn text_metrics_stay_in_range((cands, refs, _) in corpus_pairs()) {
        for f in [bleu1, rouge_l, meteor_lite] {
            let v = f(&cands, &refs).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        let c = cider(&cands, &refs).unwrap();
        prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
    }

    #[test]
    fn boundary_score_is_consistent(labels in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
        let (preds, golds): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
        let s = boundary_score(&preds, &golds).unwrap();
        let agree = preds.iter().zip(&golds).filter(|(p, g)| p == g).count();
        prop_assert_eq!(s.tp + s.fp + s.tn + s.fn_, preds.len());
        prop_assert!((s.acc - agree as f64 / preds.len() as f64).abs() < 1e-12);
        if s.precision + s.recall > 0.0 {
            let f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
            prop_assert!((s.f1 - f1).abs() < 1e-12);
        } else {
            prop_assert_eq!(s.f1, 0.0);
        }
    }

    #[test]
    fn repaired_predictions_respect_co_occurrence(
        probs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..100),
        threshold in 0.05f64..0.95,
    ) {
        let (ps, pt): (Vec<f64>, Vec<f64>) = probs.into_iter().unzip();
        let p = BoundaryPrediction::from_probs(ps.clone(), pt, threshold, true);
        for (i, (&s, &t)) in p.scene_label.iter().zip(&p.session_label).enumerate() {
            prop_assert!(!(s == 1 && t == 0));
            prop_assert_eq!(s, (ps[i] >= threshold) as u8);
        }
    }

    #[test]
    fn windows_cover_each_utterance_once(n in 1usize..60, size in 2usize..12) {
        let mut hits = vec![0; n];
        for w in window_spans(n, size) {
            prop_assert!(w.end - w.start <= size);
            for h in &mut hits[w.first_target..w.end] {
                *h += 1;
            }
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn corpus_survives_a_disk_round_trip(seed in 0u64..1000, leak in 0.0f64..=1.0) {
        let cfg = GenConfig { n_train: 6, n_dev: 2, n_test: 2, leak, ..GenConfig::default() };
        let corpus = generate_corpus(&cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        prop_assert_eq!(&loaded.episodes, &corpus.episodes);
        prop_assert_eq!(loaded.vocab(), corpus.vocab());
    }
}
