use std::collections::BTreeMap;

use nmt_core::dataprep::Vocabulary;
use nmt_core::model::{EOS, PAD, UNK};
use nmt_core::shortlist::{extract_shortlist, train_model1, Shortlist, NULL_SOURCE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Corpus = Vec<(Vec<u32>, Vec<u32>)>;

/// Dense Model 1 EM; source index 0 is NULL, sources are shifted by one.
fn dense_em(corpus: &Corpus, vs: usize, vt: usize, iters: usize) -> Vec<Vec<f64>> {
    let mut p = vec![vec![1.0 / vt as f64; vt]; vs + 1];
    for _ in 0..iters {
        let mut c = vec![vec![0.0; vt]; vs + 1];
        for (src, trg) in corpus {
            let srcs: Vec<usize> = std::iter::once(0).chain(src.iter().map(|&s| s as usize + 1)).collect();
            for &t in trg {
                let z: f64 = srcs.iter().map(|&s| p[s][t as usize]).sum();
                for &s in &srcs {
                    c[s][t as usize] += p[s][t as usize] / z;
                }
            }
        }
        for (row, cr) in p.iter_mut().zip(&c) {
            let tot: f64 = cr.iter().sum();
            if tot > 0.0 {
                for (x, y) in row.iter_mut().zip(cr) {
                    *x = y / tot;
                }
            }
        }
    }
    p
}

fn random_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..40)
        .map(|_| {
            let ls = rng.gen_range(1..6);
            let lt = rng.gen_range(1..6);
            (
                (0..ls).map(|_| rng.gen_range(4..12)).collect(),
                (0..lt).map(|_| rng.gen_range(4..10)).collect(),
            )
        })
        .collect()
}

#[test]
fn single_pair_single_token() {
    let m = train_model1(&vec![(vec![5], vec![7])], 1).unwrap();
    assert_eq!(m.table.prob(5, 7), 1.0);
    assert_eq!(m.table.prob(NULL_SOURCE, 7), 1.0);
    let m = train_model1(&vec![(vec![5], vec![7])], 20).unwrap();
    let s: f64 = m.table.row(5).iter().map(|e| e.1).sum();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn four_pair_corpus_prefers_x_for_a() {
    // a=4 b=5 ; x=4 y=5
    let corpus: Corpus = vec![
        (vec![4], vec![4]),
        (vec![4], vec![4]),
        (vec![4], vec![4]),
        (vec![4, 5], vec![4, 5]),
    ];
    let m = train_model1(&corpus, 5).unwrap();
    let oracle = dense_em(&corpus, 6, 6, 5);
    let best = m.table.row(4).iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let oracle_best = (0..6).max_by(|&a, &b| oracle[5][a].total_cmp(&oracle[5][b])).unwrap();
    assert_eq!(best, 4);
    assert_eq!(oracle_best, 4);
}

#[test]
fn matches_dense_oracle_on_random_corpora() {
    for seed in 0..5 {
        let corpus = random_corpus(seed);
        let m = train_model1(&corpus, 5).unwrap();
        let oracle = dense_em(&corpus, 12, 10, 5);
        for s in 4..12u32 {
            for t in 4..10u32 {
                let o = oracle[s as usize + 1][t as usize];
                assert!((m.table.prob(s, t) - o).abs() < 1e-9, "p({t}|{s}) {} vs {o}", m.table.prob(s, t));
            }
        }
        for t in 4..10u32 {
            assert!((m.table.prob(NULL_SOURCE, t) - oracle[0][t as usize]).abs() < 1e-9);
        }
    }
}

#[test]
fn rows_are_distributions() {
    let m = train_model1(&random_corpus(3), 5).unwrap();
    for s in m.table.sources() {
        let row = m.table.row(s);
        assert!(row.iter().all(|e| e.1 >= 0.0));
        assert!((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn log_likelihood_is_non_decreasing_on_ten_corpora() {
    for seed in 0..10 {
        let m = train_model1(&random_corpus(100 + seed), 5).unwrap();
        assert_eq!(m.log_likelihoods.len(), 6);
        for w in m.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "seed {seed}: {:?}", m.log_likelihoods);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let c = random_corpus(7);
    let a = train_model1(&c, 5).unwrap();
    let b = train_model1(&c, 5).unwrap();
    assert_eq!(a.table, b.table);
    assert_eq!(a.log_likelihoods, b.log_likelihoods);
}

#[test]
fn empty_corpus_and_zero_iterations_fail() {
    assert!(train_model1(&Vec::new(), 5).is_err());
    assert!(train_model1(&vec![(vec![], vec![])], 5).is_err());
    assert!(train_model1(&vec![(vec![4], vec![4])], 0).is_err());
}

#[test]
fn extraction_sorts_truncates_and_breaks_ties_by_id() {
    let corpus: Corpus = vec![(vec![4], vec![6, 5, 7])];
    let m = train_model1(&corpus, 1).unwrap();
    // every target equally likely under a
    let sl = extract_shortlist(&m.table, 2).unwrap();
    assert_eq!(sl.row(4).iter().map(|e| e.0).collect::<Vec<_>>(), vec![5, 6]);
    assert!(sl.rows().all(|(s, _)| s != NULL_SOURCE));
    let full = extract_shortlist(&m.table, 100).unwrap();
    assert_eq!(full.row(4).len(), 3);
}

#[test]
fn hand_set_row_top_two() {
    // x:0.7 y:0.2 z:0.1 reached by counts 7:2:1
    let mut corpus: Corpus = Vec::new();
    for (t, n) in [(4u32, 7), (5, 2), (6, 1)] {
        for _ in 0..n {
            corpus.push((vec![4], vec![t]));
        }
    }
    let m = train_model1(&corpus, 1).unwrap();
    assert!((m.table.prob(4, 4) - 0.7).abs() < 1e-12);
    let sl = extract_shortlist(&m.table, 2).unwrap();
    assert_eq!(sl.row(4).iter().map(|e| e.0).collect::<Vec<_>>(), vec![4, 5]);
}

#[test]
fn candidates_include_specials() {
    let mut rows = BTreeMap::new();
    rows.insert(9, vec![(12, 0.6), (11, 0.4)]);
    rows.insert(10, vec![(11, 1.0)]);
    let sl = Shortlist::from_rows(2, rows).unwrap();
    assert_eq!(sl.candidates(&[9, 10, 77]), vec![PAD, UNK, EOS, 11, 12]);
}

#[test]
fn unsorted_or_oversized_rows_are_rejected() {
    let mut rows = BTreeMap::new();
    rows.insert(9, vec![(12, 0.4), (11, 0.6)]);
    assert!(Shortlist::from_rows(2, rows.clone()).is_err());
    rows.insert(9, vec![(12, 0.6), (11, 0.4)]);
    assert!(Shortlist::from_rows(1, rows).is_err());
}

fn vocab(prefix: &str, n: usize) -> Vocabulary {
    let toks: Vec<String> = (0..n).map(|i| format!("{prefix}{i}")).collect();
    Vocabulary::build(toks.iter().map(String::as_str), 1, None, false).unwrap()
}

proptest! {
    #[test]
    fn rows_are_prefix_closed_in_k(seed in 0u64..1000) {
        let m = train_model1(&random_corpus(seed), 3).unwrap();
        let a = extract_shortlist(&m.table, 5).unwrap();
        let b = extract_shortlist(&m.table, 10).unwrap();
        for (s, row) in a.rows() {
            prop_assert_eq!(row, &b.row(s)[..row.len()]);
        }
    }

    #[test]
    fn file_format_round_trips(seed in 0u64..1000, k in 1usize..8) {
        let (sv, tv) = (vocab("s", 12), vocab("t:", 10));
        let m = train_model1(&random_corpus(seed), 2).unwrap();
        let sl = extract_shortlist(&m.table, k).unwrap();
        let text = sl.to_text(&sv, &tv);
        let back = Shortlist::from_text(&text, &sv, &tv).unwrap();
        prop_assert_eq!(&back, &sl);
        for ((_, x), (_, y)) in back.rows().zip(sl.rows()) {
            for (p, q) in x.iter().zip(y) {
                prop_assert_eq!(p.1.to_bits(), q.1.to_bits());
            }
        }
        prop_assert_eq!(back.to_text(&sv, &tv), text);
    }
}
