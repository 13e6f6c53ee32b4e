use mmrec_core::metrics::{auc, gauc, logloss};
use mmrec_core::reps::dot;
use mmrec_core::retrieval::{acc_at_n, acc_at_ns, spearman, top_n, RetrievalSet};
use mmrec_core::simtier::{sim_scores, simtier, simtier_batch, simtier_feature, tier_index, TierScaling};
use mmrec_core::{CoreError, Embeddings};
use mmrec_tensor::Segments;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scan_tier(s: f32, n: usize) -> usize {
    let s = s as f64;
    if s <= -1.0 {
        return 0;
    }
    for t in 0..n {
        let lo = 2.0 * t as f64 / n as f64 - 1.0;
        let hi = 2.0 * (t + 1) as f64 / n as f64 - 1.0;
        if s > lo && s <= hi {
            return t;
        }
    }
    n - 1
}

fn random_score(rng: &mut ChaCha8Rng, n: usize) -> f32 {
    match rng.random_range(0..4) {
        0 => {
            let t = rng.random_range(0..=n);
            (2.0 * t as f64 / n as f64 - 1.0) as f32
        }
        1 => *[-1.0f32, 1.0, 0.0].get(rng.random_range(0..3)).unwrap(),
        _ => rng.random_range(-1.0f32..=1.0),
    }
}

#[test]
fn simtier_matches_interval_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100_000 {
        let n = rng.random_range(1..=50);
        let l = rng.random_range(0..=200);
        let scores: Vec<f32> = (0..l).map(|_| random_score(&mut rng, n)).collect();
        let mut expected = vec![0u32; n];
        for &s in &scores {
            expected[scan_tier(s, n)] += 1;
        }
        assert_eq!(simtier(&scores, n, false), expected, "n={n} scores={scores:?}");
    }
}

#[test]
fn tier_index_agrees_with_scan_on_every_edge() {
    for n in 1..=200 {
        for t in 0..=n {
            let s = (2.0 * t as f64 / n as f64 - 1.0) as f32;
            for v in [s, f32::from_bits(s.to_bits().wrapping_add(1)), f32::from_bits(s.to_bits().wrapping_sub(1))] {
                if (-1.0..=1.0).contains(&v) {
                    assert_eq!(tier_index(v, n), scan_tier(v, n), "n={n} s={v}");
                }
            }
        }
    }
}

#[test]
fn simtier_spot_values() {
    assert_eq!(simtier(&[0.9, -0.5, 0.1], 4, false), vec![1, 0, 1, 1]);
    assert_eq!(simtier(&[1.0; 5], 4, false), vec![0, 0, 0, 5]);
    assert_eq!(simtier(&[], 4, false), vec![0; 4]);
    let f = simtier_feature(&[1, 0, 1, 1], 3, TierScaling::Normalized);
    assert_eq!(f, vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
    assert_eq!(simtier_feature(&[0; 4], 0, TierScaling::Normalized), vec![0.0; 4]);
    let lg = simtier_feature(&[0, 3], 3, TierScaling::Log);
    assert_eq!(lg, vec![0.0, 4f32.ln()]);
}

#[test]
fn unshifted_rule_drops_top_tier() {
    assert_eq!(simtier(&[1.0, 0.95, -1.0], 4, true), vec![1, 0, 0, 0]);
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = dot(&v, &v).sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn batched_simtier_equals_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reps = Embeddings::from_rows(&(0..60).map(|_| unit(&mut rng, 8)).collect::<Vec<_>>()).unwrap();
    let lengths: Vec<usize> = (0..40).map(|_| rng.random_range(0..30)).collect();
    let segs = Segments::from_lengths(lengths.iter().copied());
    let seq: Vec<usize> = (0..segs.total()).map(|_| rng.random_range(0..60)).collect();
    let targets: Vec<usize> = (0..40).map(|_| rng.random_range(0..60)).collect();
    let batched = simtier_batch(&reps, &targets, &segs, &seq, 20, false).unwrap();
    for (r, &t) in targets.iter().enumerate() {
        let rows = segs.range(r).map(|p| reps.row(seq[p]));
        let single = simtier(&sim_scores(reps.row(t), rows).unwrap(), 20, false);
        assert_eq!(batched[r], single);
        assert_eq!(single.iter().sum::<u32>() as usize, lengths[r]);
    }
}

#[test]
fn sim_scores_rejects_mismatched_dims() {
    let err = sim_scores(&[1.0, 0.0], [&[1.0f32, 0.0, 0.0][..]]).unwrap_err();
    assert!(matches!(err, CoreError::Dim { .. }));
}

proptest! {
    #[test]
    fn simtier_ignores_order(mut scores in prop::collection::vec(-1.0f32..=1.0, 0..100), n in 1usize..40, seed in any::<u64>()) {
        let before = simtier(&scores, n, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..scores.len()).rev() {
            scores.swap(i, rng.random_range(0..=i));
        }
        prop_assert_eq!(simtier(&scores, n, false), before.clone());
        prop_assert_eq!(before.iter().sum::<u32>() as usize, scores.len());
    }

    #[test]
    fn normalized_feature_sums_to_one(scores in prop::collection::vec(-1.0f32..=1.0, 1..100), n in 1usize..40) {
        let f = simtier_feature(&simtier(&scores, n, false), scores.len(), TierScaling::Normalized);
        prop_assert!((f.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    let levels = rng.random_range(2..50);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0..levels) as f64 / levels as f64
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    (scores, labels)
}

#[test]
fn auc_matches_all_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(2..=500);
        let (s, l) = random_case(&mut rng, n);
        let a = auc(&s, &l).unwrap();
        let b = pairwise_auc(&s, &l);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn auc_spot_values() {
    assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(CoreError::NotDefined(_))));
    let s = [0.9, 0.1, 0.8, 0.2, 0.3, 0.4, 0.5, 0.6];
    let l = [1, 0, 1, 0, 1, 0, 0, 1];
    let g = [1, 1, 2, 2, 2, 2, 2, 2];
    assert!((pairwise_auc(&s[2..], &l[2..]) - 7.0 / 9.0).abs() < 1e-12);
    // Record-weighted: (2 * 1 + 6 * 7/9) / 8.
    assert!((gauc(&s, &l, &g).unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn gauc_skips_single_class_groups() {
    let s = [0.9, 0.1, 0.5, 0.4, 0.3];
    let l = [1, 0, 1, 1, 1];
    let g = [1, 1, 2, 2, 2];
    assert_eq!(gauc(&s, &l, &g).unwrap(), 1.0);
    assert!(gauc(&[0.1, 0.2], &[1, 1], &[1, 2]).is_err());
}

proptest! {
    #[test]
    fn auc_invariant_to_monotone_maps(seed in any::<u64>(), n in 2usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = random_case(&mut rng, n);
        let a = auc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
        prop_assert!((auc(&t, &l).unwrap() - a).abs() < 1e-12);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auc(&neg, &l).unwrap() + a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logloss_matches_naive_sum(seed in any::<u64>(), n in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let l: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        let naive = -p.iter().zip(&l).map(|(&p, &y)| if y == 1 { p.ln() } else { (1.0 - p).ln() }).sum::<f64>() / n as f64;
        prop_assert!((logloss(&p, &l).unwrap() - naive).abs() < 1e-9);
    }
}

fn sorted_top(query: &[f32], corpus: &Embeddings, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let s: Vec<f32> = idx.iter().map(|&j| dot(query, corpus.row(j))).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn random_set(rng: &mut ChaCha8Rng, d: usize, dim: usize) -> RetrievalSet {
    let grid = rng.random_bool(0.5);
    let row = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        if grid {
            (0..dim).map(|_| rng.random_range(-2..=2) as f32 * 0.5).collect()
        } else {
            unit(rng, dim)
        }
    };
    let q: Vec<Vec<f32>> = (0..d).map(|_| row(rng)).collect();
    let p: Vec<Vec<f32>> = (0..d).map(|_| row(rng)).collect();
    RetrievalSet::new(Embeddings::from_rows(&q).unwrap(), Embeddings::from_rows(&p).unwrap()).unwrap()
}

#[test]
fn top_n_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let d = rng.random_range(1..=120);
        let set = random_set(&mut rng, d, 4);
        let n = rng.random_range(0..=d);
        let q = set.queries.row(0);
        assert_eq!(top_n(q, &set.positives, n).unwrap(), sorted_top(q, &set.positives, n));
    }
}

#[test]
fn top_n_breaks_ties_by_index_and_checks_n() {
    let corpus = Embeddings::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert_eq!(top_n(&[1.0, 0.0], &corpus, 3).unwrap(), vec![0, 2, 1]);
    assert!(matches!(top_n(&[1.0, 0.0], &corpus, 4), Err(CoreError::TopN { n: 4, len: 3 })));
}

#[test]
fn acc_at_n_matches_double_loop() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=200);
        let set = random_set(&mut rng, d, 3);
        let ns: Vec<usize> = vec![1, 2, 5, 10, d];
        let got = acc_at_ns(&set, &ns);
        for (k, &n) in ns.iter().enumerate() {
            let n = n.min(d);
            let hits = (0..d)
                .filter(|&i| sorted_top(set.queries.row(i), &set.positives, n).contains(&i))
                .count();
            assert!((got[k] - hits as f64 / d as f64).abs() < 1e-12, "seed {seed} n {n}");
        }
        for w in got.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert_eq!(acc_at_n(&set, d), 1.0);
    }
}

#[test]
fn spearman_matches_closed_form_without_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let rank = |v: &[f64]| {
            let mut o: Vec<usize> = (0..v.len()).collect();
            o.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (k, &i) in o.iter().enumerate() {
                r[i] = (k + 1) as f64;
            }
            r
        };
        let (rx, ry) = (rank(&x), rank(&y));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let nf = n as f64;
        let expected = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        assert!((spearman(&x, &y).unwrap() - expected).abs() < 1e-9);
    }
}
