use std::collections::VecDeque;

use mmrec_core::scl::*;
use mmrec_core::synth::{gen_catalog, gen_triplets, CatalogConfig, TripletSample};
use mmrec_core::CoreError;
use mmrec_tensor::{checkpoint, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Random orthogonal matrix from Gram-Schmidt on random rows.
fn rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            rows.push(v.iter().map(|x| x / n).collect());
        }
    }
    rows
}

fn rotate(m: &[Vec<f64>], v: &[f32]) -> Vec<f32> {
    m.iter()
        .map(|r| r.iter().zip(v).map(|(a, &b)| a * b as f64).sum::<f64>() as f32)
        .collect()
}

fn bank_of(rows: &[Vec<f32>]) -> MemoryBank {
    let mut b = MemoryBank::new(rows.len().max(1), rows[0].len());
    b.enqueue(rows.iter().map(Vec::as_slice));
    b
}

proptest! {
    #[test]
    fn infonce_is_rotation_invariant(seed in any::<u64>(), d in 2usize..12, k in 1usize..20, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = unit(&mut rng, d);
        let kp = unit(&mut rng, d);
        let keys: Vec<Vec<f32>> = (0..k).map(|_| unit(&mut rng, d)).collect();
        let r = rotation(&mut rng, d);
        let a = infonce_loss(&q, &kp, &bank_of(&keys), tau).unwrap();
        let rk: Vec<Vec<f32>> = keys.iter().map(|x| rotate(&r, x)).collect();
        let b = infonce_loss(&rotate(&r, &q), &rotate(&r, &kp), &bank_of(&rk), tau).unwrap();
        prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
    }

    #[test]
    fn infonce_is_positive(seed in any::<u64>(), d in 2usize..12, k in 1usize..20, tau in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = unit(&mut rng, d);
        let keys: Vec<Vec<f32>> = (0..k).map(|_| unit(&mut rng, d)).collect();
        let loss = infonce_loss(&q, &q, &bank_of(&keys), tau).unwrap();
        prop_assert!(loss >= 0.0);
        // Below this the negative terms can underflow to an exact zero.
        if tau >= 0.1 {
            prop_assert!(loss > 0.0, "{}", loss);
        }
    }

    #[test]
    fn bank_behaves_like_a_queue(cap in 1usize..8, pushes in prop::collection::vec(0usize..4, 10)) {
        let mut bank = MemoryBank::new(cap, 2);
        let mut oracle: VecDeque<Vec<f32>> = VecDeque::new();
        let mut next = 0.0f32;
        for n in pushes {
            let rows: Vec<Vec<f32>> = (0..n).map(|_| {
                next += 1.0;
                let a = next.sin();
                vec![a, (1.0 - a * a).max(0.0).sqrt()]
            }).collect();
            bank.enqueue(rows.iter().map(Vec::as_slice));
            for r in rows {
                if oracle.len() == cap {
                    oracle.pop_front();
                }
                oracle.push_back(r);
            }
            let got: Vec<Vec<f32>> = bank.entries().map(<[f32]>::to_vec).collect();
            prop_assert_eq!(got, oracle.iter().cloned().collect::<Vec<_>>());
            prop_assert_eq!(bank.fill(), oracle.len());
        }
    }
}

#[test]
fn uniform_logits_give_log_of_fill_plus_one() {
    for fill in [1usize, 3, 17] {
        let keys: Vec<Vec<f32>> = (0..fill).map(|_| vec![0.0, 1.0]).collect();
        let loss = infonce_loss(&[1.0, 0.0], &[0.0, 1.0], &bank_of(&keys), 0.3).unwrap();
        assert!((loss - ((fill + 1) as f64).ln()).abs() < 1e-6);
    }
}

#[test]
fn infonce_spot_values() {
    let bank = bank_of(&[vec![0.0, 1.0]]);
    let l = infonce_loss(&[1.0, 0.0], &[1.0, 0.0], &bank, 1.0).unwrap();
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-9);
    assert!((l - 0.3133).abs() < 1e-4);
    let s = 0.8f32;
    let bank = bank_of(&[vec![s, (1.0 - s * s).sqrt()]]);
    assert!(infonce_loss(&[1.0, 0.0], &[1.0, 0.0], &bank, 0.01).unwrap() < 1e-8);
    assert!(matches!(
        infonce_loss(&[1.0, 0.0], &[1.0, 0.0], &MemoryBank::new(4, 2), 1.0),
        Err(CoreError::EmptyBank)
    ));
}

#[test]
fn bank_keeps_last_four() {
    let mut bank = MemoryBank::new(4, 2);
    let rows: Vec<Vec<f32>> = (0..5).map(|i| vec![(i as f32).cos(), (i as f32).sin()]).collect();
    bank.enqueue(rows.iter().map(Vec::as_slice));
    let got: Vec<Vec<f32>> = bank.entries().map(<[f32]>::to_vec).collect();
    assert_eq!(got, rows[1..].to_vec());
}

#[test]
fn graph_loss_matches_plain_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = PretrainConfig {
        hidden: 8,
        d_rep: 4,
        ..Default::default()
    };
    let state = EncoderState::init(6, &cfg);
    let x: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = encode(&state.query, &mmrec_core::Embeddings::new(6, x.clone()).unwrap()).unwrap();
    let kp = unit(&mut rng, 4);
    let bank: Vec<Vec<f32>> = (0..5).map(|_| unit(&mut rng, 4)).collect();
    let expected = infonce_loss(q.row(0), &kp, &bank_of(&bank), state.tau()).unwrap();
    let batch = SclBatch {
        queries: Tensor::new(vec![1, 6], x).unwrap(),
        pos_keys: Tensor::new(vec![1, 4], kp).unwrap(),
        neg_keys: None,
        negatives: Negatives::Bank(Tensor::from_rows(&bank).unwrap()),
    };
    let mut g = Graph::new();
    let nodes = scl_loss(&mut g, &state.query, &batch, 0.2, 1.0).unwrap();
    let got = g.value(nodes.total.unwrap()).item() as f64;
    assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    assert!(nodes.triplet.is_none());
}

#[test]
fn gradients_reach_only_query_parameters() {
    let cfg = PretrainConfig {
        hidden: 8,
        d_rep: 4,
        ..Default::default()
    };
    let state = EncoderState::init(6, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = |rng: &mut ChaCha8Rng, n: usize| Tensor::from_rows(&(0..n).map(|_| unit(rng, 4)).collect::<Vec<_>>()).unwrap();
    let batch = SclBatch {
        queries: Tensor::new(vec![2, 6], (0..12).map(|i| i as f32 / 7.0 - 0.5).collect()).unwrap(),
        pos_keys: rows(&mut rng, 2),
        neg_keys: Some(rows(&mut rng, 2)),
        negatives: Negatives::Bank(rows(&mut rng, 3)),
    };
    let mut g = Graph::new();
    let loss = scl_loss(&mut g, &state.query, &batch, 0.5, 1.0).unwrap().total.unwrap();
    let grads = g.backward(loss).unwrap();
    let names: Vec<&String> = grads.iter().map(|(n, _)| n).collect();
    let query: Vec<&String> = state.query.names().collect();
    assert_eq!(names, query);
    assert!(grads.get(LOG_TAU).is_some());
}

fn small_triplets(n: usize, seed: u64) -> Vec<TripletSample> {
    let c = gen_catalog(&CatalogConfig {
        n_items: 200,
        n_clusters: 5,
        d_raw: 8,
        d_lat: 4,
        seed,
        ..Default::default()
    })
    .unwrap();
    gen_triplets(&c.items, c.n_clusters, n, 0.05, seed).unwrap().samples
}

fn small_cfg() -> PretrainConfig {
    PretrainConfig {
        hidden: 16,
        d_rep: 8,
        batch_size: 16,
        bank_size: 64,
        epochs: 2,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn key_encoder_is_untouched_at_unit_momentum() {
    let t = small_triplets(200, 1);
    let cfg = PretrainConfig {
        momentum: 1.0,
        ..small_cfg()
    };
    let init = EncoderState::init(8, &cfg);
    let out = pretrain(&t, &cfg, None).unwrap();
    assert_eq!(out.state.key, init.key);
    assert_ne!(out.state.query, init.query);
}

#[test]
fn training_is_bitwise_reproducible() {
    let t = small_triplets(300, 2);
    let a = pretrain(&t, &small_cfg(), None).unwrap();
    let b = pretrain(&t, &small_cfg(), None).unwrap();
    let bytes = |s: &EncoderState| checkpoint::encode(&s.to_params(), &Default::default());
    assert_eq!(bytes(&a.state), bytes(&b.state));
    assert_eq!(a.history, b.history);
}

#[test]
fn zero_epochs_return_initialization() {
    let t = small_triplets(50, 3);
    let cfg = PretrainConfig {
        epochs: 0,
        ..small_cfg()
    };
    let out = pretrain(&t, &cfg, None).unwrap();
    assert_eq!(out.state, EncoderState::init(8, &cfg));
    assert!(out.history.is_empty());
}

#[test]
fn without_bank_the_key_encoder_tracks_the_query_encoder() {
    let t = small_triplets(100, 4);
    let cfg = PretrainConfig {
        use_moco: false,
        ..small_cfg()
    };
    let out = pretrain(&t, &cfg, None).unwrap();
    assert_eq!(out.state.key, out.state.query.subset("enc"));
}

#[test]
fn checkpoints_are_written_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let t = small_triplets(100, 5);
    let sink = CheckpointSink {
        dir: dir.path(),
        config_hash: "abc123",
        seed: 9,
        stem: "scl",
    };
    let out = pretrain(&t, &small_cfg(), Some(&sink)).unwrap();
    for epoch in 1..=2 {
        let (params, meta) = checkpoint::load(sink.path(&format!("epoch_{epoch}"), "ckpt")).unwrap();
        assert_eq!(meta["config_hash"], "abc123");
        assert_eq!(meta["seed"], "9");
        let restored = EncoderState::from_params(&params, out.state.momentum).unwrap();
        if epoch == 2 {
            assert_eq!(restored, out.state);
        }
        let side: CheckpointSidecar =
            serde_json::from_str(&std::fs::read_to_string(sink.path(&format!("epoch_{epoch}"), "json")).unwrap()).unwrap();
        assert_eq!(side.loss_curve.len(), epoch);
        assert_eq!((side.config_hash.as_str(), side.seed), ("abc123", 9));
    }
}

#[test]
fn temperature_stays_above_its_floor() {
    let t = small_triplets(300, 6);
    let cfg = PretrainConfig {
        min_tau: 0.05,
        lr: 0.05,
        epochs: 3,
        ..small_cfg()
    };
    let out = pretrain(&t, &cfg, None).unwrap();
    assert!(out.history.iter().all(|h| h.tau >= 0.05 * (1.0 - 1e-6)));
}

#[test]
fn invalid_configs_are_rejected() {
    let t = small_triplets(10, 7);
    for cfg in [
        PretrainConfig { momentum: 1.5, ..small_cfg() },
        PretrainConfig { margin: -0.1, ..small_cfg() },
        PretrainConfig { batch_size: 0, ..small_cfg() },
    ] {
        assert!(matches!(pretrain(&t, &cfg, None), Err(CoreError::Config(_))));
    }
    assert!(pretrain(&[], &small_cfg(), None).is_err());
}

#[test]
fn retrieval_set_keeps_first_occurrence_per_item() {
    let t = small_triplets(500, 8);
    let state = EncoderState::init(8, &small_cfg());
    let set = retrieval_set(&state.query, &t).unwrap();
    let distinct: std::collections::BTreeSet<u64> = t.iter().map(|s| s.positive_item_id).collect();
    assert_eq!(set.len(), distinct.len());
    for r in set.queries.iter().chain(set.positives.iter()) {
        let n: f32 = r.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}
