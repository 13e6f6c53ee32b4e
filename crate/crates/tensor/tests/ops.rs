//! Every differentiable op against central differences, plus output invariants.

use std::sync::Arc;

use mmrec_tensor::{
    finite_diff_check, GradCheckConfig, Graph, NodeId, ParamSet, Result, Segments, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

type Builder = fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>;

fn p(g: &mut Graph<f64>, ps: &ParamSet<f64>, n: &str) -> Result<NodeId> {
    g.param_from(ps, n)
}

/// Reduces any node to a scalar through a fixed random-ish weighting so that
/// every output coordinate contributes a distinct gradient.
fn reduce(g: &mut Graph<f64>, x: NodeId) -> Result<NodeId> {
    let v = g.value(x).clone();
    let w: Vec<f64> = (0..v.len()).map(|i| 0.3 + ((i * 37) % 11) as f64 / 7.0).collect();
    let wn = g.input(Tensor::new(v.shape().to_vec(), w).unwrap());
    let m = g.mul(x, wn)?;
    g.sum(m)
}

fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |g, ps| {
            let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
            let y = g.matmul(a, b)?;
            reduce(g, y)
        }),
        ("matmul_t", |g, ps| {
            let (a, c) = (p(g, ps, "a")?, p(g, ps, "c")?);
            let y = g.matmul_t(a, c)?;
            reduce(g, y)
        }),
        ("add_sub_mul", |g, ps| {
            let (a, c) = (p(g, ps, "a")?, p(g, ps, "c")?);
            let s = g.add(a, c)?;
            let d = g.sub(s, c)?;
            let m = g.mul(d, c)?;
            reduce(g, m)
        }),
        ("add_row_scale", |g, ps| {
            let (a, r, s) = (p(g, ps, "a")?, p(g, ps, "r")?, p(g, ps, "s")?);
            let y = g.add_row(a, r)?;
            let y = g.scale_by(y, s)?;
            let y = g.scale(y, -0.7)?;
            let y = g.add_scalar(y, 0.2)?;
            reduce(g, y)
        }),
        ("exp_log_sigmoid", |g, ps| {
            let a = p(g, ps, "a")?;
            let e = g.exp(a)?;
            let l = g.log(e)?;
            let s = g.sigmoid(l)?;
            reduce(g, s)
        }),
        ("relu_prelu", |g, ps| {
            let (a, al) = (p(g, ps, "a")?, p(g, ps, "alpha")?);
            let r = g.relu(a)?;
            let q = g.prelu(a, al)?;
            let y = g.add(r, q)?;
            reduce(g, y)
        }),
        ("softmax", |g, ps| {
            let a = p(g, ps, "a")?;
            let y = g.softmax(a)?;
            reduce(g, y)
        }),
        ("l2_normalize_row_dot", |g, ps| {
            let (a, c) = (p(g, ps, "a")?, p(g, ps, "c")?);
            let na = g.l2_normalize(a)?;
            let nc = g.l2_normalize(c)?;
            let d = g.row_dot(na, nc)?;
            reduce(g, d)
        }),
        ("concat_gather_reshape_mean", |g, ps| {
            let (a, c) = (p(g, ps, "a")?, p(g, ps, "c")?);
            let cat = g.concat(&[a, c, a])?;
            let gat = g.gather_rows(cat, vec![2, 0, 0, 1])?;
            let r = g.reshape(gat, vec![2, 2 * 12])?;
            let y = reduce(g, r)?;
            let m = g.mean(a)?;
            g.add(y, m)
        }),
        ("segments", |g, ps| {
            let (a, v) = (p(g, ps, "a")?, p(g, ps, "b")?);
            let segs = Arc::new(Segments::from_lengths([1, 0, 2]));
            let col = g.gather_rows(a, vec![0, 1, 2])?;
            let w = g.input(Tensor::new(vec![4, 1], vec![1.0, -0.5, 0.25, 0.1]).unwrap());
            let score = g.matmul(col, w)?;
            let att = g.segment_softmax(score, segs.clone())?;
            let vv = g.gather_rows(v, vec![0, 1, 2])?;
            let out = g.segment_weighted_sum(att, vv, segs)?;
            reduce(g, out)
        }),
        ("bce_with_logits", |g, ps| {
            let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
            let z = g.matmul(a, b)?;
            let z = g.reshape(z, vec![6, 1])?;
            g.bce_with_logits(z, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
        }),
        ("softmax_cross_entropy", |g, ps| {
            let (a, s) = (p(g, ps, "a")?, p(g, ps, "s")?);
            let z = g.scale_by(a, s)?;
            g.softmax_cross_entropy(z, &[3, 0, 1])
        }),
    ]
}

fn params(seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.insert("a", rand_tensor(&mut rng, &[3, 4]));
    ps.insert("b", rand_tensor(&mut rng, &[4, 2]));
    ps.insert("c", rand_tensor(&mut rng, &[3, 4]));
    ps.insert("r", rand_tensor(&mut rng, &[4]));
    ps.insert("s", rand_tensor(&mut rng, &[1]));
    ps.insert("alpha", rand_tensor(&mut rng, &[4]));
    ps
}

#[test]
fn every_op_passes_gradient_check_on_100_seeds() {
    for (name, build) in cases() {
        for seed in 0..100 {
            let report = finite_diff_check(
                &params(seed),
                build,
                &GradCheckConfig {
                    h: 1e-6,
                    tol: 1e-4,
                    seed,
                    ..Default::default()
                },
            );
            assert!(report.pass, "{name} seed {seed}: {report:?}");
        }
    }
}

proptest! {
    #[test]
    fn l2_normalize_gives_unit_rows(rows in proptest::collection::vec(
        proptest::collection::vec(-100.0f32..100.0, 5), 1..8)
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f32>() > 1e-6));
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_rows(&rows).unwrap());
        let y = g.l2_normalize(x).unwrap();
        for r in 0..rows.len() {
            let n: f32 = g.value(y).row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
        proptest::collection::vec(-20.0f32..20.0, 6), 1..8)
    ) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_rows(&rows).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..rows.len() {
            let row = g.value(y).row(r);
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
