//! Shared layers and name-seeded initialization.
//!
//! Every tensor is drawn from its own generator keyed by `(seed, name)`, so a
//! parameter with the same name and shape starts identical in every model
//! built from the same seed, regardless of what else the model contains.

use std::sync::Arc;

use mmrec_tensor::{Graph, NodeId, ParamSet, Scalar, Segments, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const PRELU_INIT: f32 = 0.25;

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn normal_tensor(seed: u64, name: &str, shape: &[usize], std: f32) -> Tensor {
    let mut rng = rng_for(seed, name);
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
        .expect("shape matches data")
}

/// Glorot-scaled weight `[fan_in, fan_out]` and zero bias.
pub fn init_dense(ps: &mut ParamSet, seed: u64, prefix: &str, fan_in: usize, fan_out: usize) {
    init_dense_rows(ps, seed, prefix, fan_in, fan_out, fan_in);
}

/// Like [`init_dense`], but only the first `random_rows` input rows are drawn;
/// the rest start at zero. The drawn rows do not depend on `fan_in`, so two
/// layers that differ only in extra trailing inputs start as the same function.
pub fn init_dense_rows(
    ps: &mut ParamSet,
    seed: u64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    random_rows: usize,
) {
    let name = format!("{prefix}.w");
    let std = (2.0 / (random_rows.max(1) + fan_out) as f32).sqrt();
    let drawn = normal_tensor(seed, &name, &[random_rows, fan_out], std);
    let mut data = drawn.into_data();
    data.resize(fan_in * fan_out, 0.0);
    ps.insert(name, Tensor::new(vec![fan_in, fan_out], data).expect("sizes"));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_prelu(ps: &mut ParamSet, prefix: &str, width: usize) {
    ps.insert(format!("{prefix}.alpha"), Tensor::full(&[width], PRELU_INIT));
}

pub fn dense<T: Scalar>(g: &mut Graph<T>, ps: &ParamSet<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param_from(ps, &format!("{prefix}.w"))?;
    let b = g.param_from(ps, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

pub fn prelu<T: Scalar>(g: &mut Graph<T>, ps: &ParamSet<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let a = g.param_from(ps, &format!("{prefix}.alpha"))?;
    Ok(g.prelu(x, a)?)
}

/// Affine layers named `{prefix}.l{i}`, PReLU after every layer but the last.
pub fn init_mlp(ps: &mut ParamSet, seed: u64, prefix: &str, input: usize, widths: &[usize]) {
    init_mlp_rows(ps, seed, prefix, input, widths, input);
}

/// [`init_mlp`] whose first layer only draws its first `random_rows` rows.
pub fn init_mlp_rows(
    ps: &mut ParamSet,
    seed: u64,
    prefix: &str,
    input: usize,
    widths: &[usize],
    random_rows: usize,
) {
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        let name = format!("{prefix}.l{i}");
        let rows = if i == 0 { random_rows } else { fan_in };
        init_dense_rows(ps, seed, &name, fan_in, w, rows);
        if i + 1 < widths.len() {
            init_prelu(ps, &name, w);
        }
        fan_in = w;
    }
}

/// Runs the MLP; returns the hidden activations and the output node.
pub fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    prefix: &str,
    layers: usize,
    x: NodeId,
) -> Result<(Vec<NodeId>, NodeId)> {
    let mut hidden = Vec::with_capacity(layers.saturating_sub(1));
    let mut h = x;
    for i in 0..layers {
        let name = format!("{prefix}.l{i}");
        h = dense(g, ps, &name, h)?;
        if i + 1 < layers {
            h = prelu(g, ps, &name, h)?;
            hidden.push(h);
        }
    }
    Ok((hidden, h))
}

/// Attention unit over `[v_i, v_c, v_i * v_c, v_i - v_c]`: one PReLU hidden
/// layer of width `hidden`, then a scalar score.
pub fn init_din(ps: &mut ParamSet, seed: u64, prefix: &str, dim: usize, hidden: usize) {
    init_mlp(ps, seed, prefix, 4 * dim, &[hidden, 1]);
}

pub struct Attention {
    /// Packed `[P, 1]` weights, summing to one within each segment.
    pub weights: NodeId,
    /// `[segments, dim]` weighted sums; zero rows for empty segments.
    pub pooled: NodeId,
}

/// Target-aware attention pooling of packed behavior rows `seq` (`[P, dim]`)
/// against `target` (`[B, dim]`), where `segs` assigns rows to targets.
pub fn din_attention<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    prefix: &str,
    seq: NodeId,
    target: NodeId,
    segs: &Arc<Segments>,
) -> Result<Attention> {
    let tc = g.gather_rows(target, segs.owners())?;
    let prod = g.mul(seq, tc)?;
    let diff = g.sub(seq, tc)?;
    let feats = g.concat(&[seq, tc, prod, diff])?;
    let (_, score) = mlp(g, ps, prefix, 2, feats)?;
    let weights = g.segment_softmax(score, segs.clone())?;
    let pooled = g.segment_weighted_sum(weights, seq, segs.clone())?;
    Ok(Attention { weights, pooled })
}
