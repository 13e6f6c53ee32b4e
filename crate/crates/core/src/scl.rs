//! Contrastive item-encoder pretraining: query/key encoders with momentum
//! updates, a FIFO memory bank of keys, InfoNCE with a learnable temperature
//! and an optional triplet hinge on same-category hard negatives.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mmrec_tensor::checkpoint;
use mmrec_tensor::{Adam, AdamConfig, Graph, NodeId, ParamSet, Scalar, Tensor, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{init_mlp, mlp, rng_for};
use crate::reps::{dot, Embeddings};
use crate::retrieval::RetrievalSet;
use crate::synth::TripletSample;

pub const LOG_TAU: &str = "log_tau";
const ENC: &str = "enc";
const KEY_PREFIX: &str = "key.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub hidden: usize,
    pub d_rep: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub bank_size: usize,
    pub margin: f64,
    pub triplet_weight: f64,
    pub init_tau: f64,
    /// Floor applied to the learned temperature after every step.
    pub min_tau: f64,
    pub use_moco: bool,
    pub use_triplet: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            d_rep: 32,
            batch_size: 128,
            epochs: 10,
            lr: 1e-3,
            momentum: 0.999,
            bank_size: 4096,
            margin: 0.2,
            triplet_weight: 1.0,
            init_tau: 0.07,
            min_tau: 0.01,
            use_moco: true,
            use_triplet: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("pretrain: {m}")));
        if self.margin < 0.0 || self.triplet_weight < 0.0 {
            return bad("margin and triplet_weight must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.bank_size == 0 || self.hidden == 0 || self.d_rep == 0 {
            return bad("batch_size, bank_size, hidden and d_rep must be positive");
        }
        if !(self.init_tau > 0.0 && self.lr > 0.0 && self.min_tau > 0.0) {
            return bad("init_tau, min_tau and lr must be positive");
        }
        Ok(())
    }
}

/// Query encoder (trainable, with `log_tau`), key encoder (moved only by
/// [`momentum_update`]) and the momentum coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub query: ParamSet,
    pub key: ParamSet,
    pub momentum: f64,
}

impl EncoderState {
    pub fn init(d_raw: usize, cfg: &PretrainConfig) -> Self {
        let mut query = ParamSet::new();
        init_mlp(&mut query, cfg.seed, ENC, d_raw, &[cfg.hidden, cfg.d_rep]);
        let key = query.clone();
        query.insert(LOG_TAU, Tensor::scalar(cfg.init_tau.ln() as f32));
        Self {
            query,
            key,
            momentum: cfg.momentum,
        }
    }

    pub fn tau(&self) -> f64 {
        (self.query.get(LOG_TAU).map_or(0.0, |t| t.item() as f64)).exp()
    }

    /// Query parameters plus the key encoder under a `key.` prefix.
    pub fn to_params(&self) -> ParamSet {
        let mut out = self.query.clone();
        for (k, v) in self.key.iter() {
            out.insert(format!("{KEY_PREFIX}{k}"), v.clone());
        }
        out
    }

    pub fn from_params(params: &ParamSet, momentum: f64) -> Result<Self> {
        let mut query = ParamSet::new();
        let mut key = ParamSet::new();
        for (k, v) in params.iter() {
            match k.strip_prefix(KEY_PREFIX) {
                Some(rest) => key.insert(rest, v.clone()),
                None => query.insert(k.clone(), v.clone()),
            }
        }
        if key.is_empty() {
            key = query.subset(ENC);
        }
        for name in [format!("{ENC}.l0.w"), format!("{ENC}.l1.w")] {
            query.get(&name)?;
        }
        Ok(Self {
            query,
            key,
            momentum,
        })
    }
}

/// Encoder forward in a graph: MLP then row-wise L2 normalization.
pub fn encode_node<T: Scalar>(g: &mut Graph<T>, ps: &ParamSet<T>, x: NodeId) -> Result<NodeId> {
    let (_, y) = mlp(g, ps, ENC, 2, x)?;
    Ok(g.l2_normalize(y)?)
}

/// Encodes feature rows into unit-norm representations.
pub fn encode(ps: &ParamSet, features: &Embeddings) -> Result<Embeddings> {
    let w = ps.get(&format!("{ENC}.l0.w"))?;
    if w.shape()[0] != features.dim() {
        return Err(CoreError::Dim {
            op: "encode",
            expected: w.shape()[0],
            got: features.dim(),
        });
    }
    const CHUNK: usize = 4096;
    let mut out = Vec::with_capacity(features.len() * 32);
    let mut dim = 0;
    for start in (0..features.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(features.len());
        let d = features.dim();
        let x = Tensor::new(vec![end - start, d], features.data()[start * d..end * d].to_vec())?;
        let mut g = Graph::new();
        let xi = g.input(x);
        let y = encode_node(&mut g, ps, xi)?;
        dim = g.value(y).cols();
        out.extend_from_slice(g.value(y).data());
    }
    if features.is_empty() {
        dim = ps.get(&format!("{ENC}.l1.w"))?.shape()[1];
    }
    Embeddings::new(dim, out)
}

/// Fixed-capacity FIFO of unit-norm key representations.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    buf: Vec<f32>,
    cursor: usize,
    fill: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            buf: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends rows, overwriting the oldest entries once full.
    pub fn enqueue<'a>(&mut self, reps: impl IntoIterator<Item = &'a [f32]>) {
        for r in reps {
            debug_assert_eq!(r.len(), self.dim);
            debug_assert!((dot(r, r) - 1.0).abs() < 1e-3, "bank entries must be unit-norm");
            self.buf[self.cursor * self.dim..(self.cursor + 1) * self.dim].copy_from_slice(r);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &[f32]> {
        let start = if self.fill < self.capacity { 0 } else { self.cursor };
        (0..self.fill).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.buf[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.entries().flatten().map(|&v| T::of(v as f64)).collect();
        Tensor::new(vec![self.fill, self.dim], data).expect("bank layout")
    }
}

/// `-ln(e^{q.k+/tau} / (e^{q.k+/tau} + sum_i e^{q.k_i/tau}))` over the filled
/// bank entries, evaluated with log-sum-exp in `f64`.
pub fn infonce_loss(q: &[f32], k_pos: &[f32], bank: &MemoryBank, tau: f64) -> Result<f64> {
    if bank.fill() == 0 {
        return Err(CoreError::EmptyBank);
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(CoreError::Config("tau must be positive".into()));
    }
    let dot64 = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
    let pos = dot64(q, k_pos) / tau;
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(bank.entries().map(|k| dot64(q, k) / tau))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// `max(0, q.n - q.p + margin)`.
pub fn triplet_loss(q: &[f32], p: &[f32], n: &[f32], margin: f64) -> f64 {
    (dot(q, n) as f64 - dot(q, p) as f64 + margin).max(0.0)
}

/// `key <- m * key + (1 - m) * query` for every key tensor.
pub fn momentum_update(key: &mut ParamSet, query: &ParamSet, m: f64) -> Result<()> {
    for (name, k) in key.iter_mut() {
        let q = query.get(name)?;
        if q.shape() != k.shape() {
            return Err(TensorError::Shape {
                op: "momentum_update",
                shapes: vec![k.shape().to_vec(), q.shape().to_vec()],
            }
            .into());
        }
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = (m * *kv as f64 + (1.0 - m) * qv as f64) as f32;
        }
    }
    Ok(())
}

/// Where InfoNCE takes its negatives from.
pub enum Negatives<T> {
    /// `[F, d_rep]` bank snapshot; the positive for row `i` is `pos_keys[i]`.
    Bank(Tensor<T>),
    /// Other rows of `pos_keys`.
    InBatch,
    /// InfoNCE is skipped.
    Skip,
}

pub struct SclBatch<T> {
    pub queries: Tensor<T>,
    pub pos_keys: Tensor<T>,
    pub neg_keys: Option<Tensor<T>>,
    pub negatives: Negatives<T>,
}

pub struct LossNodes {
    pub total: Option<NodeId>,
    pub infonce: Option<NodeId>,
    pub triplet: Option<NodeId>,
}

/// Builds InfoNCE + `weight` * triplet for a batch. Keys enter as constants.
pub fn scl_loss<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    batch: &SclBatch<T>,
    margin: f64,
    weight: f64,
) -> Result<LossNodes> {
    // registered up front so the temperature always receives a gradient
    let lt = g.param_from(ps, LOG_TAU)?;
    let x = g.input(batch.queries.clone());
    let q = encode_node(g, ps, x)?;
    let kp = g.input(batch.pos_keys.clone());
    let b = batch.pos_keys.rows();

    let logits = match &batch.negatives {
        Negatives::Bank(bank) => {
            let pos = g.row_dot(q, kp)?;
            let bank = g.input(bank.clone());
            let neg = g.matmul_t(q, bank)?;
            Some((g.concat(&[pos, neg])?, vec![0; b]))
        }
        Negatives::InBatch => Some((g.matmul_t(q, kp)?, (0..b).collect())),
        Negatives::Skip => None,
    };
    let infonce = match logits {
        Some((logits, targets)) => {
            let inv_tau = g.neg(lt)?;
            let inv_tau = g.exp(inv_tau)?;
            let scaled = g.scale_by(logits, inv_tau)?;
            Some(g.softmax_cross_entropy(scaled, &targets)?)
        }
        None => None,
    };
    let triplet = match &batch.neg_keys {
        Some(n) => {
            let kn = g.input(n.clone());
            let sp = g.row_dot(q, kp)?;
            let sn = g.row_dot(q, kn)?;
            let gap = g.sub(sn, sp)?;
            let gap = g.add_scalar(gap, margin)?;
            let hinge = g.relu(gap)?;
            let mean = g.mean(hinge)?;
            Some(g.scale(mean, weight)?)
        }
        None => None,
    };
    let total = match (infonce, triplet) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    };
    Ok(LossNodes {
        total,
        infonce,
        triplet,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean total loss over the steps that had one.
    pub loss: f64,
    pub infonce: Option<f64>,
    pub triplet: Option<f64>,
    pub tau: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub epoch: usize,
    pub loss_curve: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// Per-epoch checkpoint destination.
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub config_hash: &'a str,
    pub seed: u64,
    /// File stem prefix, e.g. `scl` gives `scl_epoch_3.ckpt`.
    pub stem: &'a str,
}

impl CheckpointSink<'_> {
    pub fn path(&self, tag: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{}_{tag}.{ext}", self.stem))
    }

    fn metadata(&self, tag: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), self.config_hash.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("tag".to_string(), tag.to_string()),
        ])
    }

    fn write(&self, state: &EncoderState, tag: &str, curve: &[f64], epoch: usize) -> Result<()> {
        fs::create_dir_all(self.dir)?;
        checkpoint::save(self.path(tag, "ckpt"), &state.to_params(), &self.metadata(tag))?;
        let sidecar = CheckpointSidecar {
            epoch,
            loss_curve: curve.to_vec(),
            config_hash: self.config_hash.to_string(),
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(self.path(tag, "json"), json + "\n")?;
        Ok(())
    }
}

pub struct PretrainOutput {
    pub state: EncoderState,
    pub history: Vec<EpochMetrics>,
}

fn rows_tensor<T: Scalar>(rows: impl Iterator<Item = impl AsRef<[f32]>>, dim: usize) -> Tensor<T> {
    let data: Vec<T> = rows.flat_map(|r| r.as_ref().iter().map(|&v| T::of(v as f64)).collect::<Vec<_>>()).collect();
    Tensor::new(vec![data.len() / dim, dim], data).expect("row layout")
}

/// Trains the query encoder and temperature on triplets. Each step encodes
/// keys with the key encoder, minimizes InfoNCE (once the bank holds a batch
/// worth of keys, or always with in-batch negatives when the bank is off) plus
/// the weighted triplet hinge, then moves the key encoder and enqueues the
/// positive keys. Without the bank the key encoder tracks the query encoder
/// exactly (momentum 0). Zero epochs return the initialization.
pub fn pretrain(
    triplets: &[TripletSample],
    cfg: &PretrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let first = triplets
        .first()
        .ok_or_else(|| CoreError::Config("pretrain needs at least one triplet".into()))?;
    let d_raw = first.query.len();
    let mut state = EncoderState::init(d_raw, cfg);
    if !cfg.use_moco {
        state.momentum = 0.0;
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut bank = MemoryBank::new(cfg.bank_size, cfg.d_rep);
    let mut rng = rng_for(cfg.seed, "scl.shuffle");
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_nce, mut sum_tri) = (0.0, 0.0, 0.0);
        let (mut steps, mut nce_steps, mut tri_steps) = (0, 0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let feats = |f: fn(&TripletSample) -> &Vec<f32>| {
                let rows: Vec<Vec<f32>> = chunk.iter().map(|&i| f(&triplets[i]).clone()).collect();
                Embeddings::from_rows(&rows)
            };
            let pos_keys = encode(&state.key, &feats(|t| &t.positive)?)?;
            let neg_keys = if cfg.use_triplet {
                Some(encode(&state.key, &feats(|t| &t.hard_negative)?)?)
            } else {
                None
            };
            let negatives = if !cfg.use_moco {
                Negatives::InBatch
            } else if bank.fill() >= cfg.batch_size {
                Negatives::Bank(bank.to_tensor())
            } else {
                Negatives::Skip
            };
            let batch = SclBatch {
                queries: rows_tensor(chunk.iter().map(|&i| &triplets[i].query), d_raw),
                pos_keys: rows_tensor(pos_keys.iter(), cfg.d_rep),
                neg_keys: neg_keys.as_ref().map(|n| rows_tensor(n.iter(), cfg.d_rep)),
                negatives,
            };
            let mut g = Graph::new();
            let built = scl_loss(&mut g, &state.query, &batch, cfg.margin, cfg.triplet_weight);
            let nodes = match built {
                Ok(n) => n,
                Err(e) => return Err(diverged(sink, &state, &curve, epoch, step, e)),
            };
            if let Some(total) = nodes.total {
                let loss = g.value(total).item() as f64;
                if !loss.is_finite() {
                    return Err(diverged(sink, &state, &curve, epoch, step, "non-finite loss"));
                }
                let grads = g.backward(total)?;
                adam.step(&mut state.query, &grads)?;
                let lt = state.query.get_mut(LOG_TAU)?;
                let floor = cfg.min_tau.ln() as f32;
                if lt.item() < floor {
                    lt.data_mut()[0] = floor;
                }
                sum += loss;
                steps += 1;
                if let Some(n) = nodes.infonce {
                    sum_nce += g.value(n).item() as f64;
                    nce_steps += 1;
                }
                if let Some(n) = nodes.triplet {
                    sum_tri += g.value(n).item() as f64;
                    tri_steps += 1;
                }
            }
            momentum_update(&mut state.key, &state.query, state.momentum)?;
            if cfg.use_moco {
                bank.enqueue(pos_keys.iter());
            }
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let m = EpochMetrics {
            epoch,
            loss: mean(sum, steps).unwrap_or(0.0),
            infonce: mean(sum_nce, nce_steps),
            triplet: mean(sum_tri, tri_steps),
            tau: state.tau(),
            steps,
        };
        log::info!("scl epoch {epoch}: loss {:.4} tau {:.4}", m.loss, m.tau);
        curve.push(m.loss);
        history.push(m);
        if let Some(s) = sink {
            s.write(&state, &format!("epoch_{epoch}"), &curve, epoch)?;
        }
    }
    Ok(PretrainOutput { state, history })
}

fn diverged(
    sink: Option<&CheckpointSink>,
    state: &EncoderState,
    curve: &[f64],
    epoch: usize,
    step: usize,
    detail: impl ToString,
) -> CoreError {
    if let Some(s) = sink {
        if let Err(e) = s.write(state, "diverged", curve, epoch) {
            log::error!("could not write divergence checkpoint: {e}");
        }
    }
    CoreError::Diverged {
        epoch,
        step,
        detail: detail.to_string(),
    }
}

/// Retrieval set from held-out triplets: one entry per distinct purchased
/// item (first occurrence), queries and positives both encoded by the query
/// encoder.
pub fn retrieval_set(query_params: &ParamSet, triplets: &[TripletSample]) -> Result<RetrievalSet> {
    let mut seen = std::collections::BTreeSet::new();
    let picked: Vec<&TripletSample> = triplets
        .iter()
        .filter(|t| seen.insert(t.positive_item_id))
        .collect();
    let q = Embeddings::from_rows(&picked.iter().map(|t| t.query.clone()).collect::<Vec<_>>())?;
    let p = Embeddings::from_rows(&picked.iter().map(|t| t.positive.clone()).collect::<Vec<_>>())?;
    RetrievalSet::new(encode(query_params, &q)?, encode(query_params, &p)?)
}
