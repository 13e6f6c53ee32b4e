//! Multimodal knowledge extractor: target-aware attention over behavior
//! representations feeding a four-layer MLP, pretrained on click labels for
//! several epochs and then used as a frozen feature generator.

use std::fmt::Write as _;

use mmrec_tensor::{bce_logit, sigmoid, Adam, AdamConfig, Graph, NodeId, ParamSet, Scalar, Segments};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::{check_reps, gather, pack, Packed};
use crate::error::{CoreError, Result};
use crate::metrics::{auc, gauc, logloss};
use crate::nn::{din_attention, init_din, init_mlp, mlp, rng_for};
use crate::reps::Embeddings;
use crate::synth::{ImpressionRecord, PAD};

pub const ATT: &str = "make.att";
pub const MLP: &str = "make.mlp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MakeConfig {
    pub att_hidden: usize,
    /// Exactly four layers, the last of width 1.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l_max: usize,
    /// Train the extractor together with the downstream model instead of
    /// freezing it.
    pub fine_tune: bool,
    pub seed: u64,
}

impl Default for MakeConfig {
    fn default() -> Self {
        Self {
            att_hidden: 32,
            widths: vec![64, 32, 16, 1],
            epochs: 4,
            batch_size: 256,
            lr: 1e-3,
            l_max: 50,
            fine_tune: false,
            seed: 0,
        }
    }
}

impl MakeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths[3] != 1 || self.widths.contains(&0) {
            return Err(CoreError::Config(
                "make.widths must list four positive widths ending in 1".into(),
            ));
        }
        if self.batch_size == 0 || self.att_hidden == 0 {
            return Err(CoreError::Config("make batch_size and att_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Total width of the hidden activations.
    pub fn hidden_width(&self) -> usize {
        self.widths[..3].iter().sum()
    }

    pub fn knowledge_width(&self, d_rep: usize) -> usize {
        d_rep + self.hidden_width()
    }
}

pub fn init_make(d_rep: usize, cfg: &MakeConfig) -> ParamSet {
    let mut ps = ParamSet::new();
    init_din(&mut ps, cfg.seed, ATT, d_rep, cfg.att_hidden);
    init_mlp(&mut ps, cfg.seed, MLP, d_rep, &cfg.widths);
    ps
}

pub struct MakeNodes {
    pub weights: NodeId,
    pub v_make: NodeId,
    pub hidden: Vec<NodeId>,
    pub logit: NodeId,
}

/// Graph forward from packed behavior rows `[P, d]` and targets `[B, d]`.
pub fn make_nodes<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    seq: NodeId,
    target: NodeId,
    segs: &std::sync::Arc<Segments>,
) -> Result<MakeNodes> {
    let att = din_attention(g, ps, ATT, seq, target, segs)?;
    let (hidden, logit) = mlp(g, ps, MLP, 4, att.pooled)?;
    Ok(MakeNodes {
        weights: att.weights,
        v_make: att.pooled,
        hidden,
        logit,
    })
}

/// Adds the representation inputs of `batch` to `g` and runs the extractor.
pub fn make_batch_nodes<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    reps: &Embeddings,
    batch: &Packed,
) -> Result<MakeNodes> {
    let seq = g.input(gather(reps, &batch.seq_items)?);
    let target = g.input(gather(reps, &batch.targets)?);
    make_nodes(g, ps, seq, target, &batch.segs)
}

/// Logits and concatenated hidden activations, one row per record.
pub struct MakeForward {
    pub logits: Vec<f32>,
    pub hidden: Embeddings,
}

pub fn make_forward(ps: &ParamSet, reps: &Embeddings, batch: &Packed) -> Result<MakeForward> {
    let mut g = Graph::new();
    let n = make_batch_nodes(&mut g, ps, reps, batch)?;
    let h = g.concat(&n.hidden)?;
    Ok(MakeForward {
        logits: g.value(n.logit).data().to_vec(),
        hidden: Embeddings::new(g.value(h).cols(), g.value(h).data().to_vec())?,
    })
}

/// Mean binary cross-entropy of `sigmoid(logit)` in the stable logit form.
pub fn make_loss(logits: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| bce_logit(z, y as f64))
        .sum();
    total / logits.len().max(1) as f64
}

/// `[v_MAKE, hidden activations]` for each record, computed without touching
/// the parameters.
pub fn extract_knowledge(ps: &ParamSet, reps: &Embeddings, batch: &Packed) -> Result<Embeddings> {
    let mut g = Graph::new();
    let n = make_batch_nodes(&mut g, ps, reps, batch)?;
    let mut parts = vec![n.v_make];
    parts.extend(&n.hidden);
    let kv = g.concat(&parts)?;
    Embeddings::new(g.value(kv).cols(), g.value(kv).data().to_vec())
}

/// Attention weights laid out like `record.behavior_seq`: padding and
/// behaviors older than the last `l_max` get exactly 0.
pub fn attention_weights(ps: &ParamSet, reps: &Embeddings, record: &ImpressionRecord, l_max: usize) -> Result<Vec<f32>> {
    let batch = pack([record], l_max);
    let mut g = Graph::new();
    let n = make_batch_nodes(&mut g, ps, reps, &batch)?;
    let w = g.value(n.weights).data();
    let mut out = vec![0.0; record.behavior_seq.len()];
    let real: Vec<usize> = (0..out.len()).filter(|&i| record.behavior_seq[i] != PAD).collect();
    let kept = &real[real.len() - w.len()..];
    for (&pos, &v) in kept.iter().zip(w) {
        out[pos] = v;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MakeEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub gauc: Option<f64>,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
}

pub struct MakeRun {
    pub params: ParamSet,
    pub history: Vec<MakeEpoch>,
    /// Parameters after 0, 1, ..., `epochs` epochs.
    pub snapshots: Vec<ParamSet>,
}

/// `epoch,gauc,auc,logloss`; undefined metrics are left empty.
pub fn history_csv(history: &[MakeEpoch]) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,gauc,auc,logloss\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{}", h.epoch, f(h.gauc), f(h.auc), f(h.logloss));
    }
    out
}

/// Click probabilities for every record, in order.
pub fn predict(ps: &ParamSet, reps: &Embeddings, records: &[ImpressionRecord], cfg: &MakeConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(4096) {
        let f = make_forward(ps, reps, &pack(chunk, cfg.l_max))?;
        out.extend(f.logits.iter().map(|&z| sigmoid(z as f64)));
    }
    Ok(out)
}

/// Trains attention and MLP on click labels for `cfg.epochs` passes over
/// `train`, evaluating on `eval` after every epoch.
pub fn make_pretrain(
    train: &[ImpressionRecord],
    eval: &[ImpressionRecord],
    reps: &Embeddings,
    cfg: &MakeConfig,
) -> Result<MakeRun> {
    cfg.validate()?;
    check_reps(train, reps)?;
    check_reps(eval, reps)?;
    let mut params = init_make(reps.dim(), cfg);
    let mut snapshots = vec![params.clone()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut rng = rng_for(cfg.seed, "make.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = pack(chunk.iter().map(|&i| &train[i]), cfg.l_max);
            let mut g = Graph::new();
            let nodes = make_batch_nodes(&mut g, &params, reps, &batch)?;
            let loss = g.bce_with_logits(nodes.logit, &batch.labels_as::<f32>())?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    step,
                    detail: "non-finite extractor loss".into(),
                });
            }
            let grads = g.backward(loss)?;
            adam.step(&mut params, &grads)?;
            sum += lv * batch.len() as f64;
            n += batch.len();
        }
        let probs = predict(&params, reps, eval, cfg)?;
        let labels: Vec<u8> = eval.iter().map(|r| r.label).collect();
        let users: Vec<u64> = eval.iter().map(|r| r.user_id).collect();
        let row = MakeEpoch {
            epoch,
            train_loss: sum / n.max(1) as f64,
            gauc: gauc(&probs, &labels, &users).ok(),
            auc: auc(&probs, &labels).ok(),
            logloss: logloss(&probs, &labels).ok(),
        };
        log::info!("make epoch {epoch}: loss {:.5} gauc {:?}", row.train_loss, row.gauc);
        history.push(row);
        snapshots.push(params.clone());
    }
    Ok(MakeRun {
        params,
        history,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_at_zero_logit_is_ln2() {
        for y in [0u8, 1] {
            assert!((make_loss(&[0.0], &[y]) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!(make_loss(&[20.0], &[1]) < 1e-8);
    }

    #[test]
    fn loss_matches_direct_formula() {
        for z in -3..=3 {
            let z = z as f64;
            let s = 1.0 / (1.0 + (-z).exp());
            for y in [0u8, 1] {
                let yf = y as f64;
                let naive = -yf * s.ln() - (1.0 - yf) * (1.0 - s).ln();
                assert!((make_loss(&[z], &[y]) - naive).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn widths_must_have_four_layers() {
        let bad = MakeConfig {
            widths: vec![8, 1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cfg = MakeConfig::default();
        assert_eq!(cfg.hidden_width(), 112);
        assert_eq!(cfg.knowledge_width(32), 144);
    }
}
