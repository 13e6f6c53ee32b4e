//! Exact top-N retrieval, Acc@N and the pretraining-accuracy vs CTR-lift
//! correlation table.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::reps::{dot, Embeddings};

/// Queries paired by index with their true positives; the positives double as
/// the retrieval corpus.
#[derive(Clone, Debug)]
pub struct RetrievalSet {
    pub queries: Embeddings,
    pub positives: Embeddings,
}

impl RetrievalSet {
    pub fn new(queries: Embeddings, positives: Embeddings) -> Result<Self> {
        if queries.len() != positives.len() || queries.is_empty() {
            return Err(CoreError::Dim {
                op: "retrieval_set",
                expected: queries.len(),
                got: positives.len(),
            });
        }
        if queries.dim() != positives.dim() {
            return Err(CoreError::Dim {
                op: "retrieval_set",
                expected: queries.dim(),
                got: positives.dim(),
            });
        }
        Ok(Self { queries, positives })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Descending by score, ascending by index on ties.
fn ranking_order(scores: &[f32], a: usize, b: usize) -> Ordering {
    score_cmp(scores[b], scores[a]).then(a.cmp(&b))
}

// Total order on scores in which -0.0 and 0.0 tie.
fn score_cmp(a: f32, b: f32) -> Ordering {
    (a + 0.0).total_cmp(&(b + 0.0))
}

/// Indices of the `n` corpus rows with the largest dot product with `query`.
pub fn top_n(query: &[f32], corpus: &Embeddings, n: usize) -> Result<Vec<usize>> {
    if n > corpus.len() {
        return Err(CoreError::TopN {
            n,
            len: corpus.len(),
        });
    }
    if query.len() != corpus.dim() {
        return Err(CoreError::Dim {
            op: "top_n",
            expected: corpus.dim(),
            got: query.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let scores: Vec<f32> = corpus.iter().map(|r| dot(query, r)).collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.select_nth_unstable_by(n - 1, |&a, &b| ranking_order(&scores, a, b));
    idx.truncate(n);
    idx.sort_unstable_by(|&a, &b| ranking_order(&scores, a, b));
    Ok(idx)
}

/// Zero-based position of each query's true positive in its ranking.
fn positive_ranks(set: &RetrievalSet) -> Vec<usize> {
    let corpus = &set.positives;
    (0..set.len())
        .map(|i| {
            let q = set.queries.row(i);
            let own = dot(q, corpus.row(i));
            corpus
                .iter()
                .enumerate()
                .filter(|&(j, r)| score_cmp(dot(q, r), own).then(i.cmp(&j)).is_gt())
                .count()
        })
        .collect()
}

/// Fraction of queries whose positive is within the exact top `n`.
pub fn acc_at_n(set: &RetrievalSet, n: usize) -> f64 {
    acc_at_ns(set, &[n])[0]
}

/// Acc@N for several `n` from a single ranking pass.
pub fn acc_at_ns(set: &RetrievalSet, ns: &[usize]) -> Vec<f64> {
    let ranks = positive_ranks(set);
    let d = ranks.len() as f64;
    ns.iter()
        .map(|&n| ranks.iter().filter(|&&r| r < n).count() as f64 / d)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointAccuracy {
    pub checkpoint: String,
    pub acc1: f64,
    pub acc5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub checkpoint: String,
    pub acc1: f64,
    pub acc5: f64,
    pub gauc_lift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    /// Sorted by `acc1` ascending, then by checkpoint id.
    pub rows: Vec<CorrelationRow>,
    /// Spearman correlation of `acc1` and `gauc_lift`; `None` with fewer than
    /// two rows or a constant column.
    pub spearman: Option<f64>,
}

impl CorrelationTable {
    /// `checkpoint,acc1,acc5,gauc_lift`, one row per checkpoint, then a
    /// `spearman` footer whose value sits in the `gauc_lift` column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,acc1,acc5,gauc_lift\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.checkpoint, r.acc1, r.acc5, r.gauc_lift);
        }
        let rho = self.spearman.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "spearman,,,{rho}");
        out
    }
}

/// Joins retrieval accuracy with downstream GAUC lift by checkpoint id.
pub fn export_correlation(
    checkpoints: &[CheckpointAccuracy],
    gauc_lifts: &BTreeMap<String, f64>,
) -> Result<CorrelationTable> {
    let ids: BTreeMap<&str, ()> = checkpoints.iter().map(|c| (c.checkpoint.as_str(), ())).collect();
    let mut unmatched: Vec<String> = checkpoints
        .iter()
        .filter(|c| !gauc_lifts.contains_key(&c.checkpoint))
        .map(|c| c.checkpoint.clone())
        .chain(gauc_lifts.keys().filter(|k| !ids.contains_key(k.as_str())).cloned())
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(CoreError::Unmatched(unmatched));
    }
    let mut rows: Vec<CorrelationRow> = checkpoints
        .iter()
        .map(|c| CorrelationRow {
            checkpoint: c.checkpoint.clone(),
            acc1: c.acc1,
            acc5: c.acc5,
            gauc_lift: gauc_lifts[&c.checkpoint],
        })
        .collect();
    rows.sort_by(|a, b| a.acc1.total_cmp(&b.acc1).then_with(|| a.checkpoint.cmp(&b.checkpoint)));
    let x: Vec<f64> = rows.iter().map(|r| r.acc1).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.gauc_lift).collect();
    Ok(CorrelationTable {
        spearman: spearman(&x, &y),
        rows,
    })
}

/// Average ranks, ties sharing their mean rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
