//! Packing impression records into ragged mini-batches.

use std::sync::Arc;

use mmrec_tensor::{Scalar, Segments, Tensor};

use crate::error::{CoreError, Result};
use crate::reps::Embeddings;
use crate::synth::ImpressionRecord;

/// A mini-batch with behavior sequences packed back to back.
#[derive(Clone, Debug)]
pub struct Packed {
    pub users: Vec<u64>,
    pub targets: Vec<usize>,
    /// Item id of every packed behavior row.
    pub seq_items: Vec<usize>,
    /// Rows of `seq_items` owned by each record.
    pub segs: Arc<Segments>,
    pub labels: Vec<u8>,
}

impl Packed {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn labels_as<T: Scalar>(&self) -> Vec<T> {
        self.labels.iter().map(|&l| T::of(l as f64)).collect()
    }
}

/// Non-padded behaviors of a record, keeping the most recent `l_max`.
pub fn recent_behaviors(r: &ImpressionRecord, l_max: usize) -> Vec<usize> {
    let all: Vec<usize> = r.behaviors().map(|i| i as usize).collect();
    let skip = all.len().saturating_sub(l_max);
    all[skip..].to_vec()
}

pub fn pack<'a>(records: impl IntoIterator<Item = &'a ImpressionRecord>, l_max: usize) -> Packed {
    let mut p = Packed {
        users: Vec::new(),
        targets: Vec::new(),
        seq_items: Vec::new(),
        segs: Arc::new(Segments::from_lengths([])),
        labels: Vec::new(),
    };
    let mut lengths = Vec::new();
    for r in records {
        let seq = recent_behaviors(r, l_max);
        lengths.push(seq.len());
        p.seq_items.extend(seq);
        p.users.push(r.user_id);
        p.targets.push(r.target_item_id as usize);
        p.labels.push(r.label);
    }
    p.segs = Arc::new(Segments::from_lengths(lengths));
    p
}

/// Fails with the first item id that has no row in `reps`.
pub fn check_reps(records: &[ImpressionRecord], reps: &Embeddings) -> Result<()> {
    for r in records {
        reps.get(r.target_item_id as i64)?;
        for b in r.behaviors() {
            reps.get(b)?;
        }
    }
    Ok(())
}

/// Stacks the representation rows of `ids` into a `[ids.len(), dim]` tensor.
pub fn gather<T: Scalar>(reps: &Embeddings, ids: &[usize]) -> Result<Tensor<T>> {
    let d = reps.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        if i >= reps.len() {
            return Err(CoreError::MissingRep(i as i64));
        }
        data.extend(reps.row(i).iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(vec![ids.len(), d], data)?)
}
